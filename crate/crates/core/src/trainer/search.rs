//! Generic hyperparameter grid search: evaluate an objective at every point
//! of a named cartesian grid, return the argmax and the complete table.
//! Ties resolve to the earliest point in grid order, so results never depend
//! on evaluation scheduling.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum SearchError {
    #[error("empty grid")]
    EmptyGrid,
}

/// One grid coordinate: `(axis name, value)` pairs in axis order.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub values: Vec<(String, f64)>,
}

impl GridPoint {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: GridPoint,
    pub best_value: f64,
    /// Every evaluated point with its objective, in grid order.
    pub table: Vec<(GridPoint, f64)>,
}

/// Evaluate `objective` over the cartesian product of `axes` (first axis
/// slowest). The best point maximizes the objective.
pub fn grid_search<E>(
    axes: &[(String, Vec<f64>)],
    mut objective: impl FnMut(&GridPoint) -> Result<f64, E>,
) -> Result<Result<SearchResult, SearchError>, E> {
    if axes.is_empty() || axes.iter().any(|(_, vs)| vs.is_empty()) {
        return Ok(Err(SearchError::EmptyGrid));
    }
    let total: usize = axes.iter().map(|(_, vs)| vs.len()).product();
    let mut table = Vec::with_capacity(total);
    let mut indices = vec![0usize; axes.len()];
    loop {
        let point = GridPoint {
            values: axes
                .iter()
                .zip(indices.iter())
                .map(|((name, vs), &i)| (name.clone(), vs[i]))
                .collect(),
        };
        let value = objective(&point)?;
        table.push((point, value));
        // odometer increment, last axis fastest
        let mut axis = axes.len();
        loop {
            if axis == 0 {
                let (best, best_value) = table
                    .iter()
                    .fold(None::<(&GridPoint, f64)>, |acc, (p, v)| match acc {
                        Some((_, bv)) if *v <= bv => acc,
                        _ => Some((p, *v)),
                    })
                    .expect("table is nonempty");
                return Ok(Ok(SearchResult { best: best.clone(), best_value, table }));
            }
            axis -= 1;
            indices[axis] += 1;
            if indices[axis] < axes[axis].1.len() {
                break;
            }
            indices[axis] = 0;
        }
    }
}
