//! 3D cross-correlation kernels (forward and backward).
//!
//! Loops are arranged so the innermost pass runs along contiguous W rows;
//! with stride 1 the hot loops are plain slice zips the compiler vectorizes.
//! Accumulation order is fixed, so results are deterministic.

use super::{numel, Element, TensorError};

/// Validate conv shapes and return the output shape `[N,Cout,OD,OH,OW]`.
pub fn conv3d_out_shape(
    input: &[usize],
    weight: &[usize],
    bias: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Vec<usize>, TensorError> {
    if input.len() != 5 || weight.len() != 5 || bias.len() != 1 {
        return Err(TensorError::ShapeMismatch(format!(
            "conv3d expects input [N,Cin,D,H,W], weight [Cout,Cin,k,k,k], bias [Cout]; got {input:?}, {weight:?}, {bias:?}"
        )));
    }
    let (cin, k) = (weight[1], weight[2]);
    if weight[3] != k || weight[4] != k {
        return Err(TensorError::ShapeMismatch(format!("non-cubic kernel {weight:?}")));
    }
    if input[1] != cin {
        return Err(TensorError::ShapeMismatch(format!(
            "input channels {} vs weight Cin {}",
            input[1], cin
        )));
    }
    if bias[0] != weight[0] {
        return Err(TensorError::ShapeMismatch(format!(
            "bias {} vs weight Cout {}",
            bias[0], weight[0]
        )));
    }
    if stride == 0 {
        return Err(TensorError::ShapeMismatch("stride must be positive".into()));
    }
    let out_spatial = |d: usize| -> Result<usize, TensorError> {
        let span = d + 2 * padding;
        if span < k || (span - k) % stride != 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "spatial dim {d} with k={k}, stride={stride}, padding={padding} has no integral output"
            )));
        }
        Ok((span - k) / stride + 1)
    };
    Ok(vec![
        input[0],
        weight[0],
        out_spatial(input[2])?,
        out_spatial(input[3])?,
        out_spatial(input[4])?,
    ])
}

/// Row range of output positions `ow` for which `ow*stride + kx - padding`
/// lands inside `[0, w)`.
#[inline]
fn ow_range(kx: usize, padding: usize, stride: usize, w: usize, ow_max: usize) -> (usize, usize) {
    // zw = ow*stride + kx - padding in [0, w)
    let lo = padding.saturating_sub(kx).div_ceil(stride);
    let hi_excl = (w + padding).saturating_sub(kx).div_ceil(stride).min(ow_max);
    (lo.min(hi_excl), hi_excl)
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_forward<E: Element>(
    input: &[E],
    ishape: &[usize],
    weight: &[E],
    wshape: &[usize],
    bias: &[E],
    stride: usize,
    padding: usize,
    oshape: &[usize],
) -> Vec<E> {
    let (n, cin, d, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3], ishape[4]);
    let (cout, k) = (wshape[0], wshape[2]);
    let (od, oh, ow) = (oshape[2], oshape[3], oshape[4]);
    let mut out = vec![E::ZERO; numel(oshape)];
    for ni in 0..n {
        for co in 0..cout {
            let b = bias[co];
            for zd_out in 0..od {
                for zh_out in 0..oh {
                    let orow_base = (((ni * cout + co) * od + zd_out) * oh + zh_out) * ow;
                    let orow = &mut out[orow_base..orow_base + ow];
                    for o in orow.iter_mut() {
                        *o = b;
                    }
                    for ci in 0..cin {
                        for kz in 0..k {
                            let zd = (zd_out * stride + kz) as isize - padding as isize;
                            if zd < 0 || zd >= d as isize {
                                continue;
                            }
                            for ky in 0..k {
                                let zh = (zh_out * stride + ky) as isize - padding as isize;
                                if zh < 0 || zh >= h as isize {
                                    continue;
                                }
                                let irow_base =
                                    (((ni * cin + ci) * d + zd as usize) * h + zh as usize) * w;
                                let irow = &input[irow_base..irow_base + w];
                                let wbase = (((co * cin + ci) * k + kz) * k + ky) * k;
                                for kx in 0..k {
                                    let wv = weight[wbase + kx];
                                    let (lo, hi) = ow_range(kx, padding, stride, w, ow);
                                    if stride == 1 {
                                        let shift = kx as isize - padding as isize;
                                        let src =
                                            &irow[(lo as isize + shift) as usize
                                                ..(hi as isize + shift) as usize];
                                        for (o, &x) in orow[lo..hi].iter_mut().zip(src.iter()) {
                                            *o += wv * x;
                                        }
                                    } else {
                                        for oi in lo..hi {
                                            let zw = oi * stride + kx - padding;
                                            orow[oi] += wv * irow[zw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients w.r.t. input, weight and bias given the output gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<E: Element>(
    input: &[E],
    ishape: &[usize],
    weight: &[E],
    wshape: &[usize],
    gout: &[E],
    oshape: &[usize],
    stride: usize,
    padding: usize,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let (n, cin, d, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3], ishape[4]);
    let (cout, k) = (wshape[0], wshape[2]);
    let (od, oh, ow) = (oshape[2], oshape[3], oshape[4]);
    let mut gin = vec![E::ZERO; input.len()];
    let mut gw = vec![E::ZERO; weight.len()];
    let mut gb = vec![E::ZERO; cout];
    for ni in 0..n {
        for co in 0..cout {
            for zd_out in 0..od {
                for zh_out in 0..oh {
                    let orow_base = (((ni * cout + co) * od + zd_out) * oh + zh_out) * ow;
                    let grow = &gout[orow_base..orow_base + ow];
                    let mut bacc = E::ZERO;
                    for &g in grow {
                        bacc += g;
                    }
                    gb[co] += bacc;
                    for ci in 0..cin {
                        for kz in 0..k {
                            let zd = (zd_out * stride + kz) as isize - padding as isize;
                            if zd < 0 || zd >= d as isize {
                                continue;
                            }
                            for ky in 0..k {
                                let zh = (zh_out * stride + ky) as isize - padding as isize;
                                if zh < 0 || zh >= h as isize {
                                    continue;
                                }
                                let irow_base =
                                    (((ni * cin + ci) * d + zd as usize) * h + zh as usize) * w;
                                let irow = &input[irow_base..irow_base + w];
                                let girow = &mut gin[irow_base..irow_base + w];
                                let wbase = (((co * cin + ci) * k + kz) * k + ky) * k;
                                for kx in 0..k {
                                    let wv = weight[wbase + kx];
                                    let (lo, hi) = ow_range(kx, padding, stride, w, ow);
                                    let mut wacc = E::ZERO;
                                    if stride == 1 {
                                        let shift = kx as isize - padding as isize;
                                        let s_lo = (lo as isize + shift) as usize;
                                        let s_hi = (hi as isize + shift) as usize;
                                        for ((gi, &x), &g) in girow[s_lo..s_hi]
                                            .iter_mut()
                                            .zip(irow[s_lo..s_hi].iter())
                                            .zip(grow[lo..hi].iter())
                                        {
                                            *gi += wv * g;
                                            wacc += x * g;
                                        }
                                    } else {
                                        for oi in lo..hi {
                                            let zw = oi * stride + kx - padding;
                                            girow[zw] += wv * grow[oi];
                                            wacc += irow[zw] * grow[oi];
                                        }
                                    }
                                    gw[wbase + kx] += wacc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gin, gw, gb)
}
