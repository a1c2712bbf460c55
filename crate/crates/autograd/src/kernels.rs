//! Forward and backward kernels on raw NCHW buffers.

use crate::scalar::gemm;
use crate::Scalar;

/// Geometry of a square-kernel 2-D convolution over an NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn columns(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let ncols = g.columns();
    let plane = g.height * g.width;
    for c in 0..g.in_ch {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_ch + c) * plane..(n * g.in_ch + c + 1) * plane];
                    for oy in 0..ho {
                        let dst = &mut dst_row[(n * ho + oy) * wo..(n * ho + oy + 1) * wo];
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.width as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let ncols = g.columns();
    let plane = g.height * g.width;
    for c in 0..g.in_ch {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut dx[(n * g.in_ch + c) * plane..(n * g.in_ch + c + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src = &src_row[(n * ho + oy) * wo..(n * ho + oy + 1) * wo];
                        let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, w) + b`, weights laid out `[out_ch, in_ch, k, k]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (k, ncols) = (g.patch_len(), g.columns());
    let mut cols = vec![T::zero(); k * ncols];
    im2col(x, g, &mut cols);
    let mut ymat = vec![T::zero(); g.out_ch * ncols];
    gemm(false, false, g.out_ch, k, ncols, T::one(), w, &cols, T::zero(), &mut ymat);
    let hw = g.out_height() * g.out_width();
    let mut y = vec![T::zero(); g.batch * g.out_ch * hw];
    for n in 0..g.batch {
        for co in 0..g.out_ch {
            let bias = b.map_or(T::zero(), |b| b[co]);
            let src = &ymat[co * ncols + n * hw..co * ncols + (n + 1) * hw];
            let dst = &mut y[(n * g.out_ch + co) * hw..(n * g.out_ch + co + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
    y
}

/// Gradients of a convolution: `(dx, dw, db)`; `dx` only when requested.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (k, ncols) = (g.patch_len(), g.columns());
    let hw = g.out_height() * g.out_width();
    let mut dymat = vec![T::zero(); g.out_ch * ncols];
    let mut db = vec![T::zero(); g.out_ch];
    for n in 0..g.batch {
        for co in 0..g.out_ch {
            let src = &dy[(n * g.out_ch + co) * hw..(n * g.out_ch + co + 1) * hw];
            dymat[co * ncols + n * hw..co * ncols + (n + 1) * hw].copy_from_slice(src);
            let mut acc = T::zero();
            for &v in src {
                acc += v;
            }
            db[co] += acc;
        }
    }
    let mut cols = vec![T::zero(); k * ncols];
    im2col(x, g, &mut cols);
    let mut dw = vec![T::zero(); g.out_ch * k];
    gemm(false, true, g.out_ch, ncols, k, T::one(), &dymat, &cols, T::zero(), &mut dw);
    let dx = need_dx.then(|| {
        gemm(true, false, k, g.out_ch, ncols, T::one(), w, &dymat, T::zero(), &mut cols);
        let mut dx = vec![T::zero(); g.batch * g.in_ch * g.height * g.width];
        col2im(&cols, g, &mut dx);
        dx
    });
    (dx, dw, db)
}

/// Per-(sample, group) statistics kept from the forward pass.
#[derive(Clone, Debug)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Group normalization over `[batch, channels, plane]` with per-channel affine.
pub fn group_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    groups: usize,
    eps: f64,
) -> (Vec<T>, GroupStats) {
    let cg = channels / groups;
    let span = cg * plane;
    let mut y = vec![T::zero(); x.len()];
    let mut stats = GroupStats { mean: Vec::with_capacity(batch * groups), rstd: Vec::with_capacity(batch * groups) };
    for n in 0..batch {
        for gi in 0..groups {
            let off = (n * channels + gi * cg) * plane;
            let seg = &x[off..off + span];
            let mean = seg.iter().map(|v| v.f64()).sum::<f64>() / span as f64;
            let var = seg.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / span as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.mean.push(mean);
            stats.rstd.push(rstd);
            for c in 0..cg {
                let ch = gi * cg + c;
                let (ga, be) = (gamma[ch].f64(), beta[ch].f64());
                let base = off + c * plane;
                for i in base..base + plane {
                    y[i] = T::of((x[i].f64() - mean) * rstd * ga + be);
                }
            }
        }
    }
    (y, stats)
}

/// Returns `(dx, dgamma, dbeta)` for group normalization.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    dy: &[T],
    stats: &GroupStats,
    batch: usize,
    channels: usize,
    plane: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = channels / groups;
    let span = (cg * plane) as f64;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![0.0f64; channels];
    let mut dbeta = vec![0.0f64; channels];
    for n in 0..batch {
        for gi in 0..groups {
            let (mean, rstd) = (stats.mean[n * groups + gi], stats.rstd[n * groups + gi]);
            let off = (n * channels + gi * cg) * plane;
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for c in 0..cg {
                let ch = gi * cg + c;
                let ga = gamma[ch].f64();
                let base = off + c * plane;
                for i in base..base + plane {
                    let xh = (x[i].f64() - mean) * rstd;
                    let d = dy[i].f64();
                    dgamma[ch] += d * xh;
                    dbeta[ch] += d;
                    sum_dxh += d * ga;
                    sum_dxh_xh += d * ga * xh;
                }
            }
            let (m1, m2) = (sum_dxh / span, sum_dxh_xh / span);
            for c in 0..cg {
                let ga = gamma[gi * cg + c].f64();
                let base = off + c * plane;
                for i in base..base + plane {
                    let xh = (x[i].f64() - mean) * rstd;
                    dx[i] = T::of(rstd * (dy[i].f64() * ga - m1 - xh * m2));
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect();
    (dx, cast(dgamma), cast(dbeta))
}

/// Row-wise numerically stable softmax of an `rows x cols` matrix, in place.
pub fn softmax_rows<T: Scalar>(a: &mut [T], cols: usize) {
    for row in a.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Geometry of single-head dot-product self-attention over tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    pub batch: usize,
    /// Feature dimension of every token (channels).
    pub dim: usize,
    /// Number of tokens (spatial positions).
    pub tokens: usize,
    /// Key/query dimension.
    pub key_dim: usize,
}

impl AttnGeom {
    fn scale(&self) -> f64 {
        1.0 / (self.key_dim as f64).sqrt()
    }
}

fn project<T: Scalar>(xs: &[T], wt: &[T], g: &AttnGeom, out_dim: usize) -> Vec<T> {
    // xs is [dim, tokens]; result is tokens x out_dim = xs^T W.
    let mut out = vec![T::zero(); g.tokens * out_dim];
    gemm(true, false, g.tokens, g.dim, out_dim, T::one(), xs, wt, T::zero(), &mut out);
    out
}

/// Attention over channel-major tokens.
///
/// For every sample, `x` holds a `[dim, tokens]` block; the tokens are
/// `Z = x^T` and the result is `softmax(Z Wq (Z Wk)^T / sqrt(key_dim)) Z Wv`
/// written back channel-major. Returns the output and the attention
/// probabilities (`tokens x tokens` per sample).
pub fn attention_forward<T: Scalar>(
    x: &[T],
    wq: &[T],
    wk: &[T],
    wv: &[T],
    g: &AttnGeom,
) -> (Vec<T>, Vec<T>) {
    let block = g.dim * g.tokens;
    let mm = g.tokens * g.tokens;
    let mut y = vec![T::zero(); g.batch * block];
    let mut probs = vec![T::zero(); g.batch * mm];
    for n in 0..g.batch {
        let xs = &x[n * block..(n + 1) * block];
        let q = project(xs, wq, g, g.key_dim);
        let k = project(xs, wk, g, g.key_dim);
        let v = project(xs, wv, g, g.dim);
        let p = &mut probs[n * mm..(n + 1) * mm];
        gemm(false, true, g.tokens, g.key_dim, g.tokens, T::of(g.scale()), &q, &k, T::zero(), p);
        softmax_rows(p, g.tokens);
        gemm(true, true, g.dim, g.tokens, g.tokens, T::one(), &v, p, T::zero(), &mut y[n * block..(n + 1) * block]);
    }
    (y, probs)
}

/// Gradients of [`attention_forward`]: `(dx, dwq, dwk, dwv)`.
pub fn attention_backward<T: Scalar>(
    x: &[T],
    wq: &[T],
    wk: &[T],
    wv: &[T],
    probs: &[T],
    dy: &[T],
    g: &AttnGeom,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let block = g.dim * g.tokens;
    let mm = g.tokens * g.tokens;
    let (m, c, dk) = (g.tokens, g.dim, g.key_dim);
    let mut dx = vec![T::zero(); x.len()];
    let mut dwq = vec![T::zero(); c * dk];
    let mut dwk = vec![T::zero(); c * dk];
    let mut dwv = vec![T::zero(); c * c];
    let mut dp = vec![T::zero(); mm];
    let mut dv = vec![T::zero(); m * c];
    let mut dq = vec![T::zero(); m * dk];
    let mut dkm = vec![T::zero(); m * dk];
    for n in 0..g.batch {
        let xs = &x[n * block..(n + 1) * block];
        let dys = &dy[n * block..(n + 1) * block];
        let p = &probs[n * mm..(n + 1) * mm];
        let q = project(xs, wq, g, dk);
        let k = project(xs, wk, g, dk);
        let v = project(xs, wv, g, c);
        gemm(true, true, m, c, m, T::one(), dys, &v, T::zero(), &mut dp);
        gemm(true, true, m, m, c, T::one(), p, dys, T::zero(), &mut dv);
        let scale = T::of(g.scale());
        for (prow, dprow) in p.chunks(m).zip(dp.chunks_mut(m)) {
            let mut dot = T::zero();
            for (&pv, &dv) in prow.iter().zip(dprow.iter()) {
                dot += pv * dv;
            }
            for (d, &pv) in dprow.iter_mut().zip(prow) {
                *d = pv * (*d - dot) * scale;
            }
        }
        gemm(false, false, m, m, dk, T::one(), &dp, &k, T::zero(), &mut dq);
        gemm(true, false, m, m, dk, T::one(), &dp, &q, T::zero(), &mut dkm);
        gemm(false, false, c, m, dk, T::one(), xs, &dq, T::one(), &mut dwq);
        gemm(false, false, c, m, dk, T::one(), xs, &dkm, T::one(), &mut dwk);
        gemm(false, false, c, m, c, T::one(), xs, &dv, T::one(), &mut dwv);
        let dxs = &mut dx[n * block..(n + 1) * block];
        gemm(false, true, c, dk, m, T::one(), wq, &dq, T::zero(), dxs);
        gemm(false, true, c, dk, m, T::one(), wk, &dkm, T::one(), dxs);
        gemm(false, true, c, c, m, T::one(), wv, &dv, T::one(), dxs);
    }
    (dx, dwq, dwk, dwv)
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = (g.out_height(), g.out_width());
        let mut y = vec![0.0; g.batch * g.out_ch * ho * wo];
        for n in 0..g.batch {
            for co in 0..g.out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..g.in_ch {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                        continue;
                                    }
                                    acc += w[((co * g.in_ch + ci) * g.kernel + ky) * g.kernel + kx]
                                        * x[((n * g.in_ch + ci) * g.height + iy as usize) * g.width + ix as usize];
                                }
                            }
                        }
                        y[((n * g.out_ch + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_summation() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let g = ConvGeom { batch: 2, in_ch: 3, height: 6, width: 5, out_ch: 4, kernel: k, stride, pad };
            let x: Vec<f64> = (0..2 * 3 * 30).map(|i| (i as f64 * 0.13).sin()).collect();
            let w: Vec<f64> = (0..4 * 3 * k * k).map(|i| (i as f64 * 0.71).cos()).collect();
            let b = vec![0.1, -0.2, 0.3, 0.05];
            let y = conv2d_forward(&x, &w, Some(&b), &g);
            let expect = naive_conv(&x, &w, &b, &g);
            assert_eq!(y.len(), expect.len());
            for (a, e) in y.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut a = vec![1.0f64, 2.0, 3.0, -1000.0, 0.0, 1000.0];
        softmax_rows(&mut a, 3);
        for row in a.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}
