//! Value-level kernels shared by the tape and by callers that only need
//! forward results (teacher predictions, evaluation).

use super::Tensor;
use crate::error::{CrldError, Result};

pub(crate) fn check_temperature(t: f32) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(CrldError::InvalidArgument(format!(
            "temperature must be positive, got {t}"
        )));
    }
    Ok(())
}

/// Row-wise `log softmax(z / t)` in `f64`.
pub fn log_softmax_rows(logits: &Tensor, t: f32) -> Result<Vec<f64>> {
    check_temperature(t)?;
    let (rows, cols) = logits.dims2("log_softmax")?;
    let t = t as f64;
    let mut out = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let z = logits.row(r);
        let o = &mut out[r * cols..(r + 1) * cols];
        let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let mut sum = 0.0f64;
        for (oi, &zi) in o.iter_mut().zip(z) {
            *oi = (zi as f64 - max) / t;
            sum += oi.exp();
        }
        let lse = sum.ln();
        o.iter_mut().for_each(|v| *v -= lse);
    }
    Ok(out)
}

pub(crate) fn softmax_rows_f64(logits: &Tensor, t: f32) -> Result<Vec<f64>> {
    let mut p = log_softmax_rows(logits, t)?;
    p.iter_mut().for_each(|v| *v = v.exp());
    Ok(p)
}

/// Temperature softmax over the rows of a `B×C` tensor.
pub fn softmax_t(logits: &Tensor, t: f32) -> Result<Tensor> {
    let p = softmax_rows_f64(logits, t)?;
    Tensor::new(logits.shape().to_vec(), p.iter().map(|&v| v as f32).collect())
}

/// `T² · KL(softmax_T(teacher) ‖ softmax_T(student))` for each row, unmasked.
pub fn kld_per_instance(student: &Tensor, teacher: &Tensor, t: f32) -> Result<Vec<f64>> {
    if student.shape() != teacher.shape() {
        return Err(CrldError::shape(
            "kld",
            format!("student {:?} vs teacher {:?}", student.shape(), teacher.shape()),
        ));
    }
    let (rows, cols) = student.dims2("kld")?;
    let ls = log_softmax_rows(student, t)?;
    let lt = log_softmax_rows(teacher, t)?;
    let t2 = (t as f64) * (t as f64);
    Ok((0..rows)
        .map(|r| {
            let s = &ls[r * cols..(r + 1) * cols];
            let q = &lt[r * cols..(r + 1) * cols];
            // guard rounding below zero
            let kl: f64 = q.iter().zip(s).map(|(&lq, &ls)| lq.exp() * (lq - ls)).sum();
            t2 * kl.max(0.0)
        })
        .collect())
}

/// Mean cross-entropy of `logits` against integer `labels`, in `f64`.
pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (rows, cols) = logits.dims2("cross_entropy")?;
    check_labels(labels, rows, cols)?;
    let ls = log_softmax_rows(logits, 1.0)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -ls[r * cols + y])
        .sum();
    Ok(total / rows as f64)
}

pub(crate) fn check_labels(labels: &[usize], rows: usize, cols: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(CrldError::shape(
            "cross_entropy",
            format!("{} labels for {rows} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
        return Err(CrldError::LabelOutOfRange {
            label: bad,
            num_classes: cols,
        });
    }
    Ok(())
}

/// Geometry of a 3×3, padding-1 convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, stride: usize) -> Self {
        ConvGeom {
            c,
            h,
            w,
            stride,
            oh: h.div_ceil(stride),
            ow: w.div_ceil(stride),
        }
    }

    pub fn col_rows(&self) -> usize {
        self.c * 9
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + kx − 1` lies
/// inside `0..w`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if kx == 0 { 1 } else { 0 };
    let hi = if g.w + 1 > kx {
        ((g.w + 1 - kx - 1) / g.stride + 1).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one `C×H×W` image into `(C·9) × (OH·OW)` columns.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n_out = g.col_cols();
    for kx in 0..3 {
        let (lo, hi) = valid_cols(g, kx);
        for c in 0..g.c {
            let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * n_out;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[lo + kx - 1..hi + kx - 1]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = src[ox * g.stride + kx - 1];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n_out = g.col_cols();
    for kx in 0..3 {
        let (lo, hi) = valid_cols(g, kx);
        for c in 0..g.c {
            let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * n_out;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let d = &mut dst[lo + kx - 1..hi + kx - 1];
                        d.iter_mut().zip(&src[lo..hi]).for_each(|(d, &v)| *d += v);
                    } else {
                        for (ox, &v) in src.iter().enumerate().take(hi).skip(lo) {
                            dst[ox * g.stride + kx - 1] += v;
                        }
                    }
                }
            }
        }
    }
}
