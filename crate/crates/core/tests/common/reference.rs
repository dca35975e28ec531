//! Naive `f64` forward passes used as finite-difference oracles.

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

pub fn add_bias(x: &[f64], b: &[f64]) -> Vec<f64> {
    x.chunks(b.len())
        .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
        .collect()
}

/// 3×3 convolution, zero padding 1; returns output and its spatial size.
pub fn conv2d(
    x: &[f64],
    w: &[f64],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + stride - 1) / stride;
    let ow = (wd + stride - 1) / stride;
    let mut out = vec![0.0; n * k * oh * ow];
    for i in 0..n {
        for o in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                let ix = (ox * stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((i * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w[((o * c + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out[((i * k + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Batch-statistics normalisation over `(N, S)` for each of `c` channels.
pub fn batchnorm_train(x: &[f64], gamma: &[f64], beta: &[f64], n: usize, c: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|i| x[(i * c + ch) * s..(i * c + ch + 1) * s].to_vec())
            .collect();
        let m = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for i in 0..n {
            for j in 0..s {
                let idx = (i * c + ch) * s + j;
                out[idx] = gamma[ch] * (x[idx] - mean) * inv + beta[ch];
            }
        }
    }
    out
}

pub fn batchnorm_eval(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    n: usize,
    c: usize,
    s: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + 1e-5).sqrt();
            for j in 0..s {
                let idx = (i * c + ch) * s + j;
                out[idx] = gamma[ch] * (x[idx] - mean[ch]) * inv + beta[ch];
            }
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn avg_pool(x: &[f64], hw: usize) -> Vec<f64> {
    x.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect()
}

pub fn softmax_rows(z: &[f64], cols: usize, t: f64) -> Vec<f64> {
    z.chunks(cols)
        .flat_map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| ((v - max) / t).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

pub fn cross_entropy(z: &[f64], cols: usize, labels: &[usize]) -> f64 {
    let p = softmax_rows(z, cols, 1.0);
    let b = labels.len();
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -p[r * cols + y].ln())
        .sum::<f64>()
        / b as f64
}

/// `Σ_b m_b T² KL(p_teacher ‖ p_student) / B`.
pub fn kld(student: &[f64], teacher: &[f64], cols: usize, t: f64, mask: &[f64]) -> f64 {
    let ps = softmax_rows(student, cols, t);
    let pt = softmax_rows(teacher, cols, t);
    let b = mask.len();
    let mut total = 0.0;
    for r in 0..b {
        let kl: f64 = (0..cols)
            .map(|c| {
                let q = pt[r * cols + c];
                if q == 0.0 { 0.0 } else { q * (q / ps[r * cols + c]).ln() }
            })
            .sum();
        total += mask[r] * t * t * kl;
    }
    total / b as f64
}

pub fn masked_mse(x: &[f64], target: &[f64], dim: usize, mask: &[f64]) -> f64 {
    let b = mask.len();
    (0..b)
        .map(|r| {
            let se: f64 = (0..dim).map(|j| (x[r * dim + j] - target[r * dim + j]).powi(2)).sum();
            mask[r] * se / dim as f64
        })
        .sum::<f64>()
        / b as f64
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
