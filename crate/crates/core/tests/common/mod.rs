//! Naive binary64 reference implementations. Deliberately written as plain
//! index loops over nested vectors so they share no code path with the
//! library kernels.

#![allow(dead_code)]

use nlroi_core::{NlRoiParams, Real, Tensor};

/// `[n][c][h][w]`
pub type Blob = Vec<Vec<Vec<Vec<f64>>>>;
pub type Mat = Vec<Vec<f64>>;

pub fn to_blob<T: Real>(t: &Tensor<T>) -> Blob {
    let s = t.shape();
    (0..s[0])
        .map(|n| {
            (0..s[1])
                .map(|c| {
                    (0..s[2])
                        .map(|h| (0..s[3]).map(|w| t.at(&[n, c, h, w]).to_f64_lossless()).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn to_mat<T: Real>(t: &Tensor<T>) -> Mat {
    let s = t.shape();
    (0..s[0])
        .map(|i| (0..s[1]).map(|j| t.at(&[i, j]).to_f64_lossless()).collect())
        .collect()
}

pub fn to_vec<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossless()).collect()
}

pub fn kernel<T: Real>(t: &Tensor<T>) -> Vec<Vec<Vec<Vec<f64>>>> {
    to_blob(t)
}

pub fn blob_to_tensor(b: &Blob) -> Tensor<f64> {
    let shape = [b.len(), b[0].len(), b[0][0].len(), b[0][0][0].len()];
    let data = b.iter().flatten().flatten().flatten().copied().collect();
    Tensor::new(shape, data).unwrap()
}

pub fn mat_to_tensor(m: &Mat) -> Tensor<f64> {
    let data = m.iter().flatten().copied().collect();
    Tensor::new([m.len(), m[0].len()], data).unwrap()
}

pub fn conv1x1_ref(x: &Blob, w: &Mat, b: Option<&[f64]>) -> Blob {
    let (n, d_in, h, wd) = (x.len(), x[0].len(), x[0][0].len(), x[0][0][0].len());
    let d_out = w.len();
    let mut out = vec![vec![vec![vec![0.0; wd]; h]; d_out]; n];
    for i in 0..n {
        for o in 0..d_out {
            for r in 0..h {
                for c in 0..wd {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for d in 0..d_in {
                        acc += w[o][d] * x[i][d][r][c];
                    }
                    out[i][o][r][c] = acc;
                }
            }
        }
    }
    out
}

pub fn conv3x3_ref(x: &Blob, w: &[Vec<Vec<Vec<f64>>>], b: Option<&[f64]>) -> Blob {
    let (n, d_in, h, wd) = (x.len(), x[0].len(), x[0][0].len(), x[0][0][0].len());
    let d_out = w.len();
    let mut out = vec![vec![vec![vec![0.0; wd]; h]; d_out]; n];
    for i in 0..n {
        for o in 0..d_out {
            for r in 0..h as isize {
                for c in 0..wd as isize {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for d in 0..d_in {
                        for dy in 0..3isize {
                            for dx in 0..3isize {
                                let (sr, sc) = (r + dy - 1, c + dx - 1);
                                if sr >= 0 && sc >= 0 && sr < h as isize && sc < wd as isize {
                                    acc += w[o][d][dy as usize][dx as usize] * x[i][d][sr as usize][sc as usize];
                                }
                            }
                        }
                    }
                    out[i][o][r as usize][c as usize] = acc;
                }
            }
        }
    }
    out
}

pub fn matmul_ref(a: &Mat, b: &Mat) -> Mat {
    let (m, k, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; m];
    for i in 0..m {
        for j in 0..p {
            for kk in 0..k {
                out[i][j] += a[i][kk] * b[kk][j];
            }
        }
    }
    out
}

pub fn softmax_ref(s: &Mat) -> Mat {
    s.iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

pub fn relu_ref(x: &Blob) -> Blob {
    x.iter()
        .map(|a| a.iter().map(|b| b.iter().map(|c| c.iter().map(|v| v.max(0.0)).collect()).collect()).collect())
        .collect()
}

/// Output of the straight-line reference block.
pub struct RefOutput {
    pub augmented: Blob,
    pub attention: Mat,
    pub g_maps: Blob,
}

/// Direct evaluation of the block:
/// `f(x_i, x_j) = exp(sum_{c,h,w} phi(x_i)[c,h,w] psi(x_j)[c,h,w])`,
/// `y_i = sum_j f(x_i, x_j) g(x_j) / sum_j f(x_i, x_j)`, then
/// `out = [x ; tile(y)]`.
pub fn nlroi_ref<T: Real>(x: &Tensor<T>, p: &NlRoiParams<T>) -> RefOutput {
    let xb = to_blob(x);
    let (n, d, h, w) = (xb.len(), xb[0].len(), xb[0][0].len(), xb[0][0][0].len());
    let phi = conv1x1_ref(&xb, &to_mat(p.w_phi()), None);
    let psi = conv1x1_ref(&xb, &to_mat(p.w_psi()), None);
    let mut logits = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for c in 0..phi[0].len() {
                for r in 0..h {
                    for col in 0..w {
                        s += phi[i][c][r][col] * psi[j][c][r][col];
                    }
                }
            }
            logits[i][j] = s;
        }
    }
    let attention = softmax_ref(&logits);
    let reduced = conv1x1_ref(&xb, &to_mat(p.g1_w()), Some(&to_vec(p.g1_b())));
    let g_maps = conv3x3_ref(&relu_ref(&reduced), &kernel(p.g2_w()), Some(&to_vec(p.g2_b())));
    let d_g = g_maps[0].len();
    let pooled: Mat = (0..n)
        .map(|j| {
            (0..d_g)
                .map(|c| g_maps[j][c].iter().flatten().sum::<f64>() / (h * w) as f64)
                .collect()
        })
        .collect();
    let mut augmented = vec![vec![vec![vec![0.0; w]; h]; d + d_g]; n];
    for i in 0..n {
        for c in 0..d {
            augmented[i][c] = xb[i][c].clone();
        }
        for c in 0..d_g {
            let y: f64 = (0..n).map(|j| attention[i][j] * pooled[j][c]).sum();
            augmented[i][d + c] = vec![vec![y; w]; h];
        }
    }
    RefOutput {
        augmented,
        attention,
        g_maps,
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

pub fn max_rel_blob<T: Real>(t: &Tensor<T>, b: &Blob) -> f64 {
    to_vec(t)
        .iter()
        .zip(b.iter().flatten().flatten().flatten())
        .map(|(&u, &v)| rel_err(u, v))
        .fold(0.0, f64::max)
}

pub fn max_rel_mat<T: Real>(t: &Tensor<T>, m: &Mat) -> f64 {
    to_vec(t)
        .iter()
        .zip(m.iter().flatten())
        .map(|(&u, &v)| rel_err(u, v))
        .fold(0.0, f64::max)
}
