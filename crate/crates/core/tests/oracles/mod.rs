//! Independent reference implementations used to check the library.
//! Everything here is written with plain loops over `f64`.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squash(v: &[f64]) -> Vec<f64> {
    let n2 = dot(v, v);
    if n2 == 0.0 {
        return vec![0.0; v.len()];
    }
    let scale = n2 / (1.0 + n2) / n2.sqrt();
    v.iter().map(|x| x * scale).collect()
}

/// `û[i][j] = W[i][j] · u[i]` with `W[i][j]` stored as `f2` rows of `f1`.
pub fn pose(u: &[Vec<f64>], w: &[Vec<Vec<Vec<f64>>>]) -> Vec<Vec<Vec<f64>>> {
    u.iter()
        .zip(w)
        .map(|(ui, wi)| wi.iter().map(|wij| wij.iter().map(|row| dot(row, ui)).collect()).collect())
        .collect()
}

pub struct RoutingTrace {
    /// Final class capsules `[K][f2]`.
    pub v: Vec<Vec<f64>>,
    /// Coefficients `[n][K]` of every iteration.
    pub coefficients: Vec<Vec<Vec<f64>>>,
}

/// Straight-line routing by agreement on predictions `[n][K][f2]`, softmax
/// over outputs, optional gate `relu(c + bias)`.
pub fn routing(u_hat: &[Vec<Vec<f64>>], iterations: usize, gate: Option<f64>) -> RoutingTrace {
    let n = u_hat.len();
    let k = u_hat[0].len();
    let f2 = u_hat[0][0].len();
    let mut b = vec![vec![0.0; k]; n];
    let mut trace = Vec::new();
    let mut v = vec![vec![0.0; f2]; k];
    for _ in 0..iterations {
        let mut c = vec![vec![0.0; k]; n];
        for i in 0..n {
            let m = b[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = b[i].iter().map(|x| (x - m).exp()).sum();
            for j in 0..k {
                c[i][j] = (b[i][j] - m).exp() / z;
                if let Some(g) = gate {
                    c[i][j] = (c[i][j] + g).max(0.0);
                }
            }
        }
        for j in 0..k {
            let mut s = vec![0.0; f2];
            for i in 0..n {
                for t in 0..f2 {
                    s[t] += c[i][j] * u_hat[i][j][t];
                }
            }
            v[j] = squash(&s);
        }
        for i in 0..n {
            for j in 0..k {
                b[i][j] += dot(&u_hat[i][j], &v[j]);
            }
        }
        trace.push(c);
    }
    RoutingTrace { v, coefficients: trace }
}

pub fn kl_closed_form(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..mu1.len() {
        total += 0.5 * (var2[i] / var1[i]).ln() + (var1[i] + (mu1[i] - mu2[i]).powi(2)) / (2.0 * var2[i]) - 0.5;
    }
    total
}

fn log_normal(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mu).powi(2) / var)
}

/// `E_{x ~ p}[log p(x) - log q(x)]` from `samples` draws.
pub fn kl_monte_carlo(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut acc = 0.0;
    for _ in 0..samples {
        let mut term = 0.0;
        for i in 0..mu1.len() {
            let e: f64 = rng.sample(StandardNormal);
            let x = mu1[i] + var1[i].sqrt() * e;
            term += log_normal(x, mu1[i], var1[i]) - log_normal(x, mu2[i], var2[i]);
        }
        acc += term;
    }
    acc / samples as f64
}

/// `(1/K) Σ_k KL(C_k ‖ T_k)` over `[K][d]` arrays.
pub fn capsule_distance(c_mu: &[Vec<f64>], c_var: &[Vec<f64>], t_mu: &[Vec<f64>], t_var: &[Vec<f64>]) -> f64 {
    let k = c_mu.len();
    (0..k)
        .map(|s| kl_closed_form(&c_mu[s], &c_var[s], &t_mu[s], &t_var[s]))
        .sum::<f64>()
        / k as f64
}

/// AUROC by counting every (known, unknown) pair, ties worth one half.
pub fn auroc_pairs(known: &[f64], unknown: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in known {
        for &b in unknown {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (known.len() * unknown.len()) as f64
}

/// Per-class F1 from precision and recall, zero when both vanish.
pub fn f1_per_class(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Vec<f64> {
    (0..n_classes)
        .map(|c| {
            let tp = y_true.iter().zip(y_pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
            let pred = y_pred.iter().filter(|p| **p == c).count() as f64;
            let actual = y_true.iter().filter(|t| **t == c).count() as f64;
            let precision = if pred > 0.0 { tp / pred } else { 0.0 };
            let recall = if actual > 0.0 { tp / actual } else { 0.0 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect()
}

/// Textbook mean and unbiased variance per coordinate.
pub fn mean_variance(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let var = (0..d)
        .map(|j| rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    (mean, var)
}

/// Central difference `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
