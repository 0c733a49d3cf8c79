//! Linear probing: full-batch multinomial logistic regression driven to
//! convergence with L-BFGS, plus the few-shot wrapper.
//!
//! Features are standardized with train-set statistics and given a bias
//! column; a tiny ridge term makes the optimum unique.

use ndarray::Array2;

use crate::error::{Result, SorcenError};
use crate::rng::Prng;

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    /// Stop when the gradient norm falls below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Ridge strength on non-bias weights.
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { tol: 1e-8, max_iters: 5000, l2: 1e-6 }
    }
}

struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &Array2<f64>) -> Self {
        let (n, d) = x.dim();
        let mut mean = vec![0.0; d];
        for row in x.rows() {
            for j in 0..d {
                mean[j] += row[j];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for row in x.rows() {
            for j in 0..d {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        let inv_std = var
            .iter()
            .map(|v| {
                let sd = (v / n as f64).sqrt();
                if sd < 1e-12 {
                    0.0
                } else {
                    1.0 / sd
                }
            })
            .collect();
        Standardizer { mean, inv_std }
    }

    /// Standardize and append a bias column.
    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let (n, d) = x.dim();
        let mut out = Array2::<f64>::zeros((n, d + 1));
        for i in 0..n {
            for j in 0..d {
                out[(i, j)] = (x[(i, j)] - self.mean[j]) * self.inv_std[j];
            }
            out[(i, d)] = 1.0;
        }
        out
    }
}

/// Mean cross-entropy and its gradient for weights `w` (class-major,
/// `classes x dim` flattened). The bias column (last input dim) is exempt
/// from the ridge.
fn objective(
    w: &[f64],
    x: &Array2<f64>,
    labels: &[u32],
    classes: usize,
    l2: f64,
) -> (f64, Vec<f64>) {
    let (n, dim) = x.dim();
    let mut grad = vec![0.0; classes * dim];
    let mut loss = 0.0f64;
    let mut logits = vec![0.0f64; classes];
    for (i, row) in x.rows().into_iter().enumerate() {
        let row = row.as_slice().unwrap();
        for (c, l) in logits.iter_mut().enumerate() {
            let wc = &w[c * dim..(c + 1) * dim];
            *l = wc.iter().zip(row).map(|(a, b)| a * b).sum();
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let target = labels[i] as usize;
        loss += lse - logits[target];
        for c in 0..classes {
            let p = (logits[c] - lse).exp();
            let coeff = p - (c == target) as usize as f64;
            let gc = &mut grad[c * dim..(c + 1) * dim];
            for (g, &v) in gc.iter_mut().zip(row) {
                *g += coeff * v;
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    loss *= inv_n;
    for g in grad.iter_mut() {
        *g *= inv_n;
    }
    if l2 > 0.0 {
        for c in 0..classes {
            for j in 0..dim - 1 {
                let wi = w[c * dim + j];
                loss += 0.5 * l2 * wi * wi;
                grad[c * dim + j] += l2 * wi;
            }
        }
    }
    (loss, grad)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize with L-BFGS (two-loop recursion, Armijo backtracking).
fn minimize(
    x: &Array2<f64>,
    labels: &[u32],
    classes: usize,
    cfg: &ProbeConfig,
) -> Vec<f64> {
    let dim = x.ncols();
    let mut w = vec![0.0f64; classes * dim];
    let (mut f, mut g) = objective(&w, x, labels, classes, cfg.l2);
    let memory = 8usize;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    for _ in 0..cfg.max_iters {
        let gnorm = norm(&g);
        if gnorm < cfg.tol {
            break;
        }
        // two-loop recursion for the search direction
        let mut q = g.clone();
        let mut alphas = vec![0.0; s_hist.len()];
        for i in (0..s_hist.len()).rev() {
            let a = rho_hist[i] * dot(&s_hist[i], &q);
            alphas[i] = a;
            for (qv, yv) in q.iter_mut().zip(&y_hist[i]) {
                *qv -= a * yv;
            }
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y).max(1e-300);
            for qv in q.iter_mut() {
                *qv *= gamma;
            }
        }
        for i in 0..s_hist.len() {
            let beta = rho_hist[i] * dot(&y_hist[i], &q);
            for (qv, sv) in q.iter_mut().zip(&s_hist[i]) {
                *qv += (alphas[i] - beta) * sv;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            // fall back to steepest descent
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }

        // Armijo backtracking
        let mut step = if s_hist.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = w.iter().zip(&dir).map(|(wv, dv)| wv + step * dv).collect();
            let (tf, tg) = objective(&trial, x, labels, classes, cfg.l2);
            if tf <= f + 1e-4 * step * slope {
                let s: Vec<f64> = trial.iter().zip(&w).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = tg.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 {
                    if s_hist.len() == memory {
                        s_hist.remove(0);
                        y_hist.remove(0);
                        rho_hist.remove(0);
                    }
                    rho_hist.push(1.0 / sy);
                    s_hist.push(s);
                    y_hist.push(y);
                }
                w = trial;
                f = tf;
                g = tg;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    w
}

fn predict(w: &[f64], x: &Array2<f64>, classes: usize) -> Vec<u32> {
    let dim = x.ncols();
    x.rows()
        .into_iter()
        .map(|row| {
            let row = row.as_slice().unwrap();
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..classes {
                let v = dot(&w[c * dim..(c + 1) * dim], row);
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

fn accuracy(pred: &[u32], truth: &[u32]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

fn class_count(labels: &[u32]) -> usize {
    labels.iter().copied().max().map(|m| m as usize + 1).unwrap_or(0)
}

/// Train a multinomial logistic probe on frozen train features and report
/// top-1 accuracy on the test set.
pub fn linear_probe(
    train_x: &Array2<f64>,
    train_y: &[u32],
    test_x: &Array2<f64>,
    test_y: &[u32],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train_x.nrows() != train_y.len() || test_x.nrows() != test_y.len() {
        return Err(SorcenError::invalid("probe: label counts do not match feature rows"));
    }
    if train_x.nrows() == 0 || test_x.nrows() == 0 {
        return Err(SorcenError::invalid("probe: empty feature set"));
    }
    let classes = class_count(train_y).max(class_count(test_y));
    if classes < 2 {
        return Err(SorcenError::invalid("probe: need at least 2 classes"));
    }
    let std = Standardizer::fit(train_x);
    let xtr = std.apply(train_x);
    let xte = std.apply(test_x);
    let w = minimize(&xtr, train_y, classes, cfg);
    Ok(accuracy(&predict(&w, &xte, classes), test_y))
}

/// Mean probe accuracy over per-seed balanced subsamples of `shots`
/// examples per class.
pub fn few_shot_eval(
    train_x: &Array2<f64>,
    train_y: &[u32],
    test_x: &Array2<f64>,
    test_y: &[u32],
    shots: usize,
    seeds: &[u64],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if seeds.is_empty() {
        return Err(SorcenError::invalid("few_shot_eval: need at least one seed"));
    }
    let classes = class_count(train_y);
    if classes < 2 {
        return Err(SorcenError::invalid("few_shot_eval: need at least 2 classes"));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in train_y.iter().enumerate() {
        per_class[c as usize].push(i);
    }
    for (c, rows) in per_class.iter().enumerate() {
        if rows.len() < shots {
            return Err(SorcenError::invalid(format!(
                "few_shot_eval: class {c} has {} samples, fewer than {shots} shots",
                rows.len()
            )));
        }
    }
    let mut total = 0.0;
    for &seed in seeds {
        let mut rng = Prng::seeded(seed).split(0x5_07);
        let mut keep: Vec<usize> = Vec::with_capacity(shots * classes);
        for rows in &per_class {
            let chosen = rng.sample_indices(rows.len(), shots);
            keep.extend(chosen.into_iter().map(|j| rows[j]));
        }
        keep.sort_unstable();
        let sub_x = Array2::from_shape_fn((keep.len(), train_x.ncols()), |(i, j)| {
            train_x[(keep[i], j)]
        });
        let sub_y: Vec<u32> = keep.iter().map(|&i| train_y[i]).collect();
        total += linear_probe(&sub_x, &sub_y, test_x, test_y, cfg)?;
    }
    Ok(total / seeds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_blobs(
        n_per: usize,
        centers: &[(f64, f64)],
        spread: f64,
        seed: u64,
    ) -> (Array2<f64>, Vec<u32>) {
        let mut rng = Prng::seeded(seed);
        let n = n_per * centers.len();
        let mut x = Array2::<f64>::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        for (c, &(cx, cy)) in centers.iter().enumerate() {
            for i in 0..n_per {
                let row = c * n_per + i;
                x[(row, 0)] = cx + spread * rng.normal();
                x[(row, 1)] = cy + spread * rng.normal();
                y.push(c as u32);
            }
        }
        (x, y)
    }

    #[test]
    fn separable_blobs_probe_cleanly() {
        let (xtr, ytr) = gaussian_blobs(100, &[(-4.0, 0.0), (4.0, 0.0)], 0.3, 1);
        let (xte, yte) = gaussian_blobs(50, &[(-4.0, 0.0), (4.0, 0.0)], 0.3, 2);
        let acc = linear_probe(&xtr, &ytr, &xte, &yte, &ProbeConfig::default()).unwrap();
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn shuffled_labels_on_structureless_features_probe_at_chance() {
        // features carry no label information at all, so the fitted probe
        // cannot beat chance on an independent test set
        let mut rng = Prng::seeded(5);
        let classes = 4u32;
        let d = 8;
        let xtr = Array2::from_shape_fn((800, d), |_| rng.normal());
        let mut ytr: Vec<u32> = (0..800).map(|i| (i % classes as usize) as u32).collect();
        rng.shuffle(&mut ytr);
        let xte = Array2::from_shape_fn((800, d), |_| rng.normal());
        let yte: Vec<u32> = (0..800).map(|i| (i % classes as usize) as u32).collect();
        let acc = linear_probe(&xtr, &ytr, &xte, &yte, &ProbeConfig::default()).unwrap();
        let n = yte.len() as f64;
        let p = 1.0 / classes as f64;
        let sd = (p * (1.0 - p) / n).sqrt();
        assert!((acc - p).abs() < 4.0 * sd, "accuracy {acc} not near chance {p}");
    }

    #[test]
    fn train_accuracy_bounds_test_accuracy_on_identical_split() {
        let (x, y) = gaussian_blobs(80, &[(-1.0, 0.0), (1.0, 0.0)], 0.8, 6);
        let cfg = ProbeConfig::default();
        let train_acc = linear_probe(&x, &y, &x, &y, &cfg).unwrap();
        let test_acc = linear_probe(&x, &y, &x, &y, &cfg).unwrap();
        assert!(train_acc >= test_acc - 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        let x = Array2::<f64>::zeros((4, 2));
        let y = vec![0u32; 4];
        assert!(linear_probe(&x, &y, &x, &y, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn few_shot_with_every_sample_equals_full_probe() {
        let (xtr, ytr) = gaussian_blobs(30, &[(-3.0, 0.0), (3.0, 0.0)], 0.5, 7);
        let (xte, yte) = gaussian_blobs(40, &[(-3.0, 0.0), (3.0, 0.0)], 0.5, 8);
        let cfg = ProbeConfig::default();
        let full = linear_probe(&xtr, &ytr, &xte, &yte, &cfg).unwrap();
        let few = few_shot_eval(&xtr, &ytr, &xte, &yte, 30, &[1, 2], &cfg).unwrap();
        assert!((full - few).abs() < 1e-12);
    }

    #[test]
    fn few_shot_insufficient_samples_rejected() {
        let (xtr, ytr) = gaussian_blobs(3, &[(-3.0, 0.0), (3.0, 0.0)], 0.5, 9);
        let err = few_shot_eval(&xtr, &ytr, &xtr, &ytr, 10, &[1], &ProbeConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn one_shot_on_exact_prototypes_is_perfect() {
        // one training example per class, test points identical to them
        let x = Array2::from_shape_vec((3, 2), vec![0.0, 0.0, 10.0, 0.0, 0.0, 10.0]).unwrap();
        let y = vec![0u32, 1, 2];
        let acc = few_shot_eval(&x, &y, &x, &y, 1, &[4], &ProbeConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
    }
}
