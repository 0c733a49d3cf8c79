//! k-nearest-neighbor classification over cosine similarity.

use ndarray::Array2;

use crate::error::{Result, SorcenError};

fn normalized_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        row.mapv_inplace(|v| v / norm);
    }
    out
}

/// Majority vote over the `k` most cosine-similar training rows; vote ties
/// break toward the class with the larger summed similarity, then the lower
/// class id.
pub fn knn_eval(
    train_x: &Array2<f64>,
    train_y: &[u32],
    test_x: &Array2<f64>,
    test_y: &[u32],
    k: usize,
) -> Result<f64> {
    if train_x.nrows() != train_y.len() || test_x.nrows() != test_y.len() {
        return Err(SorcenError::invalid("knn: label counts do not match feature rows"));
    }
    if k == 0 || k > train_x.nrows() {
        return Err(SorcenError::invalid(format!(
            "knn: k {k} outside [1, {}]",
            train_x.nrows()
        )));
    }
    let classes = train_y.iter().copied().max().unwrap_or(0) as usize + 1;
    let tr = normalized_rows(train_x);
    let te = normalized_rows(test_x);
    let sims = te.dot(&tr.t());
    let mut hits = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(tr.nrows());
    for (i, row) in sims.rows().into_iter().enumerate() {
        order.clear();
        order.extend(0..tr.nrows());
        order.sort_unstable_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut votes = vec![0usize; classes];
        let mut sim_sums = vec![0.0f64; classes];
        for &j in order.iter().take(k) {
            let c = train_y[j] as usize;
            votes[c] += 1;
            sim_sums[c] += row[j];
        }
        let mut best = 0usize;
        for c in 1..classes {
            let better = votes[c] > votes[best]
                || (votes[c] == votes[best] && sim_sums[c] > sim_sums[best]);
            if better {
                best = c;
            }
        }
        hits += (best as u32 == test_y[i]) as usize;
    }
    Ok(hits as f64 / test_y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    #[test]
    fn nearest_neighbor_on_identical_sets_is_perfect() {
        let mut rng = Prng::seeded(1);
        let x = Array2::from_shape_fn((40, 6), |_| rng.normal());
        let y: Vec<u32> = (0..40).map(|i| (i % 4) as u32).collect();
        let acc = knn_eval(&x, &y, &x, &y, 1).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn orthogonal_one_hot_classes_are_perfect() {
        let mut x = Array2::<f64>::zeros((6, 3));
        let y = vec![0u32, 0, 1, 1, 2, 2];
        for (i, &c) in y.iter().enumerate() {
            x[(i, c as usize)] = 1.0 + 0.1 * i as f64;
        }
        let acc = knn_eval(&x, &y, &x, &y, 2).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn agrees_with_independent_all_pairs_vote() {
        let mut rng = Prng::seeded(2);
        let n = 500;
        let d = 8;
        let classes = 5u32;
        let train = Array2::from_shape_fn((n, d), |_| rng.normal());
        let train_y: Vec<u32> = (0..n).map(|_| rng.below(classes as u64) as u32).collect();
        let test = Array2::from_shape_fn((60, d), |_| rng.normal());
        let test_y: Vec<u32> = (0..60).map(|_| rng.below(classes as u64) as u32).collect();
        let k = 20;
        let fast = knn_eval(&train, &train_y, &test, &test_y, k).unwrap();

        // independent oracle: explicit normalization, exhaustive scan
        let mut hits = 0usize;
        for ti in 0..test.nrows() {
            let trow: Vec<f64> = test.row(ti).to_vec();
            let tnorm = trow.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut sims: Vec<(f64, usize)> = (0..n)
                .map(|j| {
                    let row: Vec<f64> = train.row(j).to_vec();
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = row.iter().zip(&trow).map(|(a, b)| a * b).sum();
                    (dot / (norm * tnorm), j)
                })
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; classes as usize];
            let mut sum_sim = vec![0.0; classes as usize];
            for &(s, j) in sims.iter().take(k) {
                votes[train_y[j] as usize] += 1;
                sum_sim[train_y[j] as usize] += s;
            }
            let mut best = 0usize;
            for c in 1..classes as usize {
                if votes[c] > votes[best] || (votes[c] == votes[best] && sum_sim[c] > sum_sim[best]) {
                    best = c;
                }
            }
            hits += (best as u32 == test_y[ti]) as usize;
        }
        let oracle = hits as f64 / test_y.len() as f64;
        assert_eq!(fast, oracle);
    }

    #[test]
    fn k_larger_than_train_rejected() {
        let x = Array2::<f64>::zeros((3, 2));
        let y = vec![0u32, 1, 0];
        assert!(knn_eval(&x, &y, &x, &y, 4).is_err());
    }
}
