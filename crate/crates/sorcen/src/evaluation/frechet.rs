//! Token-space Fréchet distance between Gaussian feature summaries:
//! `|mu_r - mu_g|^2 + tr(S_r + S_g - 2 (S_r S_g)^{1/2})`.
//!
//! The matrix square root goes through symmetric eigendecomposition
//! (cyclic Jacobi) with negative eigenvalues clamped at zero;
//! `tr((S_r S_g)^{1/2})` is computed as `tr((A S_g A)^{1/2})` with
//! `A = S_r^{1/2}`, which keeps every decomposition symmetric.

use ndarray::Array2;

use crate::error::{Result, SorcenError};

const PSD_TOL: f64 = 1e-6;

/// Eigenvalues and eigenvectors of a symmetric matrix by cyclic Jacobi
/// rotations. Returns `(eigenvalues, V)` with `A = V diag(l) V^T`; the
/// eigenvalues are unsorted.
pub fn symmetric_eigenvalues(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(SorcenError::invalid("eigendecomposition needs a square matrix"));
    }
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let off = |m: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)] * m[(i, j)];
                }
            }
        }
        s.sqrt()
    };
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        if off(&m) <= 1e-13 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m[(i, p)];
                    let miq = m[(i, q)];
                    m[(i, p)] = c * mip - s * miq;
                    m[(i, q)] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[(p, j)];
                    let mqj = m[(q, j)];
                    m[(p, j)] = c * mpj - s * mqj;
                    m[(q, j)] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
    }
    let eigs: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    Ok((eigs, v))
}

fn mean_and_cov(x: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
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
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in x.rows() {
        for i in 0..d {
            let ci = row[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += ci * (row[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1).max(1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[(i, j)] /= denom;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    (mean, cov)
}

/// Clamp tiny negative eigenvalues to zero; anything more negative than
/// the tolerance (relative to the largest magnitude) is a real failure.
fn clamped_sqrt_eigs(eigs: &[f64], context: &str) -> Result<Vec<f64>> {
    let scale = eigs.iter().map(|e| e.abs()).fold(0.0f64, f64::max).max(1.0);
    let mut out = Vec::with_capacity(eigs.len());
    for &e in eigs {
        if e < -PSD_TOL * scale {
            return Err(SorcenError::invalid(format!(
                "{context}: eigenvalue {e} below the PSD clamping tolerance"
            )));
        }
        out.push(e.max(0.0).sqrt());
    }
    Ok(out)
}

/// Fréchet distance between the Gaussian summaries of two feature sets.
/// Both sets need at least `2 * dim` samples for usable covariance
/// estimates.
pub fn token_frechet_distance(real: &Array2<f64>, generated: &Array2<f64>) -> Result<f64> {
    let d = real.ncols();
    if generated.ncols() != d {
        return Err(SorcenError::ShapeMismatch {
            op: "token_frechet_distance",
            lhs: real.shape().to_vec(),
            rhs: generated.shape().to_vec(),
        });
    }
    for (name, x) in [("real", real), ("generated", generated)] {
        if x.nrows() < 2 * d {
            return Err(SorcenError::invalid(format!(
                "{name} set has {} samples, fewer than 2 x {d} feature dims",
                x.nrows()
            )));
        }
    }
    let (mu_r, cov_r) = mean_and_cov(real);
    let (mu_g, cov_g) = mean_and_cov(generated);

    let mean_term: f64 = mu_r.iter().zip(&mu_g).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr_r: f64 = (0..d).map(|i| cov_r[(i, i)]).sum();
    let tr_g: f64 = (0..d).map(|i| cov_g[(i, i)]).sum();

    // A = cov_r^{1/2}
    let (eigs_r, v_r) = symmetric_eigenvalues(&cov_r)?;
    let sqrt_r = clamped_sqrt_eigs(&eigs_r, "real covariance")?;
    let mut a = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += v_r[(i, k)] * sqrt_r[k] * v_r[(j, k)];
            }
            a[(i, j)] = acc;
        }
    }
    // M = A cov_g A, symmetric PSD up to rounding
    let m = a.dot(&cov_g).dot(&a);
    let m = (&m + &m.t()) * 0.5;
    let (eigs_m, _) = symmetric_eigenvalues(&m)?;
    let sqrt_m = clamped_sqrt_eigs(&eigs_m, "cross covariance")?;
    let tr_cross: f64 = sqrt_m.iter().sum();

    Ok(mean_term + tr_r + tr_g - 2.0 * tr_cross)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = Prng::seeded(seed);
        Array2::from_shape_fn((n, d), |_| rng.normal())
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // diag(1, 4, 9) conjugated by a rotation
        let mut a = Array2::<f64>::zeros((3, 3));
        a[(0, 0)] = 2.5;
        a[(0, 1)] = 1.5;
        a[(1, 0)] = 1.5;
        a[(1, 1)] = 2.5;
        a[(2, 2)] = 9.0;
        let (mut eigs, v) = symmetric_eigenvalues(&a).unwrap();
        eigs.sort_by(f64::total_cmp);
        assert!((eigs[0] - 1.0).abs() < 1e-10);
        assert!((eigs[1] - 4.0).abs() < 1e-10);
        assert!((eigs[2] - 9.0).abs() < 1e-10);
        // V reconstructs A
        let (eigs, _) = symmetric_eigenvalues(&a).unwrap();
        let mut recon = Array2::<f64>::zeros((3, 3));
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    recon[(i, j)] += v[(i, k)] * eigs[k] * v[(j, k)];
                }
            }
        }
        for (x, y) in recon.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_sets_score_zero() {
        let x = gaussian(64, 4, 1);
        let d = token_frechet_distance(&x, &x).unwrap();
        assert!(d.abs() < 1e-6, "distance {d}");
    }

    #[test]
    fn unit_gaussians_one_apart_score_one() {
        // identical samples shifted by exactly 1 in one coordinate: the
        // covariances agree exactly, so only the mean term remains
        let x = gaussian(4000, 1, 2);
        let mut y = x.clone();
        for v in y.column_mut(0).iter_mut() {
            *v += 1.0;
        }
        let d = token_frechet_distance(&x, &y).unwrap();
        assert!((d - 1.0).abs() < 1e-9, "distance {d}");
    }

    #[test]
    fn distance_is_symmetric() {
        let x = gaussian(128, 5, 3);
        let mut rng = Prng::seeded(4);
        let y = Array2::from_shape_fn((150, 5), |_| 0.5 + 1.3 * rng.normal());
        let ab = token_frechet_distance(&x, &y).unwrap();
        let ba = token_frechet_distance(&y, &x).unwrap();
        assert!((ab - ba).abs() < 1e-6, "{ab} vs {ba}");
        assert!(ab > 0.0);
    }

    #[test]
    fn too_few_samples_rejected() {
        let x = gaussian(7, 4, 5);
        let y = gaussian(64, 4, 6);
        assert!(token_frechet_distance(&x, &y).is_err());
    }
}
