//! Dense-tensor computation substrate with reverse-mode differentiation.

mod check;
mod graph;
mod scalar;
mod store;

pub use check::grad_check;
pub use graph::{Graph, Tensor};
pub use scalar::{Dtype, Scalar};
pub use store::{Param, ParamStore};

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    use crate::rng::Prng;

    fn arr(shape: &[usize], data: Vec<f64>) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(arr(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = g.constant(arr(&[3, 3], (0..9).map(|v| v as f64 * 0.3 - 1.1).collect()));
        let out = g.matmul(eye, a).unwrap();
        assert_eq!(g.values(out), g.values(a));
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(ArrayD::zeros(IxDyn(&[2, 3])));
        let b = g.constant(ArrayD::zeros(IxDyn(&[4, 2])));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(arr(&[1, 3], vec![0.0; 3]));
        let y = g.softmax(x);
        for v in g.values(y).iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Prng::seeded(11);
        let mut g = Graph::<f64>::new();
        let x = g.constant(arr(&[8, 5], (0..40).map(|_| rng.normal() * 3.0).collect()));
        let y = g.softmax(x);
        let v = g.values(y);
        for row in v.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn layernorm_constant_row_unit_scale_zero_shift_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(arr(&[1, 4], vec![2.5; 4]));
        let gamma = g.constant(arr(&[4], vec![1.0; 4]));
        let beta = g.constant(arr(&[4], vec![0.0; 4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for v in g.values(y).iter() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn l2_normalize_unit_norm() {
        let mut rng = Prng::seeded(5);
        let mut g = Graph::<f64>::new();
        let x = g.constant(arr(&[6, 7], (0..42).map(|_| rng.normal()).collect()));
        let y = g.l2_normalize(x);
        for row in g.values(y).rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-10, "norm {n}");
        }
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = Prng::seeded(3);
        let mut g = Graph::<f64>::new();
        let x = g.constant(arr(&[2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let y = g.dropout(x, 0.0, &mut rng);
        assert_eq!(x, y);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr(&[2, 3], vec![0.5; 6]), true);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        for v in g.grad(x).unwrap().iter() {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn backward_of_square_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr(&[1], vec![3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap()[[0]], 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr(&[2], vec![1.0, 2.0]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unreached_parameter_grad_stays_zero() {
        let mut store = ParamStore::<f64>::new();
        store.insert("used", arr(&[2], vec![1.0, 2.0])).unwrap();
        store.insert("unused", arr(&[2], vec![3.0, 4.0])).unwrap();
        let mut g = Graph::<f64>::new();
        let u = g.param(&store, "used").unwrap();
        let _dangling = g.param(&store, "unused").unwrap();
        let sq = g.mul(u, u).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        g.export_grads(&mut store).unwrap();
        assert_eq!(store.get("used").unwrap().grad.as_slice().unwrap(), &[2.0, 4.0]);
        assert_eq!(store.get("unused").unwrap().grad.as_slice().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let mut rng = Prng::seeded(7);
        let point = arr(&[5], (0..5).map(|_| rng.normal()).collect());
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum_all(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "max rel err {err}");
    }

    #[test]
    fn grad_check_log_softmax_cross_entropy() {
        let mut rng = Prng::seeded(13);
        let point = arr(&[4, 6], (0..24).map(|_| rng.normal() * 2.0).collect());
        let err = grad_check(
            |g, x| {
                let logp = g.log_softmax(x);
                g.nll_picked(logp, &[1, 0, 5, 3], &[0.25; 4])
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn grad_check_constant_function_is_exact() {
        let point = arr(&[3], vec![0.4, -0.2, 1.7]);
        let err = grad_check(
            |g, x| {
                let zero = g.scale(x, 0.0);
                Ok(g.sum_all(zero))
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_two_layer_mlp() {
        let mut rng = Prng::seeded(21);
        let w1: Vec<f64> = (0..12).map(|_| rng.normal() * 0.5).collect();
        let w2: Vec<f64> = (0..4).map(|_| rng.normal() * 0.5).collect();
        let point = arr(&[2, 3], (0..6).map(|_| rng.normal()).collect());
        let err = grad_check(
            |g, x| {
                let w1 = g.constant(arr(&[3, 4], w1.clone()));
                let w2 = g.constant(arr(&[4, 1], w2.clone()));
                let h = g.matmul(x, w1)?;
                let h = g.gelu(h);
                let o = g.matmul(h, w2)?;
                Ok(g.sum_all(o))
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }
}
