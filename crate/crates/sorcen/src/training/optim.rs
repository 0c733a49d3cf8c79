//! Decoupled-weight-decay adaptive-moment optimizer with global-norm
//! gradient clipping.
//!
//! Decay applies only to names ending in `.weight`: biases, layer-norm
//! parameters, and embedding tables are excluded.

use crate::autodiff::{ParamStore, Scalar};
use crate::error::{Result, SorcenError};

const ADAM_EPS: f64 = 1e-8;

pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Euclidean norm of all gradients in the store, accumulated in f64.
pub fn global_grad_norm<T: Scalar>(store: &ParamStore<T>) -> f64 {
    let mut sq = 0.0f64;
    for (_, p) in store.iter() {
        for g in p.grad.iter() {
            let v = g.as_f64();
            sq += v * v;
        }
    }
    sq.sqrt()
}

/// Scale every gradient by `clip / norm` when the global norm exceeds the
/// clip threshold. Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(store: &mut ParamStore<T>, clip: f64) -> f64 {
    let norm = global_grad_norm(store);
    if norm > clip {
        let factor = T::of_f64(clip / norm);
        for (_, p) in store.iter_mut() {
            p.grad.mapv_inplace(|g| g * factor);
        }
    }
    norm
}

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl AdamW {
    /// One update over every parameter in `params`, reading gradients from
    /// the store's grad buffers and moments from `m` / `v` (same names).
    /// `t` is the 1-based step count for bias correction.
    pub fn step<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        m: &mut ParamStore<T>,
        v: &mut ParamStore<T>,
        lr: f64,
        t: u64,
    ) -> Result<()> {
        let b1 = T::of_f64(self.beta1);
        let b2 = T::of_f64(self.beta2);
        let one_minus_b1 = T::of_f64(1.0 - self.beta1);
        let one_minus_b2 = T::of_f64(1.0 - self.beta2);
        let corr1 = T::of_f64(1.0 / (1.0 - self.beta1.powi(t as i32)));
        let corr2 = T::of_f64(1.0 / (1.0 - self.beta2.powi(t as i32)));
        let eps = T::of_f64(ADAM_EPS);
        let lr_t = T::of_f64(lr);

        for (name, p) in params.iter_mut() {
            let decay = if decays(name) { T::of_f64(self.weight_decay) } else { T::zero() };
            let pm = m
                .get_mut(name)
                .ok_or_else(|| SorcenError::invalid(format!("missing first moment for {name:?}")))?;
            let pv = v
                .get_mut(name)
                .ok_or_else(|| SorcenError::invalid(format!("missing second moment for {name:?}")))?;
            let values = p.values.as_slice_mut().unwrap();
            let grads = p.grad.as_slice().unwrap();
            let ms = pm.values.as_slice_mut().unwrap();
            let vs = pv.values.as_slice_mut().unwrap();
            for i in 0..values.len() {
                let g = grads[i];
                ms[i] = b1 * ms[i] + one_minus_b1 * g;
                vs[i] = b2 * vs[i] + one_minus_b2 * g * g;
                let mhat = ms[i] * corr1;
                let vhat = vs[i] * corr2;
                values[i] = values[i] - lr_t * (mhat / (vhat.sqrt() + eps) + decay * values[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn store_with(name: &str, values: Vec<f64>, grads: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let n = values.len();
        s.insert(name, ArrayD::from_shape_vec(ndarray::IxDyn(&[n]), values).unwrap()).unwrap();
        s.get_mut(name).unwrap().grad =
            ArrayD::from_shape_vec(ndarray::IxDyn(&[n]), grads).unwrap();
        s
    }

    #[test]
    fn decay_rule_by_suffix() {
        assert!(decays("enc.blk0.attn.q.weight"));
        assert!(!decays("enc.blk0.attn.q.bias"));
        assert!(!decays("enc.blk0.ln1.scale"));
        assert!(!decays("enc.tok_emb"));
        assert!(!decays("dec.pos_emb"));
    }

    #[test]
    fn clipping_rescales_to_threshold() {
        let mut s = store_with("w.weight", vec![0.0; 2], vec![3.0, 4.0]);
        let pre = clip_global_norm(&mut s, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let post = global_grad_norm(&s);
        assert!((post - 1.0).abs() < 1e-12);
        // under the threshold nothing changes
        let mut s2 = store_with("w.weight", vec![0.0; 2], vec![0.3, 0.4]);
        let pre2 = clip_global_norm(&mut s2, 1.0);
        assert!((pre2 - 0.5).abs() < 1e-12);
        assert_eq!(s2.get("w.weight").unwrap().grad.as_slice().unwrap(), &[0.3, 0.4]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // single parameter, g = 1: mhat = 1, vhat = 1 -> update = lr * (1/(1+eps) + wd*p)
        let mut p = store_with("w.weight", vec![1.0], vec![1.0]);
        let mut m = store_with("w.weight", vec![0.0], vec![0.0]);
        let mut v = store_with("w.weight", vec![0.0], vec![0.0]);
        let opt = AdamW { beta1: 0.9, beta2: 0.95, weight_decay: 0.05 };
        opt.step(&mut p, &mut m, &mut v, 0.1, 1).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + ADAM_EPS) + 0.05 * 1.0);
        let got = p.get("w.weight").unwrap().values[[0]];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn bias_receives_no_decay() {
        // zero gradient: the only possible change would come from decay
        let mut p = store_with("w.bias", vec![1.0], vec![0.0]);
        let mut m = store_with("w.bias", vec![0.0], vec![0.0]);
        let mut v = store_with("w.bias", vec![0.0], vec![0.0]);
        let opt = AdamW { beta1: 0.9, beta2: 0.95, weight_decay: 0.5 };
        opt.step(&mut p, &mut m, &mut v, 0.1, 1).unwrap();
        assert_eq!(p.get("w.bias").unwrap().values[[0]], 1.0);
    }
}
