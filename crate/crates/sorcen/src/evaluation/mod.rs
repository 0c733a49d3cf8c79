//! Discriminative and generative evaluation over frozen features.
//!
//! Inference uses the student encoder only: full unmasked sequences (extra
//! token prepended) are encoded and globally average-pooled. The teacher,
//! projector, and predictor play no part here.

mod cache;
mod frechet;
mod knn;
mod probe;

pub use cache::{feature_cache_key, load_cached_features, store_cached_features};
pub use frechet::{symmetric_eigenvalues, token_frechet_distance};
pub use knn::knn_eval;
pub use probe::{few_shot_eval, linear_probe, ProbeConfig};

use ndarray::Array2;

use crate::autodiff::{Graph, Scalar};
use crate::data::TokenSequence;
use crate::error::{Result, SorcenError};
use crate::model::{full_position_ids, with_extra_token, Branch, Model};
use crate::rng::Prng;

/// Pooled per-sample features plus labels.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    /// `n x d`, finite.
    pub features: Array2<f64>,
    /// One label per row; empty for unlabeled data.
    pub labels: Vec<u32>,
}

impl FeatureMatrix {
    pub fn validate(&self, class_count: u32) -> Result<()> {
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(SorcenError::NonFinite { context: "feature matrix".into(), coordinate: None });
        }
        if !self.labels.is_empty() {
            if self.labels.len() != self.features.nrows() {
                return Err(SorcenError::invalid("label count does not match feature rows"));
            }
            if let Some(&bad) = self.labels.iter().find(|&&l| l >= class_count) {
                return Err(SorcenError::invalid(format!(
                    "label {bad} outside class range {class_count}"
                )));
            }
        }
        Ok(())
    }
}

/// Encode full sequences through the student encoder in eval mode and
/// average-pool everything (the extra-token position included).
pub fn extract_features<T: Scalar>(
    model: &Model<T>,
    records: &[TokenSequence],
    chunk: usize,
) -> Result<Array2<f64>> {
    let seq_len = model.cfg.seq_len;
    let vocab = model.cfg.vocab;
    let d = model.cfg.embed_dim;
    for r in records {
        if r.len() != seq_len {
            return Err(SorcenError::invalid(format!(
                "record length {} does not match model seq_len {seq_len}",
                r.len()
            )));
        }
        if let Some((position, &id)) = r.ids.iter().enumerate().find(|(_, &id)| id >= vocab) {
            return Err(SorcenError::TokenOutOfRange { id, position, vocab });
        }
    }
    let full_len = model.cfg.full_input_len();
    let positions_one = full_position_ids(seq_len);
    let mut out = Array2::<f64>::zeros((records.len(), d));
    let chunk = chunk.max(1);
    let mut dummy_rng = Prng::seeded(0);
    for (chunk_idx, batch) in records.chunks(chunk).enumerate() {
        let b = batch.len();
        let mut tokens = Vec::with_capacity(b * full_len);
        let mut positions = Vec::with_capacity(b * full_len);
        for r in batch {
            tokens.extend(with_extra_token(&r.ids, vocab));
            positions.extend(positions_one.iter().copied());
        }
        let mut g = Graph::<T>::inference();
        let latents = model.encode(
            &mut g,
            Branch::Student,
            &tokens,
            &positions,
            b,
            full_len,
            false,
            &mut dummy_rng,
        )?;
        let values = g.values(latents);
        let values = values.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for i in 0..b {
            let row = chunk_idx * chunk + i;
            for j in 0..d {
                let mut acc = 0.0f64;
                for p in 0..full_len {
                    acc += values[(i * full_len + p, j)].as_f64();
                }
                out[(row, j)] = acc / full_len as f64;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DropoutSite, NetworkConfig};

    fn small_model() -> Model<f64> {
        let cfg = NetworkConfig {
            embed_dim: 12,
            enc_depth: 1,
            dec_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            projector_width: 8,
            projector_depth: 2,
            predictor_depth: 2,
            vocab: 9,
            seq_len: 16,
            dropout: 0.0,
            dropout_site: DropoutSite::Decoder,
        };
        let mut rng = Prng::seeded(5);
        Model::init(cfg, &mut rng).unwrap()
    }

    fn records(n: usize, vocab: u32, seq_len: usize, seed: u64) -> Vec<TokenSequence> {
        let mut rng = Prng::seeded(seed);
        (0..n)
            .map(|_| TokenSequence {
                ids: (0..seq_len).map(|_| rng.below(vocab as u64) as u32).collect(),
            })
            .collect()
    }

    #[test]
    fn feature_width_is_embed_dim_and_deterministic() {
        let model = small_model();
        let data = records(7, model.cfg.vocab, model.cfg.seq_len, 3);
        let a = extract_features(&model, &data, 3).unwrap();
        let b = extract_features(&model, &data, 7).unwrap();
        assert_eq!(a.dim(), (7, 12));
        // identical inputs give identical features regardless of chunking
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_vocab_record_rejected() {
        let model = small_model();
        let mut data = records(2, model.cfg.vocab, model.cfg.seq_len, 4);
        data[1].ids[3] = 100;
        assert!(extract_features(&model, &data, 4).is_err());
    }
}
