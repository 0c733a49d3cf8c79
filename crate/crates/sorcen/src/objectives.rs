//! The training objectives: masked-token reconstruction, echo sampling with
//! top-K-minus-argmax filtering, and the contrastive loss (InfoNCE plus a
//! uniformity penalty, or an L2-similarity alternative), combined as
//! `recon + lambda * contrastive`.

use ndarray::ArrayD;

use crate::autodiff::{Graph, Scalar, Tensor};
use crate::error::{Result, SorcenError};
use crate::masking::JsmPlan;
use crate::rng::Prng;

/// Weight of the uniformity penalty inside the contrastive loss; fixed by
/// the objective's definition, not a tunable.
pub const UNIFORMITY_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    InfoNce,
    L2Similarity,
}

impl LossVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::InfoNce => "infonce",
            LossVariant::L2Similarity => "l2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "infonce" => Ok(LossVariant::InfoNce),
            "l2" | "l2-similarity" => Ok(LossVariant::L2Similarity),
            other => Err(SorcenError::invalid(format!("unknown loss variant {other:?}"))),
        }
    }
}

/// Loss hyperparameters and the ablation toggles.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Contrastive weight in the combined objective.
    pub lambda: f64,
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Echo candidates come from logit ranks 2..=top_k.
    pub top_k: usize,
    pub label_smoothing: f64,
    /// Epochs with the echo branch disabled entirely.
    pub echo_warmup_epochs: u64,
    pub variant: LossVariant,
    pub uniformity: bool,
    pub predictor: bool,
    /// Master switch for the echo branch (off reproduces pure reconstruction).
    pub echo: bool,
    /// Spatial masking of echoes before the teacher sees them.
    pub jsm: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            temperature: 0.2,
            top_k: 15,
            label_smoothing: 0.1,
            echo_warmup_epochs: 0,
            variant: LossVariant::InfoNce,
            uniformity: true,
            predictor: true,
            echo: true,
            jsm: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, vocab: u32) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(SorcenError::invalid(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.temperature <= 0.0 {
            return Err(SorcenError::invalid(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if self.top_k < 2 || self.top_k as u32 > vocab {
            return Err(SorcenError::invalid(format!(
                "top_k {} must lie in [2, vocab {vocab}]",
                self.top_k
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(SorcenError::invalid(format!(
                "label_smoothing {} must lie in [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Echo sequences sampled from decoder logits, plus what produced them.
#[derive(Debug, Clone)]
pub struct EchoBatch {
    /// Full-length echo token sequences, one per batch element.
    pub tokens: Vec<Vec<u32>>,
    /// Per-position candidate sets (logit ranks 2..=K, K-1 ids each).
    pub candidates: Vec<Vec<Vec<u32>>>,
    /// Spatial-mask placements, filled once JSM runs.
    pub jsm_plans: Vec<JsmPlan>,
}

/// Label-smoothed cross-entropy over masked positions only, normalized by
/// the total masked-token count in the batch. Logits at unmasked positions
/// cannot influence the value: their loss weight is exactly zero.
pub fn recon_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Tensor,
    targets: &[u32],
    masked: &[bool],
    label_smoothing: f64,
) -> Result<Tensor> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || targets.len() != masked.len() {
        return Err(SorcenError::invalid(format!(
            "recon_loss: logits {shape:?} vs {} targets / {} mask flags",
            targets.len(),
            masked.len()
        )));
    }
    let vocab = shape[1];
    let masked_total = masked.iter().filter(|&&m| m).count();
    if masked_total == 0 {
        return Err(SorcenError::invalid("recon_loss: no masked positions in batch"));
    }
    let logp = g.log_softmax(logits);
    let norm = 1.0 / masked_total as f64;
    let picked: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let hard: Vec<T> = masked
        .iter()
        .map(|&m| if m { T::of_f64((1.0 - label_smoothing) * norm) } else { T::zero() })
        .collect();
    let loss = g.nll_picked(logp, &picked, &hard)?;
    if label_smoothing == 0.0 {
        return Ok(loss);
    }
    let soft: Vec<T> = masked
        .iter()
        .map(|&m| if m { T::of_f64(label_smoothing / vocab as f64 * norm) } else { T::zero() })
        .collect();
    let spread = g.row_weighted_sum_all(logp, &soft)?;
    let spread = g.scale(spread, T::of_f64(-1.0));
    g.add(loss, spread)
}

/// Sample one echo token per position from the renormalized softmax over
/// logit ranks 2..=K. The argmax is always excluded, so an echo can never
/// reproduce the most likely token; ties rank lower ids first.
pub fn sample_echo<T: Scalar>(
    logits: &ArrayD<T>,
    batch: usize,
    seq_len: usize,
    top_k: usize,
    rng: &mut Prng,
) -> Result<EchoBatch> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != batch * seq_len {
        return Err(SorcenError::invalid(format!(
            "sample_echo: logits shape {shape:?} does not match batch {batch} x seq {seq_len}"
        )));
    }
    let vocab = shape[1];
    if top_k < 2 || top_k > vocab {
        return Err(SorcenError::invalid(format!(
            "sample_echo: top_k {top_k} must lie in [2, vocab {vocab}]"
        )));
    }
    let rows = logits.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut tokens = vec![Vec::with_capacity(seq_len); batch];
    let mut candidates = vec![Vec::with_capacity(seq_len); batch];
    let mut order: Vec<usize> = Vec::with_capacity(vocab);
    for b in 0..batch {
        for s in 0..seq_len {
            let row = rows.row(b * seq_len + s);
            order.clear();
            order.extend(0..vocab);
            order.sort_unstable_by(|&i, &j| {
                row[j].as_f64().total_cmp(&row[i].as_f64()).then(i.cmp(&j))
            });
            let cands = &order[1..top_k];
            let max_logit = row[cands[0]].as_f64();
            let weights: Vec<f64> =
                cands.iter().map(|&c| (row[c].as_f64() - max_logit).exp()).collect();
            let pick = cands[rng.categorical(&weights)];
            tokens[b].push(pick as u32);
            candidates[b].push(cands.iter().map(|&c| c as u32).collect());
        }
    }
    Ok(EchoBatch { tokens, candidates, jsm_plans: Vec::new() })
}

/// InfoNCE between anchor projections `z` and stop-gradient echo
/// projections `z_teacher`, plus (when enabled) the uniformity penalty
/// `0.1/B * sum_{i,j} (z_i . z_j)^2` with the diagonal included. The
/// L2-similarity variant replaces the InfoNCE term with mean squared
/// row distance.
pub fn contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    z: Tensor,
    z_teacher: Tensor,
    temperature: f64,
    uniformity: bool,
    variant: LossVariant,
) -> Result<Tensor> {
    let zs = g.shape(z).to_vec();
    let ts = g.shape(z_teacher).to_vec();
    if zs.len() != 2 || zs != ts {
        return Err(SorcenError::ShapeMismatch { op: "contrastive_loss", lhs: zs, rhs: ts });
    }
    if g.requires_grad(z_teacher) {
        return Err(SorcenError::invalid(
            "contrastive_loss: teacher projections must be stop-gradient constants",
        ));
    }
    for t in [z, z_teacher] {
        let v = g.values(t);
        for row in v.rows() {
            let norm = row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-3 {
                return Err(SorcenError::invalid(format!(
                    "contrastive_loss: row norm {norm} deviates from 1 by more than 1e-3"
                )));
            }
        }
    }
    let b = zs[0];
    let inv_b = T::of_f64(1.0 / b as f64);

    let match_term = match variant {
        LossVariant::InfoNce => {
            let logits = g.matmul_nt(z, z_teacher)?;
            let logits = g.scale(logits, T::of_f64(1.0 / temperature));
            let logp = g.log_softmax(logits);
            let diag: Vec<usize> = (0..b).collect();
            g.nll_picked(logp, &diag, &vec![inv_b; b])?
        }
        LossVariant::L2Similarity => {
            let d = g.sub(z, z_teacher)?;
            let sq = g.mul(d, d)?;
            let s = g.sum_all(sq);
            g.scale(s, inv_b)
        }
    };
    if !uniformity {
        return Ok(match_term);
    }
    let gram = g.matmul_nt(z, z)?;
    let sq = g.mul(gram, gram)?;
    let total = g.sum_all(sq);
    let penalty = g.scale(total, T::of_f64(UNIFORMITY_WEIGHT / b as f64));
    g.add(match_term, penalty)
}

/// `recon + lambda * contrastive`; during echo warmup (or with the echo
/// branch off) the contrastive term is absent entirely and the loss is the
/// reconstruction term alone.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    recon: Tensor,
    contrastive: Option<Tensor>,
    lambda: f64,
) -> Result<Tensor> {
    match contrastive {
        None => Ok(recon),
        Some(cl) => {
            let weighted = g.scale(cl, T::of_f64(lambda));
            g.add(recon, weighted)
        }
    }
}

/// True when the echo branch runs at this epoch.
pub fn echo_active(cfg: &LossConfig, epoch: u64) -> bool {
    cfg.echo && epoch >= cfg.echo_warmup_epochs
}
