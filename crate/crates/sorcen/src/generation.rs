//! Unconditional iterative token generation and inpainting.
//!
//! Decoding runs a fixed number of steps under a shrinking cosine mask
//! schedule: every step the full sequence (mask tokens included) is
//! encoded, masked positions are re-predicted, sampled tokens are scored by
//! log-probability plus temperature-scaled Gumbel noise, and the highest-
//! scoring ones commit. Committed positions are immutable from then on.

use std::path::Path;

use crate::autodiff::{Graph, Scalar};
use crate::data::TokenSequence;
use crate::error::{Result, SorcenError};
use crate::masking::mask_token;
use crate::model::{full_position_ids, with_extra_token, Branch, Model};
use crate::rng::Prng;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    /// Decoding steps T.
    pub steps: usize,
    /// Sampling temperature at the first step, interpolated linearly to
    /// `temp_end` by the last.
    pub temp_start: f64,
    pub temp_end: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { steps: 20, temp_start: 1.0, temp_end: 0.1, seed: 0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(SorcenError::invalid("decode steps must be >= 1"));
        }
        if self.temp_start <= 0.0 || self.temp_end <= 0.0 {
            return Err(SorcenError::invalid("decode temperatures must be positive"));
        }
        Ok(())
    }

    fn temperature_at(&self, k: usize) -> f64 {
        if self.steps <= 1 {
            return self.temp_end;
        }
        let frac = (k - 1) as f64 / (self.steps - 1) as f64;
        self.temp_start + (self.temp_end - self.temp_start) * frac
    }
}

/// How many positions remain masked after step `k` of `t` on a length-`s`
/// sequence: `floor(s * cos(pi * k / 2t))`, exactly zero at the final step.
pub fn masked_count_at(k: usize, t: usize, s: usize) -> usize {
    assert!(k >= 1 && k <= t, "step {k} outside 1..={t}");
    if k == t {
        return 0;
    }
    let angle = std::f64::consts::PI * k as f64 / (2.0 * t as f64);
    (s as f64 * angle.cos()).floor() as usize
}

/// What to keep fixed during inpainting.
#[derive(Debug, Clone)]
pub enum VisibleSpec {
    /// Axis-aligned rectangle on the token grid.
    Rect { top: usize, left: usize, height: usize, width: usize },
    /// Arbitrary position set.
    Positions(Vec<usize>),
    /// A random fraction of positions, drawn from the decode seed.
    RandomFraction(f64),
}

#[derive(Debug, Clone)]
pub struct InpaintReport {
    pub visible_count: usize,
    /// True when the visible set was empty and decoding degraded to
    /// unconditional generation.
    pub unconditional: bool,
}

/// Per-sample record of the mask schedule actually realized.
#[derive(Debug, Clone, Default)]
pub struct DecodeTrace {
    /// Masked-position count after each step, one entry per step.
    pub masked_after: Vec<Vec<usize>>,
}

fn gumbel(rng: &mut Prng) -> f64 {
    let u = loop {
        let u = rng.uniform();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

/// Iteratively commit tokens for every masked position of each input
/// sequence. Inputs may mix real tokens (committed from the start) with the
/// mask token; a fully visible input comes back unchanged. All sequences in
/// the batch share the model forward passes.
pub fn iterative_decode_batch<T: Scalar>(
    model: &Model<T>,
    initial: &[Vec<u32>],
    cfg: &DecodeConfig,
) -> Result<(Vec<TokenSequence>, DecodeTrace)> {
    cfg.validate()?;
    let seq_len = model.cfg.seq_len;
    let vocab = model.cfg.vocab;
    let mask = mask_token(vocab);
    let batch = initial.len();
    if batch == 0 {
        return Ok((Vec::new(), DecodeTrace::default()));
    }
    for ids in initial {
        if ids.len() != seq_len {
            return Err(SorcenError::invalid(format!(
                "decode input length {} does not match model seq_len {seq_len}",
                ids.len()
            )));
        }
        for (position, &id) in ids.iter().enumerate() {
            if id >= vocab && id != mask {
                return Err(SorcenError::TokenOutOfRange { id, position, vocab });
            }
        }
    }

    let root = Prng::seeded(cfg.seed);
    let mut current: Vec<Vec<u32>> = initial.to_vec();
    let mut trace = DecodeTrace { masked_after: vec![Vec::new(); batch] };
    let full_len = model.cfg.full_input_len();
    let positions_one = full_position_ids(seq_len);
    let mut dummy_rng = Prng::seeded(0);

    for k in 1..=cfg.steps {
        let any_masked = current.iter().any(|ids| ids.iter().any(|&t| t == mask));
        if !any_masked {
            for m in trace.masked_after.iter_mut() {
                m.push(0);
            }
            continue;
        }
        let temp = cfg.temperature_at(k);

        // encode the full sequences, mask tokens included
        let mut tokens = Vec::with_capacity(batch * full_len);
        let mut positions = Vec::with_capacity(batch * full_len);
        for ids in &current {
            tokens.extend(with_extra_token(ids, vocab));
            positions.extend(positions_one.iter().copied());
        }
        let mut g = Graph::<T>::inference();
        let latents = model.encode(
            &mut g,
            Branch::Student,
            &tokens,
            &positions,
            batch,
            full_len,
            false,
            &mut dummy_rng,
        )?;
        // masked positions receive the shared placeholder latent
        let mut indices = Vec::with_capacity(batch * full_len);
        for (b, ids) in current.iter().enumerate() {
            let base = b * full_len;
            indices.push(base);
            for (i, &id) in ids.iter().enumerate() {
                indices.push(if id == mask { base } else { base + 1 + i });
            }
        }
        let assembled = g.select_rows(latents, &indices)?;
        let logits = model.decode_logits(&mut g, assembled, batch, false, &mut dummy_rng)?;
        let logits_v = g.values(logits).view().into_dimensionality::<ndarray::Ix2>().unwrap();

        for (b, ids) in current.iter_mut().enumerate() {
            let masked_positions: Vec<usize> =
                (0..seq_len).filter(|&i| ids[i] == mask).collect();
            let masked_now = masked_positions.len();
            if masked_now == 0 {
                trace.masked_after[b].push(0);
                continue;
            }
            let target = masked_count_at(k, cfg.steps, seq_len).min(masked_now);
            let commits = masked_now - target;
            let mut rng = root.split(k as u64).split(b as u64);
            // sample one candidate per masked position and score it
            let mut scored: Vec<(f64, usize, u32)> = Vec::with_capacity(masked_now);
            for &pos in &masked_positions {
                let row = logits_v.row(b * seq_len + pos);
                let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> =
                    row.iter().map(|v| ((v.as_f64() - max) / temp).exp()).collect();
                let pick = rng.categorical(&weights);
                // log-probability under the untempered distribution
                let lse: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
                let logp = row[pick].as_f64() - max - lse;
                let confidence = logp + temp * gumbel(&mut rng);
                scored.push((confidence, pos, pick as u32));
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, pos, token) in scored.iter().take(commits) {
                ids[pos] = token;
            }
            trace.masked_after[b].push(ids.iter().filter(|&&t| t == mask).count());
        }
    }

    let sequences = current
        .into_iter()
        .map(|ids| {
            debug_assert!(ids.iter().all(|&t| t < vocab));
            TokenSequence { ids }
        })
        .collect();
    Ok((sequences, trace))
}

/// Generate `n` sequences unconditionally (all positions start masked).
pub fn generate_unconditional<T: Scalar>(
    model: &Model<T>,
    n: usize,
    cfg: &DecodeConfig,
    chunk: usize,
) -> Result<Vec<TokenSequence>> {
    let mask = mask_token(model.cfg.vocab);
    let mut out = Vec::with_capacity(n);
    let chunk = chunk.max(1);
    let mut produced = 0usize;
    let mut index = 0u64;
    while produced < n {
        let take = chunk.min(n - produced);
        let initial: Vec<Vec<u32>> = (0..take).map(|_| vec![mask; model.cfg.seq_len]).collect();
        // each chunk gets its own derived seed so results do not depend on
        // chunking only through the per-sample index
        let sub = DecodeConfig { seed: Prng::seeded(cfg.seed).split(index).state().0, ..cfg.clone() };
        let (mut seqs, _) = iterative_decode_batch(model, &initial, &sub)?;
        out.append(&mut seqs);
        produced += take;
        index += 1;
    }
    Ok(out)
}

/// Fill the non-visible complement of `seq` by iterative decoding. Visible
/// tokens are bit-identical in the output.
pub fn inpaint<T: Scalar>(
    model: &Model<T>,
    seq: &[u32],
    visible: &VisibleSpec,
    cfg: &DecodeConfig,
) -> Result<(TokenSequence, InpaintReport)> {
    let seq_len = model.cfg.seq_len;
    if seq.len() != seq_len {
        return Err(SorcenError::invalid(format!(
            "inpaint input length {} does not match model seq_len {seq_len}",
            seq.len()
        )));
    }
    let grid = (seq_len as f64).sqrt() as usize;
    let mut keep = vec![false; seq_len];
    match visible {
        VisibleSpec::Rect { top, left, height, width } => {
            if grid * grid != seq_len {
                return Err(SorcenError::invalid("rectangle spec needs a square token grid"));
            }
            if top + height > grid || left + width > grid {
                return Err(SorcenError::invalid(format!(
                    "rectangle {top},{left} {height}x{width} does not fit a {grid}x{grid} grid"
                )));
            }
            for r in *top..top + height {
                for c in *left..left + width {
                    keep[r * grid + c] = true;
                }
            }
        }
        VisibleSpec::Positions(ps) => {
            for &p in ps {
                if p >= seq_len {
                    return Err(SorcenError::invalid(format!("visible position {p} out of range")));
                }
                keep[p] = true;
            }
        }
        VisibleSpec::RandomFraction(f) => {
            if !(0.0..=1.0).contains(f) {
                return Err(SorcenError::invalid(format!("visible fraction {f} outside [0, 1]")));
            }
            let count = (f * seq_len as f64).round() as usize;
            let mut rng = Prng::seeded(cfg.seed).split(0xface);
            for p in rng.sample_indices(seq_len, count) {
                keep[p] = true;
            }
        }
    }
    let visible_count = keep.iter().filter(|&&k| k).count();
    let mask = mask_token(model.cfg.vocab);
    let initial: Vec<u32> =
        seq.iter().zip(&keep).map(|(&t, &k)| if k { t } else { mask }).collect();
    let (mut out, _) = iterative_decode_batch(model, &[initial], cfg)?;
    let result = out.pop().expect("one input, one output");
    for (i, &k) in keep.iter().enumerate() {
        debug_assert!(!k || result.ids[i] == seq[i], "visible token moved at {i}");
    }
    Ok((result, InpaintReport { visible_count, unconditional: visible_count == 0 }))
}

/// Render a token grid as a PNG via a deterministic token -> color hash.
/// This is a visual-inspection aid, not a pixel reconstruction.
pub fn render_png(seq: &[u32], grid: usize, scale: usize, path: impl AsRef<Path>) -> Result<()> {
    if seq.len() != grid * grid {
        return Err(SorcenError::invalid(format!(
            "render_png: sequence length {} is not grid {grid} squared",
            seq.len()
        )));
    }
    let scale = scale.max(1);
    let side = grid * scale;
    let mut rgb = vec![0u8; side * side * 3];
    for r in 0..grid {
        for c in 0..grid {
            let color = token_color(seq[r * grid + c]);
            for dr in 0..scale {
                for dc in 0..scale {
                    let px = ((r * scale + dr) * side + c * scale + dc) * 3;
                    rgb[px..px + 3].copy_from_slice(&color);
                }
            }
        }
    }
    let path_str = path.as_ref().display().to_string();
    let file = std::fs::File::create(path.as_ref()).map_err(|e| SorcenError::io(&path_str, e))?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), side as u32, side as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer =
        encoder.write_header().map_err(|e| SorcenError::invalid(format!("{path_str}: {e}")))?;
    writer
        .write_image_data(&rgb)
        .map_err(|e| SorcenError::invalid(format!("{path_str}: {e}")))?;
    Ok(())
}

/// Deterministic, well-spread color for a token id.
pub fn token_color(token: u32) -> [u8; 3] {
    let mut z = (token as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    [(z >> 16) as u8, (z >> 8) as u8, z as u8]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DropoutSite, NetworkConfig};

    fn small_model() -> Model<f64> {
        let cfg = NetworkConfig {
            embed_dim: 16,
            enc_depth: 1,
            dec_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            projector_width: 8,
            projector_depth: 2,
            predictor_depth: 2,
            vocab: 10,
            seq_len: 16,
            dropout: 0.0,
            dropout_site: DropoutSite::Decoder,
        };
        let mut rng = Prng::seeded(77);
        Model::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn schedule_terminates_and_matches_arithmetic() {
        assert_eq!(masked_count_at(20, 20, 256), 0);
        assert_eq!(masked_count_at(10, 20, 256), 181);
        for t in [1usize, 5, 20, 64] {
            for s in [16usize, 256, 4096] {
                let mut prev = s;
                for k in 1..=t {
                    let m = masked_count_at(k, t, s);
                    assert!(m <= prev, "schedule increased at k={k} t={t} s={s}");
                    prev = m;
                }
                assert_eq!(prev, 0);
            }
        }
    }

    #[test]
    fn unconditional_decode_commits_everything() {
        let model = small_model();
        let mask = mask_token(model.cfg.vocab);
        let initial = vec![vec![mask; 16], vec![mask; 16]];
        let cfg = DecodeConfig { steps: 5, seed: 3, ..Default::default() };
        let (seqs, trace) = iterative_decode_batch(&model, &initial, &cfg).unwrap();
        for s in &seqs {
            assert!(s.ids.iter().all(|&t| t < model.cfg.vocab));
        }
        // realized masked counts follow the schedule exactly for all-masked inputs
        for per_sample in &trace.masked_after {
            let expected: Vec<usize> = (1..=5).map(|k| masked_count_at(k, 5, 16)).collect();
            assert_eq!(per_sample, &expected);
        }
    }

    #[test]
    fn fully_visible_input_returns_unchanged() {
        let model = small_model();
        let ids: Vec<u32> = (0..16u32).map(|i| i % model.cfg.vocab).collect();
        let cfg = DecodeConfig { steps: 3, seed: 1, ..Default::default() };
        let (seqs, _) = iterative_decode_batch(&model, &[ids.clone()], &cfg).unwrap();
        assert_eq!(seqs[0].ids, ids);
    }

    #[test]
    fn single_step_commits_in_one_pass() {
        let model = small_model();
        let mask = mask_token(model.cfg.vocab);
        let cfg = DecodeConfig { steps: 1, seed: 5, ..Default::default() };
        let (seqs, trace) = iterative_decode_batch(&model, &[vec![mask; 16]], &cfg).unwrap();
        assert!(seqs[0].ids.iter().all(|&t| t < model.cfg.vocab));
        assert_eq!(trace.masked_after[0], vec![0]);
    }

    #[test]
    fn decoding_is_deterministic_given_seed() {
        let model = small_model();
        let mask = mask_token(model.cfg.vocab);
        let cfg = DecodeConfig { steps: 4, seed: 11, ..Default::default() };
        let run = || iterative_decode_batch(&model, &[vec![mask; 16]], &cfg).unwrap().0;
        assert_eq!(run(), run());
    }

    #[test]
    fn inpaint_preserves_visible_tokens() {
        let model = small_model();
        let ids: Vec<u32> = (0..16u32).map(|i| i % model.cfg.vocab).collect();
        let cfg = DecodeConfig { steps: 4, seed: 9, ..Default::default() };
        let spec = VisibleSpec::Rect { top: 0, left: 0, height: 2, width: 3 };
        let (out, report) = inpaint(&model, &ids, &spec, &cfg).unwrap();
        assert_eq!(report.visible_count, 6);
        assert!(!report.unconditional);
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(out.ids[r * 4 + c], ids[r * 4 + c]);
            }
        }
        assert!(out.ids.iter().all(|&t| t < model.cfg.vocab));
    }

    #[test]
    fn inpaint_full_visible_is_identity() {
        let model = small_model();
        let ids: Vec<u32> = (0..16u32).map(|i| i % model.cfg.vocab).collect();
        let cfg = DecodeConfig { steps: 4, seed: 2, ..Default::default() };
        let spec = VisibleSpec::Positions((0..16).collect());
        let (out, _) = inpaint(&model, &ids, &spec, &cfg).unwrap();
        assert_eq!(out.ids, ids);
    }

    #[test]
    fn inpaint_empty_visible_reports_unconditional() {
        let model = small_model();
        let ids: Vec<u32> = vec![0; 16];
        let cfg = DecodeConfig { steps: 4, seed: 2, ..Default::default() };
        let (out, report) = inpaint(&model, &ids, &VisibleSpec::Positions(vec![]), &cfg).unwrap();
        assert!(report.unconditional);
        assert!(out.ids.iter().all(|&t| t < model.cfg.vocab));
    }

    #[test]
    fn random_fraction_keeps_requested_share() {
        let model = small_model();
        let ids: Vec<u32> = (0..16u32).map(|i| i % model.cfg.vocab).collect();
        let cfg = DecodeConfig { steps: 4, seed: 21, ..Default::default() };
        let (_, report) = inpaint(&model, &ids, &VisibleSpec::RandomFraction(0.25), &cfg).unwrap();
        assert_eq!(report.visible_count, 4);
    }

    #[test]
    fn png_export_is_deterministic() {
        let dir = std::env::temp_dir().join("sorcen-gen-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let seq: Vec<u32> = (0..16).collect();
        let a = dir.join("a.png");
        let b = dir.join("b.png");
        render_png(&seq, 4, 4, &a).unwrap();
        render_png(&seq, 4, 4, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
