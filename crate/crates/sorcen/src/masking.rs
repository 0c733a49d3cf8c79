//! Input corruption: Mask&Drop for the reconstruction branch and jittered
//! spatial masking (JSM) for echo sequences.
//!
//! Mask&Drop replaces a Gaussian-ratio subset of tokens with the mask token,
//! then discards masked positions until exactly `S/2` remain, so encoder
//! input shapes are static. JSM keeps one random axis-aligned square of an
//! echo visible and masks everything else, without dropping.

use crate::error::{Result, SorcenError};
use crate::rng::Prng;

/// Truncated-Gaussian sampling parameters for the mask ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRatio {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for MaskRatio {
    fn default() -> Self {
        MaskRatio { mean: 0.55, std: 0.25, min: 0.5, max: 1.0 }
    }
}

/// Per-sample record of one Mask&Drop application.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// Sampled mask ratio in `[min, max]`.
    pub ratio: f64,
    /// `mask[i]` is true when position `i` was masked. `popcount == round(ratio * S)`.
    pub mask: Vec<bool>,
    /// Original indices kept in the encoder input, in original order.
    /// Always `S/2` long: every unmasked position plus enough masked ones.
    pub retained: Vec<usize>,
    /// Masked positions removed from the encoder input, sorted.
    pub dropped: Vec<usize>,
}

impl MaskPlan {
    pub fn seq_len(&self) -> usize {
        self.mask.len()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// True when the position is masked or dropped, i.e. the decoder input
    /// carries the shared placeholder latent there.
    pub fn needs_placeholder(&self, position: usize) -> bool {
        self.mask[position]
    }
}

/// Placement of the visible square kept by JSM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JsmPlan {
    pub side: usize,
    pub top: usize,
    pub left: usize,
}

/// Draw a mask ratio from `Normal(mean, std)` truncated to `[min, max]` by
/// rejection. Rejection (rather than clipping) avoids an atom at the lower
/// bound. A zero std degenerates to the mean.
pub fn sample_mask_ratio(rng: &mut Prng, dist: &MaskRatio) -> f64 {
    if dist.std == 0.0 {
        return dist.mean.clamp(dist.min, dist.max);
    }
    loop {
        let r = dist.mean + dist.std * rng.normal();
        if r >= dist.min && r <= dist.max {
            return r;
        }
    }
}

/// Mask token id for a vocabulary: the first reserved embedding row.
pub fn mask_token(vocab: u32) -> u32 {
    vocab
}

/// Extra token id: the second reserved embedding row.
pub fn extra_token(vocab: u32) -> u32 {
    vocab + 1
}

/// Apply Mask&Drop to one sequence. Returns the encoder input of length
/// `S/2 + 1` (the extra token prepended, then retained positions in original
/// order, masked ones carrying the mask token) together with the plan.
pub fn mask_and_drop(
    ids: &[u32],
    vocab: u32,
    dist: &MaskRatio,
    rng: &mut Prng,
) -> Result<(Vec<u32>, MaskPlan)> {
    let seq_len = ids.len();
    if seq_len == 0 || seq_len % 2 != 0 {
        return Err(SorcenError::invalid(format!(
            "mask_and_drop needs a positive even sequence length, got {seq_len}"
        )));
    }
    let keep = seq_len / 2;
    let ratio = sample_mask_ratio(rng, dist);
    let masked_count = (ratio * seq_len as f64).round() as usize;
    debug_assert!(masked_count >= keep && masked_count <= seq_len);

    let masked = rng.sample_indices(seq_len, masked_count);
    let mut mask = vec![false; seq_len];
    for &i in &masked {
        mask[i] = true;
    }

    // All unmasked positions stay; fill up to `keep` with masked positions.
    let fill = keep - (seq_len - masked_count);
    let chosen = rng.sample_indices(masked_count, fill);
    let mut keep_masked = vec![false; seq_len];
    for &j in &chosen {
        keep_masked[masked[j]] = true;
    }

    let mut retained = Vec::with_capacity(keep);
    let mut dropped = Vec::with_capacity(masked_count - fill);
    let mut input = Vec::with_capacity(keep + 1);
    input.push(extra_token(vocab));
    for (i, &id) in ids.iter().enumerate() {
        if !mask[i] {
            retained.push(i);
            input.push(id);
        } else if keep_masked[i] {
            retained.push(i);
            input.push(mask_token(vocab));
        } else {
            dropped.push(i);
        }
    }
    debug_assert_eq!(retained.len(), keep);
    Ok((input, MaskPlan { ratio, mask, retained, dropped }))
}

/// Keep a random `side x side` square of the grid visible and replace every
/// other token with the mask token. Length is unchanged.
pub fn jittered_spatial_mask(
    ids: &[u32],
    grid: usize,
    side_range: (usize, usize),
    vocab: u32,
    rng: &mut Prng,
) -> Result<(Vec<u32>, JsmPlan)> {
    if ids.len() != grid * grid {
        return Err(SorcenError::invalid(format!(
            "jsm: sequence length {} is not grid {grid} squared",
            ids.len()
        )));
    }
    let (lo, hi) = side_range;
    if lo < 1 || hi < lo || hi > grid {
        return Err(SorcenError::invalid(format!(
            "jsm: side range [{lo}, {hi}] invalid for grid {grid}"
        )));
    }
    let side = lo + rng.below((hi - lo + 1) as u64) as usize;
    let top = rng.below((grid - side + 1) as u64) as usize;
    let left = rng.below((grid - side + 1) as u64) as usize;
    let mask = mask_token(vocab);
    let mut out = Vec::with_capacity(ids.len());
    for r in 0..grid {
        for c in 0..grid {
            let visible = r >= top && r < top + side && c >= left && c < left + side;
            out.push(if visible { ids[r * grid + c] } else { mask });
        }
    }
    Ok((out, JsmPlan { side, top, left }))
}

/// Default JSM side range: `[G/4, 3G/4]`, clamped into `[1, G]`.
pub fn default_jsm_range(grid: usize) -> (usize, usize) {
    let lo = (grid / 4).max(1);
    let hi = (3 * grid / 4).clamp(lo, grid);
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_respect_truncation() {
        let mut rng = Prng::seeded(1);
        let dist = MaskRatio::default();
        for _ in 0..50_000 {
            let r = sample_mask_ratio(&mut rng, &dist);
            assert!((0.5..=1.0).contains(&r));
        }
    }

    #[test]
    fn zero_std_degenerates_to_mean() {
        let mut rng = Prng::seeded(2);
        let dist = MaskRatio { std: 0.0, ..MaskRatio::default() };
        for _ in 0..10 {
            assert_eq!(sample_mask_ratio(&mut rng, &dist), 0.55);
        }
    }

    #[test]
    fn output_length_is_half_plus_one() {
        let mut rng = Prng::seeded(3);
        let ids: Vec<u32> = (0..256u32).map(|i| i % 64).collect();
        for _ in 0..200 {
            let (input, plan) = mask_and_drop(&ids, 64, &MaskRatio::default(), &mut rng).unwrap();
            assert_eq!(input.len(), 129);
            assert_eq!(plan.retained.len(), 128);
            assert_eq!(plan.masked_count(), (plan.ratio * 256.0).round() as usize);
        }
    }

    #[test]
    fn full_ratio_keeps_only_mask_tokens() {
        let mut rng = Prng::seeded(4);
        let ids: Vec<u32> = (0..256u32).map(|i| i % 64).collect();
        let dist = MaskRatio { mean: 1.0, std: 0.0, min: 0.5, max: 1.0 };
        let (input, plan) = mask_and_drop(&ids, 64, &dist, &mut rng).unwrap();
        assert_eq!(input[0], extra_token(64));
        assert!(input[1..].iter().all(|&t| t == mask_token(64)));
        assert_eq!(plan.dropped.len(), 128);
    }

    #[test]
    fn half_ratio_retains_exactly_the_visible_set() {
        let mut rng = Prng::seeded(5);
        let ids: Vec<u32> = (0..256u32).map(|i| i % 64).collect();
        let dist = MaskRatio { mean: 0.5, std: 0.0, min: 0.5, max: 1.0 };
        let (input, plan) = mask_and_drop(&ids, 64, &dist, &mut rng).unwrap();
        // at the lower truncation bound the masked set is exactly the
        // complement of the retained set: no mask token enters the input
        assert_eq!(input.len(), 129);
        let masked_in_input = input[1..].iter().filter(|&&t| t == mask_token(64)).count();
        assert_eq!(masked_in_input, 0);
        assert_eq!(plan.dropped.len(), 128);
        assert!(plan.retained.iter().all(|&p| !plan.mask[p]));
    }

    #[test]
    fn dropped_count_is_constant_across_ratios() {
        // |retained| is pinned at S/2, so S/2 positions always drop
        let mut rng = Prng::seeded(15);
        let ids: Vec<u32> = (0..256u32).map(|i| i % 64).collect();
        for _ in 0..100 {
            let (_, plan) = mask_and_drop(&ids, 64, &MaskRatio::default(), &mut rng).unwrap();
            assert_eq!(plan.dropped.len(), 128);
            assert!(plan.dropped.iter().all(|&p| plan.mask[p]));
        }
    }

    #[test]
    fn unmasked_positions_keep_their_tokens() {
        let mut rng = Prng::seeded(6);
        let ids: Vec<u32> = (0..64u32).collect();
        for _ in 0..100 {
            let (input, plan) = mask_and_drop(&ids, 64, &MaskRatio::default(), &mut rng).unwrap();
            for (slot, &pos) in plan.retained.iter().enumerate() {
                if !plan.mask[pos] {
                    assert_eq!(input[slot + 1], ids[pos]);
                } else {
                    assert_eq!(input[slot + 1], mask_token(64));
                }
            }
            // retained stays sorted: original order preserved
            assert!(plan.retained.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn odd_length_rejected() {
        let mut rng = Prng::seeded(7);
        let ids = vec![0u32; 15];
        assert!(mask_and_drop(&ids, 4, &MaskRatio::default(), &mut rng).is_err());
    }

    #[test]
    fn plans_are_bit_reproducible() {
        let ids: Vec<u32> = (0..36u32).collect();
        let run = || {
            let mut rng = Prng::seeded(99);
            mask_and_drop(&ids, 64, &MaskRatio::default(), &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn jsm_counts_visible_cells() {
        let mut rng = Prng::seeded(8);
        let ids: Vec<u32> = (0..256u32).map(|i| i % 64).collect();
        let (out, plan) = jittered_spatial_mask(&ids, 16, (4, 4), 64, &mut rng).unwrap();
        assert_eq!(plan.side, 4);
        let visible = out.iter().filter(|&&t| t != mask_token(64)).count();
        assert_eq!(visible, 16);
        assert_eq!(out.len(), 256);
    }

    #[test]
    fn jsm_full_side_is_identity() {
        let mut rng = Prng::seeded(9);
        let ids: Vec<u32> = (0..64u32).collect();
        let (out, _) = jittered_spatial_mask(&ids, 8, (8, 8), 64, &mut rng).unwrap();
        assert_eq!(out, ids);
    }

    #[test]
    fn jsm_visible_region_is_one_square() {
        let mut rng = Prng::seeded(10);
        let grid = 12;
        let ids: Vec<u32> = (0..(grid * grid) as u32).collect();
        for _ in 0..200 {
            let (out, plan) =
                jittered_spatial_mask(&ids, grid, default_jsm_range(grid), 1024, &mut rng).unwrap();
            for r in 0..grid {
                for c in 0..grid {
                    let inside = r >= plan.top
                        && r < plan.top + plan.side
                        && c >= plan.left
                        && c < plan.left + plan.side;
                    let visible = out[r * grid + c] != mask_token(1024);
                    assert_eq!(inside, visible, "cell ({r},{c}) plan {plan:?}");
                }
            }
        }
    }
}
