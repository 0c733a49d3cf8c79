//! Token transformer: student encoder/decoder with projector and predictor
//! heads, plus an EMA teacher over the encoder and projector.
//!
//! Both branches share one latent space. The student runs the
//! reconstruction path (encode the masked-and-dropped input, re-align
//! latents to original grid positions, decode token logits) and the
//! contrastive path (pool, project, predict). The teacher is an
//! exponential moving average of the student's encoder and projector; it
//! only ever runs forward, as a stop-gradient target.

mod checkpoint;

pub use checkpoint::{checkpoint_dtype, read_checkpoint, write_checkpoint, CheckpointData, TrainMeta, CKPT_MAGIC};

use ndarray::{ArrayD, IxDyn};

use crate::autodiff::{Graph, ParamStore, Scalar, Tensor};
use crate::error::{Result, SorcenError};
use crate::masking::MaskPlan;
use crate::rng::Prng;

/// Where train-mode dropout applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutSite {
    None,
    Encoder,
    Decoder,
    Both,
}

impl DropoutSite {
    pub fn in_encoder(self) -> bool {
        matches!(self, DropoutSite::Encoder | DropoutSite::Both)
    }

    pub fn in_decoder(self) -> bool {
        matches!(self, DropoutSite::Decoder | DropoutSite::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DropoutSite::None => "none",
            DropoutSite::Encoder => "encoder",
            DropoutSite::Decoder => "decoder",
            DropoutSite::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DropoutSite::None),
            "encoder" => Ok(DropoutSite::Encoder),
            "decoder" => Ok(DropoutSite::Decoder),
            "both" => Ok(DropoutSite::Both),
            other => Err(SorcenError::invalid(format!("unknown dropout site {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub embed_dim: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub projector_width: usize,
    pub projector_depth: usize,
    pub predictor_depth: usize,
    /// Real vocabulary size; the embedding table holds two extra rows for
    /// the mask and extra tokens.
    pub vocab: u32,
    /// Token positions per image; inputs carry one extra leading slot.
    pub seq_len: usize,
    pub dropout: f64,
    pub dropout_site: DropoutSite,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            embed_dim: 128,
            enc_depth: 4,
            dec_depth: 2,
            heads: 4,
            mlp_ratio: 4,
            projector_width: 512,
            projector_depth: 2,
            predictor_depth: 2,
            vocab: 1024,
            seq_len: 256,
            dropout: 0.5,
            dropout_site: DropoutSite::Decoder,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(SorcenError::invalid(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.seq_len == 0 || self.seq_len % 2 != 0 {
            return Err(SorcenError::invalid(format!(
                "seq_len {} must be positive and even",
                self.seq_len
            )));
        }
        if self.vocab < 2 {
            return Err(SorcenError::invalid("vocab must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SorcenError::invalid(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if self.projector_depth == 0 || self.predictor_depth == 0 {
            return Err(SorcenError::invalid("projector and predictor need at least one layer"));
        }
        Ok(())
    }

    /// Encoder input length after Mask&Drop, including the extra token.
    pub fn masked_input_len(&self) -> usize {
        self.seq_len / 2 + 1
    }

    /// Full sequence length including the extra token.
    pub fn full_input_len(&self) -> usize {
        self.seq_len + 1
    }

    /// Rows of the token embedding table: vocabulary plus mask and extra.
    pub fn embedding_rows(&self) -> usize {
        self.vocab as usize + 2
    }
}

/// Which parameter set runs the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Student,
    Teacher,
}

pub struct Model<T: Scalar> {
    pub cfg: NetworkConfig,
    pub student: ParamStore<T>,
    pub teacher: ParamStore<T>,
}

fn normal_array<T: Scalar>(shape: &[usize], std: f64, rng: &mut Prng) -> ArrayD<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::of_f64(rng.normal() * std)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

fn const_array<T: Scalar>(shape: &[usize], value: f64) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::of_f64(value))
}

const INIT_STD: f64 = 0.02;

fn insert_block<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    mlp_ratio: usize,
    rng: &mut Prng,
) -> Result<()> {
    let hidden = dim * mlp_ratio;
    store.insert(format!("{prefix}.ln1.scale"), const_array(&[dim], 1.0))?;
    store.insert(format!("{prefix}.ln1.shift"), const_array(&[dim], 0.0))?;
    for head in ["q", "k", "v", "out"] {
        store.insert(format!("{prefix}.attn.{head}.weight"), normal_array(&[dim, dim], INIT_STD, rng))?;
        store.insert(format!("{prefix}.attn.{head}.bias"), const_array(&[dim], 0.0))?;
    }
    store.insert(format!("{prefix}.ln2.scale"), const_array(&[dim], 1.0))?;
    store.insert(format!("{prefix}.ln2.shift"), const_array(&[dim], 0.0))?;
    store.insert(format!("{prefix}.mlp.fc1.weight"), normal_array(&[dim, hidden], INIT_STD, rng))?;
    store.insert(format!("{prefix}.mlp.fc1.bias"), const_array(&[hidden], 0.0))?;
    store.insert(format!("{prefix}.mlp.fc2.weight"), normal_array(&[hidden, dim], INIT_STD, rng))?;
    store.insert(format!("{prefix}.mlp.fc2.bias"), const_array(&[dim], 0.0))?;
    Ok(())
}

fn insert_mlp_head<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    in_dim: usize,
    width: usize,
    depth: usize,
    rng: &mut Prng,
) -> Result<()> {
    let mut d_in = in_dim;
    for layer in 0..depth {
        store.insert(format!("{prefix}.fc{}.weight", layer + 1), normal_array(&[d_in, width], INIT_STD, rng))?;
        store.insert(format!("{prefix}.fc{}.bias", layer + 1), const_array(&[width], 0.0))?;
        d_in = width;
    }
    Ok(())
}

/// True for parameters the EMA teacher mirrors: encoder and projector.
pub fn is_teacher_param(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("proj.")
}

impl<T: Scalar> Model<T> {
    /// Fresh model; the teacher starts as an exact copy of the student's
    /// encoder and projector.
    pub fn init(cfg: NetworkConfig, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut student = ParamStore::new();
        student.insert("enc.tok_emb", normal_array(&[cfg.embedding_rows(), d], INIT_STD, rng))?;
        student.insert("enc.pos_emb", normal_array(&[cfg.full_input_len(), d], INIT_STD, rng))?;
        for b in 0..cfg.enc_depth {
            insert_block(&mut student, &format!("enc.blk{b}"), d, cfg.mlp_ratio, rng)?;
        }
        student.insert("enc.ln_f.scale", const_array(&[d], 1.0))?;
        student.insert("enc.ln_f.shift", const_array(&[d], 0.0))?;
        insert_mlp_head(&mut student, "proj", d, cfg.projector_width, cfg.projector_depth, rng)?;
        insert_mlp_head(&mut student, "pred", cfg.projector_width, cfg.projector_width, cfg.predictor_depth, rng)?;
        student.insert("dec.pos_emb", normal_array(&[cfg.full_input_len(), d], INIT_STD, rng))?;
        for b in 0..cfg.dec_depth {
            insert_block(&mut student, &format!("dec.blk{b}"), d, cfg.mlp_ratio, rng)?;
        }
        student.insert("dec.ln_f.scale", const_array(&[d], 1.0))?;
        student.insert("dec.ln_f.shift", const_array(&[d], 0.0))?;
        student.insert("dec.out.weight", normal_array(&[d, cfg.vocab as usize], INIT_STD, rng))?;
        student.insert("dec.out.bias", const_array(&[cfg.vocab as usize], 0.0))?;

        let mut teacher = ParamStore::new();
        for (name, p) in student.iter() {
            if is_teacher_param(name) {
                teacher.insert(name, p.values.clone())?;
            }
        }
        Ok(Model { cfg, student, teacher })
    }

    fn lease(&self, g: &mut Graph<T>, branch: Branch, name: &str) -> Result<Tensor> {
        match branch {
            Branch::Student => g.param(&self.student, name),
            // The teacher is a stop-gradient target: never differentiable.
            Branch::Teacher => g.frozen_param(&self.teacher, name),
        }
    }

    fn linear(
        &self,
        g: &mut Graph<T>,
        branch: Branch,
        prefix: &str,
        x: Tensor,
    ) -> Result<Tensor> {
        let w = self.lease(g, branch, &format!("{prefix}.weight"))?;
        let b = self.lease(g, branch, &format!("{prefix}.bias"))?;
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }

    fn layer_norm(
        &self,
        g: &mut Graph<T>,
        branch: Branch,
        prefix: &str,
        x: Tensor,
    ) -> Result<Tensor> {
        let scale = self.lease(g, branch, &format!("{prefix}.scale"))?;
        let shift = self.lease(g, branch, &format!("{prefix}.shift"))?;
        g.layer_norm(x, scale, shift)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph<T>,
        branch: Branch,
        prefix: &str,
        x: Tensor,
        batch: usize,
        seq: usize,
        dropout: Option<&mut Prng>,
    ) -> Result<Tensor> {
        let heads = self.cfg.heads;
        let head_dim = self.cfg.embed_dim / heads;

        let h = self.layer_norm(g, branch, &format!("{prefix}.ln1"), x)?;
        let q = self.linear(g, branch, &format!("{prefix}.attn.q"), h)?;
        let k = self.linear(g, branch, &format!("{prefix}.attn.k"), h)?;
        let v = self.linear(g, branch, &format!("{prefix}.attn.v"), h)?;
        let qh = g.split_heads(q, batch, seq, heads)?;
        let kh = g.split_heads(k, batch, seq, heads)?;
        let vh = g.split_heads(v, batch, seq, heads)?;
        let scores = g.bmm(qh, kh, true)?;
        let scores = g.scale(scores, T::of_f64(1.0 / (head_dim as f64).sqrt()));
        let probs = g.softmax(scores);
        let ctx = g.bmm(probs, vh, false)?;
        let merged = g.merge_heads(ctx, batch, seq, heads)?;
        let mut attn = self.linear(g, branch, &format!("{prefix}.attn.out"), merged)?;

        let mut dropout = dropout;
        if let Some(rng) = dropout.as_deref_mut() {
            attn = g.dropout(attn, self.cfg.dropout, rng);
        }
        let x = g.add(x, attn)?;

        let h = self.layer_norm(g, branch, &format!("{prefix}.ln2"), x)?;
        let h = self.linear(g, branch, &format!("{prefix}.mlp.fc1"), h)?;
        let h = g.gelu(h);
        let mut h = self.linear(g, branch, &format!("{prefix}.mlp.fc2"), h)?;
        if let Some(rng) = dropout.as_deref_mut() {
            h = g.dropout(h, self.cfg.dropout, rng);
        }
        g.add(x, h)
    }

    /// Run the encoder over a flattened batch of token ids with explicit
    /// position ids (0 for the extra token, original grid index + 1
    /// otherwise). Returns per-position latents of shape
    /// `(batch * input_len, embed_dim)`.
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        branch: Branch,
        token_ids: &[u32],
        position_ids: &[usize],
        batch: usize,
        input_len: usize,
        train: bool,
        rng: &mut Prng,
    ) -> Result<Tensor> {
        if token_ids.len() != batch * input_len || position_ids.len() != token_ids.len() {
            return Err(SorcenError::invalid(format!(
                "encode: expected {} ids for batch {batch} x len {input_len}, got {} tokens / {} positions",
                batch * input_len,
                token_ids.len(),
                position_ids.len()
            )));
        }
        let rows = self.cfg.embedding_rows();
        for (i, &id) in token_ids.iter().enumerate() {
            if (id as usize) >= rows {
                return Err(SorcenError::TokenOutOfRange {
                    id,
                    position: i,
                    vocab: rows as u32,
                });
            }
        }
        let ids: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
        let tok_table = self.lease(g, branch, "enc.tok_emb")?;
        let pos_table = self.lease(g, branch, "enc.pos_emb")?;
        let tok = g.embedding(tok_table, &ids)?;
        let pos = g.embedding(pos_table, position_ids)?;
        let mut x = g.add(tok, pos)?;
        let enc_dropout = train && self.cfg.dropout_site.in_encoder() && self.cfg.dropout > 0.0;
        for b in 0..self.cfg.enc_depth {
            let dropout = if enc_dropout { Some(&mut *rng) } else { None };
            x = self.block(g, branch, &format!("enc.blk{b}"), x, batch, input_len, dropout)?;
        }
        self.layer_norm(g, branch, "enc.ln_f", x)
    }

    /// Build the decoder input from encoder latents: one row per original
    /// position (plus the leading slot), where every masked or dropped
    /// position receives the extra-token latent and every visible position
    /// its own latent, at its original index.
    pub fn assemble_decoder_input(
        &self,
        g: &mut Graph<T>,
        latents: Tensor,
        plans: &[MaskPlan],
        batch: usize,
    ) -> Result<Tensor> {
        let input_len = self.cfg.masked_input_len();
        let seq_len = self.cfg.seq_len;
        let shape = g.shape(latents).to_vec();
        if plans.len() != batch || shape != [batch * input_len, self.cfg.embed_dim] {
            return Err(SorcenError::invalid(format!(
                "assemble_decoder_input: latents {shape:?} with {} plans do not match batch {batch} x len {input_len}",
                plans.len()
            )));
        }
        let mut indices = Vec::with_capacity(batch * (seq_len + 1));
        for (b, plan) in plans.iter().enumerate() {
            if plan.seq_len() != seq_len {
                return Err(SorcenError::invalid(format!(
                    "assemble_decoder_input: plan covers {} positions, model expects {seq_len}",
                    plan.seq_len()
                )));
            }
            let base = b * input_len;
            let mut slot_of = vec![usize::MAX; seq_len];
            for (slot, &pos) in plan.retained.iter().enumerate() {
                slot_of[pos] = slot;
            }
            indices.push(base); // leading slot carries the extra-token latent
            for pos in 0..seq_len {
                if plan.needs_placeholder(pos) {
                    indices.push(base);
                } else {
                    debug_assert_ne!(slot_of[pos], usize::MAX);
                    indices.push(base + 1 + slot_of[pos]);
                }
            }
        }
        g.select_rows(latents, &indices)
    }

    /// Decode per-position vocabulary logits from an assembled sequence.
    /// The leading slot's output is discarded; rows come back as
    /// `(batch * seq_len, vocab)`.
    pub fn decode_logits(
        &self,
        g: &mut Graph<T>,
        assembled: Tensor,
        batch: usize,
        train: bool,
        rng: &mut Prng,
    ) -> Result<Tensor> {
        let full = self.cfg.full_input_len();
        let shape = g.shape(assembled).to_vec();
        if shape != [batch * full, self.cfg.embed_dim] {
            return Err(SorcenError::invalid(format!(
                "decode_logits: assembled shape {shape:?} does not match batch {batch} x len {full}"
            )));
        }
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..full).collect();
        let pos_table = self.lease(g, Branch::Student, "dec.pos_emb")?;
        let pos = g.embedding(pos_table, &positions)?;
        let mut x = g.add(assembled, pos)?;
        let dec_dropout = train && self.cfg.dropout_site.in_decoder() && self.cfg.dropout > 0.0;
        for b in 0..self.cfg.dec_depth {
            let dropout = if dec_dropout { Some(&mut *rng) } else { None };
            x = self.block(g, Branch::Student, &format!("dec.blk{b}"), x, batch, full, dropout)?;
        }
        let x = self.layer_norm(g, Branch::Student, "dec.ln_f", x)?;
        // drop the leading slot of every sample
        let keep: Vec<usize> = (0..batch)
            .flat_map(|b| (1..full).map(move |i| b * full + i))
            .collect();
        let x = g.select_rows(x, &keep)?;
        self.linear(g, Branch::Student, "dec.out", x)
    }

    /// Global average pool over all positions (the extra-token latent
    /// included), then project, then — on the student branch when enabled —
    /// predict, then L2-normalize.
    #[allow(clippy::too_many_arguments)]
    pub fn pool_project_predict(
        &self,
        g: &mut Graph<T>,
        latents: Tensor,
        batch: usize,
        input_len: usize,
        branch: Branch,
        use_predictor: bool,
    ) -> Result<Tensor> {
        let shape = g.shape(latents).to_vec();
        if shape != [batch * input_len, self.cfg.embed_dim] {
            return Err(SorcenError::invalid(format!(
                "pool_project_predict: latents {shape:?} do not match batch {batch} x len {input_len}"
            )));
        }
        let x3 = g.reshape(latents, &[batch, input_len, self.cfg.embed_dim])?;
        let mut x = g.mean_axis(x3, 1)?;
        for layer in 0..self.cfg.projector_depth {
            if layer > 0 {
                x = g.gelu(x);
            }
            x = self.linear(g, branch, &format!("proj.fc{}", layer + 1), x)?;
        }
        if branch == Branch::Student && use_predictor {
            for layer in 0..self.cfg.predictor_depth {
                if layer > 0 {
                    x = g.gelu(x);
                }
                x = self.linear(g, branch, &format!("pred.fc{}", layer + 1), x)?;
            }
        }
        Ok(g.l2_normalize(x))
    }

    /// `teacher <- m * teacher + (1 - m) * student`, parameter-wise, over
    /// the encoder and projector.
    pub fn ema_update(&mut self, momentum: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(SorcenError::invalid(format!("EMA momentum {momentum} outside [0, 1]")));
        }
        let m = T::of_f64(momentum);
        let one_minus = T::of_f64(1.0 - momentum);
        for (name, t) in self.teacher.iter_mut() {
            let s = self
                .student
                .get(name)
                .ok_or_else(|| SorcenError::invalid(format!("teacher parameter {name:?} missing from student")))?;
            ndarray::Zip::from(&mut t.values).and(&s.values).for_each(|tv, sv| {
                *tv = m * *tv + one_minus * *sv;
            });
        }
        Ok(())
    }
}

/// Position ids for a Mask&Drop input: 0 for the extra token, original
/// index + 1 for each retained position.
pub fn anchor_position_ids(plan: &MaskPlan) -> Vec<usize> {
    std::iter::once(0).chain(plan.retained.iter().map(|&p| p + 1)).collect()
}

/// Position ids for a full sequence with the extra token prepended.
pub fn full_position_ids(seq_len: usize) -> Vec<usize> {
    (0..=seq_len).collect()
}

/// Prepend the extra token to a full token sequence.
pub fn with_extra_token(ids: &[u32], vocab: u32) -> Vec<u32> {
    std::iter::once(crate::masking::extra_token(vocab)).chain(ids.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{mask_and_drop, MaskRatio};

    fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            embed_dim: 16,
            enc_depth: 2,
            dec_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            projector_width: 12,
            projector_depth: 2,
            predictor_depth: 2,
            vocab: 11,
            seq_len: 16,
            dropout: 0.0,
            dropout_site: DropoutSite::Decoder,
        }
    }

    fn batch_inputs(
        model: &Model<f64>,
        batch: usize,
        seed: u64,
    ) -> (Vec<u32>, Vec<usize>, Vec<MaskPlan>) {
        let mut rng = Prng::seeded(seed);
        let cfg = &model.cfg;
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut plans = Vec::new();
        for _ in 0..batch {
            let ids: Vec<u32> = (0..cfg.seq_len).map(|_| rng.below(cfg.vocab as u64) as u32).collect();
            let (input, plan) = mask_and_drop(&ids, cfg.vocab, &MaskRatio::default(), &mut rng).unwrap();
            positions.extend(anchor_position_ids(&plan));
            tokens.extend(input);
            plans.push(plan);
        }
        (tokens, positions, plans)
    }

    #[test]
    fn encode_output_length_matches_input_length() {
        let mut rng = Prng::seeded(1);
        let model = Model::<f64>::init(small_cfg(), &mut rng).unwrap();
        let (tokens, positions, _) = batch_inputs(&model, 3, 7);
        let mut g = Graph::new();
        let out = model
            .encode(&mut g, Branch::Student, &tokens, &positions, 3, model.cfg.masked_input_len(), false, &mut rng)
            .unwrap();
        assert_eq!(g.shape(out), &[3 * model.cfg.masked_input_len(), 16]);
    }

    #[test]
    fn encode_rejects_wrong_length() {
        let mut rng = Prng::seeded(2);
        let model = Model::<f64>::init(small_cfg(), &mut rng).unwrap();
        let mut g = Graph::new();
        let err = model.encode(&mut g, Branch::Student, &[0, 1, 2], &[0, 1, 2], 1, 9, false, &mut rng);
        assert!(err.is_err());
    }

    #[test]
    fn eval_mode_is_deterministic_and_batch_independent() {
        let mut rng = Prng::seeded(3);
        let model = Model::<f64>::init(small_cfg(), &mut rng).unwrap();
        let (tokens, positions, _) = batch_inputs(&model, 2, 11);
        let len = model.cfg.masked_input_len();
        let run = |tokens: &[u32], positions: &[usize], batch: usize| {
            let mut g = Graph::inference();
            let mut rng = Prng::seeded(0);
            let out = model
                .encode(&mut g, Branch::Student, tokens, positions, batch, len, false, &mut rng)
                .unwrap();
            g.values(out).clone()
        };
        let both = run(&tokens, &positions, 2);
        let again = run(&tokens, &positions, 2);
        assert_eq!(both, again);
        // permuting the batch permutes outputs identically
        let swapped_tokens: Vec<u32> =
            tokens[len..].iter().chain(tokens[..len].iter()).copied().collect();
        let swapped_positions: Vec<usize> =
            positions[len..].iter().chain(positions[..len].iter()).copied().collect();
        let swapped = run(&swapped_tokens, &swapped_positions, 2);
        let d = model.cfg.embed_dim;
        for row in 0..len {
            for col in 0..d {
                assert_eq!(both[[row, col]], swapped[[len + row, col]]);
                assert_eq!(both[[len + row, col]], swapped[[row, col]]);
            }
        }
    }

    #[test]
    fn assembly_places_every_visible_latent_at_its_original_index() {
        let mut rng = Prng::seeded(4);
        let model = Model::<f64>::init(small_cfg(), &mut rng).unwrap();
        let cfg = &model.cfg;
        let (_, _, plans) = batch_inputs(&model, 2, 13);
        let input_len = cfg.masked_input_len();
        // tag latent rows with their (sample, slot) identity
        let mut g = Graph::new();
        let mut tagged = ndarray::Array2::<f64>::zeros((2 * input_len, cfg.embed_dim));
        for r in 0..2 * input_len {
            tagged[[r, 0]] = r as f64;
        }
        let latents = g.leaf(tagged.into_dyn(), false);
        let s = model.assemble_decoder_input(&mut g, latents, &plans, 2).unwrap();
        let sv = g.values(s);
        let full = cfg.full_input_len();
        for (b, plan) in plans.iter().enumerate() {
            let base = (b * input_len) as f64;
            assert_eq!(sv[[b * full, 0]], base);
            let mut seen = vec![false; input_len];
            for pos in 0..cfg.seq_len {
                let tag = sv[[b * full + 1 + pos, 0]];
                if plan.mask[pos] {
                    assert_eq!(tag, base, "masked/dropped position {pos} must carry the shared latent");
                } else {
                    let slot = (tag - base) as usize - 1;
                    assert_eq!(plan.retained[slot], pos, "latent landed at the wrong index");
                    assert!(!seen[slot], "latent used twice");
                    seen[slot] = true;
                }
            }
        }
    }

    #[test]
    fn decode_logits_shape_and_finiteness() {
        let mut rng = Prng::seeded(5);
        let model = Model::<f64>::init(small_cfg(), &mut rng).unwrap();
        let (tokens, positions, plans) = batch_inputs(&model, 2, 17);
        let mut g = Graph::new();
        let latents = model
            .encode(&mut g, Branch::Student, &tokens, &positions, 2, model.cfg.masked_input_len(), false, &mut rng)
            .unwrap();
        let s = model.assemble_decoder_input(&mut g, latents, &plans, 2).unwrap();
        let logits = model.decode_logits(&mut g, s, 2, false, &mut rng).unwrap();
        assert_eq!(g.shape(logits), &[2 * model.cfg.seq_len, model.cfg.vocab as usize]);
        assert!(g.values(logits).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pooled_projections_are_unit_norm_and_branches_differ() {
        let mut rng = Prng::seeded(6);
        let model = Model::<f64>::init(small_cfg(), &mut rng).unwrap();
        let cfg = model.cfg.clone();
        let ids: Vec<u32> = (0..cfg.seq_len).map(|_| rng.below(cfg.vocab as u64) as u32).collect();
        let tokens = with_extra_token(&ids, cfg.vocab);
        let positions = full_position_ids(cfg.seq_len);
        let len = cfg.full_input_len();
        let mut g = Graph::new();
        let s_lat = model
            .encode(&mut g, Branch::Student, &tokens, &positions, 1, len, false, &mut rng)
            .unwrap();
        let t_lat = model
            .encode(&mut g, Branch::Teacher, &tokens, &positions, 1, len, false, &mut rng)
            .unwrap();
        // identical weights at init: latents agree
        assert_eq!(g.values(s_lat), g.values(t_lat));
        let z = model.pool_project_predict(&mut g, s_lat, 1, len, Branch::Student, true).unwrap();
        let z_t = model.pool_project_predict(&mut g, t_lat, 1, len, Branch::Teacher, false).unwrap();
        let norm = |v: &ndarray::ArrayD<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm(g.values(z)) - 1.0).abs() < 1e-6);
        assert!((norm(g.values(z_t)) - 1.0).abs() < 1e-6);
        // the predictor makes the student head structurally different
        assert_ne!(g.values(z), g.values(z_t));
    }

    #[test]
    fn pooling_of_constant_latents_is_identity() {
        let mut rng = Prng::seeded(7);
        let model = Model::<f64>::init(small_cfg(), &mut rng).unwrap();
        let mut g = Graph::new();
        let latents = g.constant(ArrayD::from_elem(IxDyn(&[5, model.cfg.embed_dim]), 0.7));
        let x3 = g.reshape(latents, &[1, 5, model.cfg.embed_dim]).unwrap();
        let pooled = g.mean_axis(x3, 1).unwrap();
        for &v in g.values(pooled).iter() {
            assert!((v - 0.7f64).abs() < 1e-15);
        }
    }

    #[test]
    fn ema_moves_teacher_toward_student() {
        let mut rng = Prng::seeded(8);
        let mut model = Model::<f64>::init(small_cfg(), &mut rng).unwrap();
        // force teacher to zero, student to one, on one parameter
        let name = "enc.tok_emb";
        model.teacher.get_mut(name).unwrap().values.fill(0.0);
        model.student.get_mut(name).unwrap().values.fill(1.0);
        model.ema_update(0.996).unwrap();
        let t = &model.teacher.get(name).unwrap().values;
        for v in t.iter() {
            assert!((v - 0.004).abs() < 1e-12);
        }
        // m = 1 leaves the teacher unchanged
        let snapshot = t.clone();
        model.ema_update(1.0).unwrap();
        assert_eq!(&model.teacher.get(name).unwrap().values, &snapshot);
        // m = 0 copies the student exactly
        model.ema_update(0.0).unwrap();
        let t = &model.teacher.get(name).unwrap().values;
        let s = &model.student.get(name).unwrap().values;
        assert_eq!(t, s);
    }

    #[test]
    fn teacher_holds_exactly_encoder_and_projector_names() {
        let mut rng = Prng::seeded(9);
        let model = Model::<f64>::init(small_cfg(), &mut rng).unwrap();
        for name in model.teacher.names() {
            assert!(is_teacher_param(name));
            assert!(model.student.contains(name));
        }
        assert!(model.teacher.names().all(|n| !n.starts_with("pred.")));
        let student_teacher_names =
            model.student.names().filter(|n| is_teacher_param(n)).count();
        assert_eq!(student_teacher_names, model.teacher.len());
    }
}
