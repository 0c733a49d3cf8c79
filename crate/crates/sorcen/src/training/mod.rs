//! The pre-training loop: per-step action sequence, optimizer and schedule
//! wiring, metrics logging, checkpointing, and deterministic resume.
//!
//! Every random decision in a run derives from `(seed, stream, step,
//! sample)` through the splittable generator, so a trainer restored from a
//! checkpoint at step `k` continues exactly as the uninterrupted run would
//! have.

mod config;
mod optim;
mod schedule;

pub use config::{parse_kv, TrainConfig};
pub use optim::{clip_global_norm, decays, global_grad_norm, AdamW};
pub use schedule::{ema_momentum_at, lr_at};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::{Graph, ParamStore, Scalar};
use crate::data::TokenSequence;
use crate::error::{Result, SorcenError};
use crate::masking::{default_jsm_range, jittered_spatial_mask, mask_and_drop, MaskRatio};
use crate::model::{
    anchor_position_ids, full_position_ids, read_checkpoint, with_extra_token, write_checkpoint,
    Branch, Model, TrainMeta,
};
use crate::objectives::{
    combined_loss, contrastive_loss, echo_active, recon_loss, sample_echo, LossConfig,
};
use crate::rng::Prng;

// rng stream tags
const STREAM_SHUFFLE: u64 = 1;
const STREAM_MASK: u64 = 2;
const STREAM_ECHO: u64 = 3;
const STREAM_JSM: u64 = 4;
const STREAM_DROPOUT: u64 = 5;

/// Seconds spent in each stage of one training step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimes {
    pub mask: f64,
    pub encode: f64,
    pub decode: f64,
    pub echo: f64,
    pub teacher: f64,
    pub backward: f64,
    pub optimizer: f64,
}

impl StageTimes {
    pub fn accumulate(&mut self, other: &StageTimes) {
        self.mask += other.mask;
        self.encode += other.encode;
        self.decode += other.decode;
        self.echo += other.echo;
        self.teacher += other.teacher;
        self.backward += other.backward;
        self.optimizer += other.optimizer;
    }
}

#[derive(Debug, Clone)]
pub struct StepStats {
    /// 0-based index of the step that just ran.
    pub step: u64,
    pub lr: f64,
    pub recon: f64,
    pub contrastive: Option<f64>,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub ema_momentum: f64,
    pub stages: StageTimes,
}

pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub train_cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    pub opt_m: ParamStore<T>,
    pub opt_v: ParamStore<T>,
    /// Completed steps.
    pub step: u64,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    /// How many teacher forward passes have run (echo warmup leaves this 0).
    pub teacher_forward_count: u64,
    root: Prng,
}

fn zeros_like<T: Scalar>(store: &ParamStore<T>) -> ParamStore<T> {
    let mut out = ParamStore::new();
    for (name, p) in store.iter() {
        out.insert(name, ndarray::ArrayD::zeros(p.values.raw_dim())).expect("unique names");
    }
    out
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        model: Model<T>,
        train_cfg: TrainConfig,
        loss_cfg: LossConfig,
        dataset_len: usize,
    ) -> Result<Self> {
        train_cfg.validate()?;
        loss_cfg.validate(model.cfg.vocab)?;
        if loss_cfg.echo && loss_cfg.echo_warmup_epochs > train_cfg.epochs {
            return Err(SorcenError::invalid(format!(
                "echo warmup ({} epochs) exceeds total epochs ({})",
                loss_cfg.echo_warmup_epochs, train_cfg.epochs
            )));
        }
        if loss_cfg.echo && loss_cfg.jsm {
            let grid = (model.cfg.seq_len as f64).sqrt() as usize;
            if grid * grid != model.cfg.seq_len {
                return Err(SorcenError::invalid(format!(
                    "JSM needs a square token grid; seq_len {} is not a square",
                    model.cfg.seq_len
                )));
            }
        }
        let steps_per_epoch = (dataset_len / train_cfg.batch_size) as u64;
        if steps_per_epoch == 0 {
            return Err(SorcenError::invalid(format!(
                "batch size {} exceeds dataset size {dataset_len}",
                train_cfg.batch_size
            )));
        }
        let opt_m = zeros_like(&model.student);
        let opt_v = zeros_like(&model.student);
        let root = Prng::seeded(train_cfg.seed);
        let total_steps = steps_per_epoch * train_cfg.epochs;
        Ok(Trainer {
            model,
            train_cfg,
            loss_cfg,
            opt_m,
            opt_v,
            step: 0,
            steps_per_epoch,
            total_steps,
            teacher_forward_count: 0,
            root,
        })
    }

    /// Restore a trainer mid-run. The stored config text reconstructs the
    /// training and loss configuration; the step counter and seed make the
    /// continuation identical to the uninterrupted run.
    pub fn from_checkpoint(path: impl AsRef<Path>, dataset_len: usize) -> Result<Self> {
        let data = read_checkpoint::<T>(path.as_ref())?;
        let mut train_cfg = TrainConfig::default();
        let mut loss_cfg = LossConfig::default();
        for (key, value) in parse_kv(&data.meta.config_text)? {
            if train_cfg.apply_kv(&key, &value).is_ok() {
                continue;
            }
            apply_loss_kv(&mut loss_cfg, &key, &value)?;
        }
        let model = Model { cfg: data.cfg, student: data.student, teacher: data.teacher };
        let mut trainer = Trainer::new(model, train_cfg, loss_cfg, dataset_len)?;
        trainer.opt_m = data.opt_m;
        trainer.opt_v = data.opt_v;
        trainer.step = data.meta.step;
        Ok(trainer)
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch.max(1)
    }

    fn mask_dist(&self) -> MaskRatio {
        MaskRatio {
            mean: self.train_cfg.mask_mean,
            std: self.train_cfg.mask_std,
            min: self.train_cfg.mask_min,
            max: self.train_cfg.mask_max,
        }
    }

    /// Run the full per-step action sequence on one batch of sequences.
    pub fn train_step(&mut self, batch: &[&[u32]]) -> Result<StepStats> {
        let cfg = self.model.cfg.clone();
        let b = batch.len();
        if b == 0 {
            return Err(SorcenError::invalid("empty batch"));
        }
        for ids in batch {
            if ids.len() != cfg.seq_len {
                return Err(SorcenError::invalid(format!(
                    "batch sequence length {} does not match model seq_len {}",
                    ids.len(),
                    cfg.seq_len
                )));
            }
        }
        let step = self.step;
        let epoch = self.epoch();
        let mut stages = StageTimes::default();
        self.model.student.zero_grads();

        // mask planning
        let t0 = Instant::now();
        let dist = self.mask_dist();
        let input_len = cfg.masked_input_len();
        let mut anchor_tokens = Vec::with_capacity(b * input_len);
        let mut anchor_positions = Vec::with_capacity(b * input_len);
        let mut plans = Vec::with_capacity(b);
        let mut targets = Vec::with_capacity(b * cfg.seq_len);
        let mut mask_flags = Vec::with_capacity(b * cfg.seq_len);
        for (i, ids) in batch.iter().enumerate() {
            let mut rng = self.root.split(STREAM_MASK).split(step).split(i as u64);
            let (input, plan) = mask_and_drop(ids, cfg.vocab, &dist, &mut rng)?;
            anchor_positions.extend(anchor_position_ids(&plan));
            anchor_tokens.extend(input);
            targets.extend_from_slice(ids);
            mask_flags.extend_from_slice(&plan.mask);
            plans.push(plan);
        }
        stages.mask = t0.elapsed().as_secs_f64();

        let mut graph = Graph::<T>::new();
        let mut dropout_rng = self.root.split(STREAM_DROPOUT).split(step);

        // student encode
        let t1 = Instant::now();
        let latents = self.model.encode(
            &mut graph,
            Branch::Student,
            &anchor_tokens,
            &anchor_positions,
            b,
            input_len,
            true,
            &mut dropout_rng,
        )?;
        stages.encode = t1.elapsed().as_secs_f64();

        // decoder path and reconstruction loss
        let t2 = Instant::now();
        let assembled = self.model.assemble_decoder_input(&mut graph, latents, &plans, b)?;
        let logits = self.model.decode_logits(&mut graph, assembled, b, true, &mut dropout_rng)?;
        let recon = recon_loss(&mut graph, logits, &targets, &mask_flags, self.loss_cfg.label_smoothing)?;
        stages.decode = t2.elapsed().as_secs_f64();

        // echo branch
        let echo_on = self.loss_cfg.lambda > 0.0 && echo_active(&self.loss_cfg, epoch);
        let mut contrastive = None;
        if echo_on {
            let t3 = Instant::now();
            let mut echo_rng = self.root.split(STREAM_ECHO).split(step);
            let mut echo =
                sample_echo(graph.values(logits), b, cfg.seq_len, self.loss_cfg.top_k, &mut echo_rng)?;
            let full_len = cfg.full_input_len();
            let mut teacher_tokens = Vec::with_capacity(b * full_len);
            let mut teacher_positions = Vec::with_capacity(b * full_len);
            let grid = (cfg.seq_len as f64).sqrt() as usize;
            for (i, echo_ids) in echo.tokens.iter().enumerate() {
                let visible = if self.loss_cfg.jsm {
                    let mut rng = self.root.split(STREAM_JSM).split(step).split(i as u64);
                    let (masked, plan) = jittered_spatial_mask(
                        echo_ids,
                        grid,
                        default_jsm_range(grid),
                        cfg.vocab,
                        &mut rng,
                    )?;
                    echo.jsm_plans.push(plan);
                    masked
                } else {
                    echo_ids.clone()
                };
                teacher_tokens.extend(with_extra_token(&visible, cfg.vocab));
                teacher_positions.extend(full_position_ids(cfg.seq_len));
            }
            stages.echo = t3.elapsed().as_secs_f64();

            let t4 = Instant::now();
            let teacher_latents = self.model.encode(
                &mut graph,
                Branch::Teacher,
                &teacher_tokens,
                &teacher_positions,
                b,
                full_len,
                false,
                &mut dropout_rng,
            )?;
            self.teacher_forward_count += 1;
            let z_teacher =
                self.model
                    .pool_project_predict(&mut graph, teacher_latents, b, full_len, Branch::Teacher, false)?;
            stages.teacher = t4.elapsed().as_secs_f64();

            let z = self.model.pool_project_predict(
                &mut graph,
                latents,
                b,
                input_len,
                Branch::Student,
                self.loss_cfg.predictor,
            )?;
            contrastive = Some(contrastive_loss(
                &mut graph,
                z,
                z_teacher,
                self.loss_cfg.temperature,
                self.loss_cfg.uniformity,
                self.loss_cfg.variant,
            )?);
        }

        let total = combined_loss(&mut graph, recon, contrastive, self.loss_cfg.lambda)?;
        let recon_v = graph.values(recon)[[0]].as_f64();
        let contrast_v = contrastive.map(|c| graph.values(c)[[0]].as_f64());
        let total_v = graph.values(total)[[0]].as_f64();
        if !total_v.is_finite() {
            return Err(SorcenError::NonFinite {
                context: format!(
                    "loss at step {step} (recon {recon_v}, contrastive {contrast_v:?})"
                ),
                coordinate: None,
            });
        }

        // backward
        let t5 = Instant::now();
        graph.backward(total)?;
        graph.export_grads(&mut self.model.student)?;
        stages.backward = t5.elapsed().as_secs_f64();
        drop(graph);

        // clip, update, EMA
        let t6 = Instant::now();
        let grad_norm = clip_global_norm(&mut self.model.student, self.train_cfg.grad_clip);
        let lr = lr_at(step, self.train_cfg.peak_lr(), self.warmup_steps(), self.total_steps);
        let opt = AdamW {
            beta1: self.train_cfg.beta1,
            beta2: self.train_cfg.beta2,
            weight_decay: self.train_cfg.weight_decay,
        };
        opt.step(&mut self.model.student, &mut self.opt_m, &mut self.opt_v, lr, step + 1)?;
        let ema_momentum = ema_momentum_at(step, self.total_steps, self.train_cfg.ema_base);
        self.model.ema_update(ema_momentum)?;
        stages.optimizer = t6.elapsed().as_secs_f64();

        self.step += 1;
        Ok(StepStats {
            step,
            lr,
            recon: recon_v,
            contrastive: contrast_v,
            total: total_v,
            grad_norm,
            ema_momentum,
            stages,
        })
    }

    fn warmup_steps(&self) -> u64 {
        self.train_cfg.lr_warmup_epochs * self.steps_per_epoch
    }

    /// Deterministic per-epoch shuffle of record indices.
    pub fn epoch_permutation(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut rng = self.root.split(STREAM_SHUFFLE).split(epoch);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        perm
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut config_text = self.train_cfg.to_kv();
        config_text.push_str(&loss_to_kv(&self.loss_cfg));
        let meta = TrainMeta {
            step: self.step,
            epoch: self.epoch(),
            seed: self.train_cfg.seed,
            config_text,
        };
        write_checkpoint(
            path,
            &self.model.cfg,
            &meta,
            &self.model.student,
            &self.model.teacher,
            &self.opt_m,
            &self.opt_v,
        )
    }
}

/// Output locations for [`run_training`].
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl RunPaths {
    pub fn timing(&self) -> PathBuf {
        self.metrics.with_extension("timing.csv")
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps_run: u64,
    pub final_total: f64,
    pub wall_s: f64,
    pub stages: StageTimes,
}

pub const METRICS_HEADER: &str = "step,lr,recon,contrast,total,grad_norm,ema_momentum";

pub fn metrics_line(s: &StepStats) -> String {
    let contrast = s.contrastive.map(|c| c.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{}",
        s.step, s.lr, s.recon, contrast, s.total, s.grad_norm, s.ema_momentum
    )
}

/// Epoch-shuffled training over the whole record set, from the trainer's
/// current step to the end of the schedule. Metrics go to one CSV line per
/// step; wall-clock timings live in a sibling file so the metrics file
/// stays byte-identical across equal-seed runs.
pub fn run_training<T: Scalar>(
    trainer: &mut Trainer<T>,
    records: &[TokenSequence],
    paths: &RunPaths,
) -> Result<RunSummary> {
    if records.is_empty() {
        return Err(SorcenError::invalid("training dataset is empty"));
    }
    for r in records {
        if r.len() != trainer.model.cfg.seq_len {
            return Err(SorcenError::invalid(format!(
                "record length {} does not match model seq_len {}",
                r.len(),
                trainer.model.cfg.seq_len
            )));
        }
    }
    let io_err = |p: &Path, e: std::io::Error| SorcenError::io(p.display().to_string(), e);
    let mut metrics = std::io::BufWriter::new(
        std::fs::File::create(&paths.metrics).map_err(|e| io_err(&paths.metrics, e))?,
    );
    let timing_path = paths.timing();
    let mut timing = std::io::BufWriter::new(
        std::fs::File::create(&timing_path).map_err(|e| io_err(&timing_path, e))?,
    );
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| io_err(&paths.metrics, e))?;
    writeln!(timing, "step,wall_s").map_err(|e| io_err(&timing_path, e))?;

    let started = Instant::now();
    let batch = trainer.train_cfg.batch_size;
    let mut perm: Vec<usize> = Vec::new();
    let mut perm_epoch = u64::MAX;
    let mut stages = StageTimes::default();
    let mut steps_run = 0u64;
    let mut final_total = f64::NAN;
    while trainer.step < trainer.total_steps {
        let epoch = trainer.epoch();
        if epoch != perm_epoch {
            perm = trainer.epoch_permutation(epoch, records.len());
            perm_epoch = epoch;
        }
        let within = (trainer.step % trainer.steps_per_epoch) as usize;
        let slice = &perm[within * batch..(within + 1) * batch];
        let batch_refs: Vec<&[u32]> = slice.iter().map(|&i| records[i].ids.as_slice()).collect();
        let step_started = Instant::now();
        let stats = trainer.train_step(&batch_refs)?;
        writeln!(metrics, "{}", metrics_line(&stats)).map_err(|e| io_err(&paths.metrics, e))?;
        writeln!(timing, "{},{:.6}", stats.step, step_started.elapsed().as_secs_f64())
            .map_err(|e| io_err(&timing_path, e))?;
        stages.accumulate(&stats.stages);
        final_total = stats.total;
        steps_run += 1;
        if trainer.train_cfg.checkpoint_every > 0
            && trainer.step % trainer.train_cfg.checkpoint_every == 0
        {
            trainer.save_checkpoint(&paths.checkpoint)?;
        }
    }
    trainer.save_checkpoint(&paths.checkpoint)?;
    metrics.flush().map_err(|e| io_err(&paths.metrics, e))?;
    timing.flush().map_err(|e| io_err(&timing_path, e))?;
    Ok(RunSummary { steps_run, final_total, wall_s: started.elapsed().as_secs_f64(), stages })
}

/// `key=value` form of a [`LossConfig`], shared by config files and
/// checkpoints.
pub fn loss_to_kv(cfg: &LossConfig) -> String {
    let mut s = String::new();
    s.push_str(&format!("lambda={}\n", cfg.lambda));
    s.push_str(&format!("temperature={}\n", cfg.temperature));
    s.push_str(&format!("top_k={}\n", cfg.top_k));
    s.push_str(&format!("label_smoothing={}\n", cfg.label_smoothing));
    s.push_str(&format!("echo_warmup_epochs={}\n", cfg.echo_warmup_epochs));
    s.push_str(&format!("loss_variant={}\n", cfg.variant.as_str()));
    s.push_str(&format!("uniformity={}\n", cfg.uniformity));
    s.push_str(&format!("predictor={}\n", cfg.predictor));
    s.push_str(&format!("echo={}\n", cfg.echo));
    s.push_str(&format!("jsm={}\n", cfg.jsm));
    s
}

/// Apply one `key=value` setting to a [`LossConfig`].
pub fn apply_loss_kv(cfg: &mut LossConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| SorcenError::invalid(format!("bad value {value:?} for config key {key:?}")))
    }
    match key {
        "lambda" => cfg.lambda = num(key, value)?,
        "temperature" => cfg.temperature = num(key, value)?,
        "top_k" => cfg.top_k = num(key, value)?,
        "label_smoothing" => cfg.label_smoothing = num(key, value)?,
        "echo_warmup_epochs" => cfg.echo_warmup_epochs = num(key, value)?,
        "loss_variant" => cfg.variant = crate::objectives::LossVariant::parse(value)?,
        "uniformity" => cfg.uniformity = num(key, value)?,
        "predictor" => cfg.predictor = num(key, value)?,
        "echo" => cfg.echo = num(key, value)?,
        "jsm" => cfg.jsm = num(key, value)?,
        other => return Err(SorcenError::invalid(format!("unknown loss config key {other:?}"))),
    }
    Ok(())
}
