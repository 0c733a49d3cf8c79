//! Unified self-supervised learning on precomputed semantic tokens.
//!
//! The crate trains a token transformer with two cooperating objectives —
//! masked semantic reconstruction and Echo Contrast, a contrastive loss whose
//! positive pairs are sampled from the model's own reconstruction logits —
//! then evaluates the result both discriminatively (linear probe, k-NN,
//! few-shot) and generatively (iterative decoding, token-space Fréchet
//! distance). Everything runs on CPU from bit-packed `.stok` token datasets;
//! no pixel pipeline or external tokenizer is involved at training time.
//!
//! The layers, bottom to top:
//!
//! * [`autodiff`] — a reverse-mode tape over dense arrays (f32 or f64).
//! * [`data`] — the `.stok` bit-packed dataset format and a synthetic
//!   token generator for desk-scale experiments.
//! * [`masking`] — Mask&Drop input corruption and jittered spatial masking.
//! * [`model`] — student encoder/decoder, projector and predictor heads,
//!   and the EMA teacher.
//! * [`objectives`] — reconstruction, echo sampling, InfoNCE + uniformity.
//! * [`training`] — AdamW, schedules, the step loop, checkpoints.
//! * [`generation`] — iterative decoding, inpainting, PNG export.
//! * [`evaluation`] — feature extraction, probes, k-NN, Fréchet distance.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod training;

pub use error::{Result, SorcenError};

/// Process (user seconds, system seconds, minor page faults) so far, from
/// procfs. Diagnostic aid for the bench command.
pub fn resource_usage() -> (f64, f64, u64) {
    let stat = match std::fs::read_to_string("/proc/self/stat") {
        Ok(s) => s,
        Err(_) => return (0.0, 0.0, 0),
    };
    // fields after the parenthesized command name
    let after = match stat.rsplit_once(") ") {
        Some((_, rest)) => rest,
        None => return (0.0, 0.0, 0),
    };
    let fields: Vec<&str> = after.split_whitespace().collect();
    let tick = 100.0; // CLK_TCK on this target
    let get = |i: usize| fields.get(i).and_then(|v| v.parse::<u64>().ok()).unwrap_or(0);
    let minflt = get(7);
    let utime = get(11) as f64 / tick;
    let stime = get(12) as f64 / tick;
    (utime, stime, minflt)
}

/// Training churns through the same multi-megabyte tape arrays every step;
/// an allocator that returns those pages to the kernel makes page-fault
/// time dominate the compute. jemalloc with decay disabled keeps them.
#[global_allocator]
static ALLOC: tikv_jemallocator::Jemalloc = tikv_jemallocator::Jemalloc;

#[allow(non_upper_case_globals)]
#[export_name = "malloc_conf"]
pub static MALLOC_CONF: &[u8] = b"dirty_decay_ms:-1,muzzy_decay_ms:-1\0";

pub(crate) fn tune_allocator() {}

// dense arrays appear throughout the public API
pub use ndarray;



