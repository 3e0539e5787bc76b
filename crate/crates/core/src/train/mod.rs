//! Optimisation loop, evaluation, checkpoints and the ablation grid.

pub mod ablate;
mod checkpoint;
mod config;
mod optim;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, Manifest, TensorEntry, CONFIG_FILE, MANIFEST_FILE, TENSORS_FILE};
pub use config::{fingerprint_of, write_fingerprint, TrainConfig};
pub use optim::{adamw_step, cosine_lr, AdamConfig, AdamHyper, AdamState, UpdateStats};

use crate::data::{generate, make_split, Split, TaskConfig};
use crate::error::{Error, Result};
use crate::loss::{loss_on_tape, LossConfig};
use crate::model::{forward, ModelParams, MultimodalBatch, RecursionConfig};
use crate::numerics::{Scalar, Tensor};

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Eval,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: SplitKind,
    /// 1-based recursion step.
    pub r: usize,
    pub ce_raw: f64,
    pub ce_adjusted: f64,
    pub accuracy: f64,
    pub degraded_fraction: f64,
}

/// Per-recursion-step evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEval {
    pub r: usize,
    pub ce_raw: f64,
    /// Mean per-token loss after the monotonic penalty against step `r - 1`.
    pub ce_adjusted: f64,
    /// Share of samples whose every answer token is predicted by argmax.
    pub accuracy: f64,
    pub degraded_fraction: f64,
    pub tokens: usize,
    pub samples: usize,
}

impl StepEval {
    fn record(&self, step: u64, split: SplitKind) -> MetricRecord {
        MetricRecord {
            step,
            split,
            r: self.r,
            ce_raw: self.ce_raw,
            ce_adjusted: self.ce_adjusted,
            accuracy: self.accuracy,
            degraded_fraction: self.degraded_fraction,
        }
    }
}

#[derive(Default)]
struct StepAccumulator {
    ce: f64,
    adjusted: f64,
    degraded: usize,
    tokens: usize,
    correct: usize,
    samples: usize,
}

/// Accumulates masked per-token statistics for every step of one batch.
fn accumulate<T: Scalar>(
    acc: &mut [StepAccumulator],
    batch: &MultimodalBatch,
    losses: &[Vec<f64>],
    logits: &[&Tensor<T>],
    beta: f64,
) {
    let mask = batch.loss_mask();
    let targets = batch.targets();
    for (r, a) in acc.iter_mut().enumerate() {
        let cur = &losses[r];
        for i in (0..mask.len()).filter(|&i| mask[i]) {
            a.ce += cur[i];
            a.tokens += 1;
            if r > 0 && cur[i] > losses[r - 1][i] {
                a.degraded += 1;
                a.adjusted += beta * cur[i];
            } else {
                a.adjusted += cur[i];
            }
        }
        let vocab = logits[r].cols();
        let mut row = 0;
        for seq in &batch.sequences {
            let mut all = true;
            let mut any = false;
            for (j, &m) in seq.loss_mask.iter().enumerate() {
                if m {
                    any = true;
                    let l = &logits[r].data()[(row + j) * vocab..][..vocab];
                    let best = argmax(l);
                    all &= best == targets[row + j];
                }
            }
            if any {
                a.samples += 1;
                a.correct += usize::from(all);
            }
            row += seq.n_t();
        }
    }
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn finish(acc: Vec<StepAccumulator>) -> Result<Vec<StepEval>> {
    acc.into_iter()
        .enumerate()
        .map(|(r, a)| {
            if a.tokens == 0 {
                return Err(Error::EmptyMask);
            }
            let n = a.tokens as f64;
            Ok(StepEval {
                r: r + 1,
                ce_raw: a.ce / n,
                ce_adjusted: a.adjusted / n,
                accuracy: a.correct as f64 / a.samples.max(1) as f64,
                degraded_fraction: a.degraded as f64 / n,
                tokens: a.tokens,
                samples: a.samples,
            })
        })
        .collect()
}

/// Evaluates `params` over `batches` at every recursion step up to
/// `recursion.steps`.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    batches: &[MultimodalBatch],
    recursion: &RecursionConfig,
    beta: f64,
) -> Result<Vec<StepEval>> {
    let mut acc: Vec<StepAccumulator> = (0..recursion.steps).map(|_| StepAccumulator::default()).collect();
    for batch in batches {
        let (tape, _, steps) = forward(params, batch, recursion)?;
        let losses: Vec<Vec<f64>> = steps.iter().map(|s| tape.value(s.token_losses).to_f64_vec()).collect();
        let logits: Vec<&Tensor<T>> = steps.iter().map(|s| tape.value(s.logits)).collect();
        accumulate(&mut acc, batch, &losses, &logits, beta);
    }
    finish(acc)
}

/// Builds batches of `batch_size` samples from `indices`.
pub fn make_batches(
    indices: &[u64],
    batch_size: usize,
    seed: u64,
    task: &TaskConfig,
) -> Result<Vec<MultimodalBatch>> {
    indices
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let samples: Vec<_> = chunk.iter().map(|&i| generate(seed, i, task)).collect();
            MultimodalBatch::from_samples(&samples)
        })
        .collect()
}

/// Train and eval data for a configuration.
pub struct RunData {
    pub split: Split,
    pub eval_batches: Vec<MultimodalBatch>,
}

impl RunData {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let split = make_split(config.seed, config.n_train, config.n_eval)?;
        let eval_batches = make_batches(&split.eval, config.eval_batch_size, config.seed, &config.task)?;
        Ok(RunData { split, eval_batches })
    }

    /// Training batch for the update that follows `step` completed updates.
    pub fn train_batch(&self, config: &TrainConfig, step: u64) -> Result<MultimodalBatch> {
        let n = self.split.train.len() as u64;
        let b = config.batch_size as u64;
        let samples: Vec<_> = (0..b)
            .map(|j| {
                let idx = self.split.train[((step * b + j) % n) as usize];
                generate(config.seed, idx, &config.task)
            })
            .collect();
        MultimodalBatch::from_samples(&samples)
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    /// Evaluation after the final update.
    pub final_eval: Vec<StepEval>,
}

/// Result of one optimiser update.
pub struct UpdateReport {
    pub train: Vec<StepEval>,
    pub total_loss: f64,
    pub stats: UpdateStats,
}

/// Runs forward, backward and one AdamW update on `batch`.
pub fn train_step(
    params: &mut ModelParams<f32>,
    state: &mut AdamState<f32>,
    batch: &MultimodalBatch,
    recursion: &RecursionConfig,
    loss: &LossConfig,
    hyper: &AdamHyper,
) -> Result<UpdateReport> {
    let (mut tape, bound, steps) = forward(params, batch, recursion)?;
    let token_losses: Vec<_> = steps.iter().map(|s| s.token_losses).collect();
    let mask = batch.loss_mask();
    let (total, breakdown) = loss_on_tape(&mut tape, &token_losses, &mask, loss).map_err(|e| match e {
        Error::NonFinite { .. } => Error::Diverged {
            step: state.step + 1,
            reason: "non-finite loss".into(),
        },
        other => other,
    })?;

    let losses: Vec<Vec<f64>> = token_losses.iter().map(|&v| tape.value(v).to_f64_vec()).collect();
    let logits: Vec<&Tensor<f32>> = steps.iter().map(|s| tape.value(s.logits)).collect();
    let mut acc: Vec<StepAccumulator> = (0..recursion.steps).map(|_| StepAccumulator::default()).collect();
    accumulate(&mut acc, batch, &losses, &logits, loss.beta);
    let train = finish(acc)?;

    let mut grads = tape.backward(total)?;
    let leaves = bound.leaves();
    let mut grad_list = Vec::with_capacity(leaves.len());
    let mut decay = Vec::with_capacity(leaves.len());
    for &leaf in &leaves {
        let shape = tape.shape(leaf).to_vec();
        decay.push(shape.len() == 2);
        grad_list.push(grads.take(leaf).unwrap_or_else(|| Tensor::zeros(shape)));
    }
    drop(tape);
    let mut refs: Vec<&mut Tensor<f32>> = Vec::with_capacity(leaves.len());
    collect_mut(params, &mut refs);
    let stats = adamw_step(&mut refs, &grad_list, &decay, state, hyper)?;
    Ok(UpdateReport {
        train,
        total_loss: breakdown.total,
        stats,
    })
}

/// Trainable tensors in `visit` order.
fn collect_mut<'a>(params: &'a mut ModelParams<f32>, out: &mut Vec<&'a mut Tensor<f32>>) {
    out.push(&mut params.text_embedding);
    for b in &mut params.blocks {
        out.extend([
            &mut b.attn_norm,
            &mut b.wq,
            &mut b.wk,
            &mut b.wv,
            &mut b.wo,
            &mut b.mlp_norm,
            &mut b.w_up,
            &mut b.w_down,
        ]);
    }
    out.push(&mut params.head);
    for bank in &mut params.banks {
        for c in &mut bank.connectors {
            out.push(&mut c.rms_gain);
            out.extend(c.scale.as_mut());
            out.extend(c.w_up.as_mut());
            out.extend(c.w_down.as_mut());
        }
    }
}

fn init_state(params: &ModelParams<f32>) -> AdamState<f32> {
    let tensors: Vec<&Tensor<f32>> = params.named_tensors().into_iter().map(|(_, t)| t).collect();
    AdamState::new(&tensors)
}

/// Trains from the seeded initialisation. Every metric record is passed to
/// `sink` as soon as it exists.
pub fn train(config: &TrainConfig, sink: &mut dyn FnMut(&MetricRecord) -> Result<()>) -> Result<TrainOutcome> {
    config.validate()?;
    let data = RunData::new(config)?;
    let mut params = ModelParams::<f32>::init(&config.model, &config.recursion, config.seed)?;
    let mut state = init_state(&params);
    let mut metrics = Vec::new();
    let mut emit = |rec: MetricRecord, metrics: &mut Vec<MetricRecord>| -> Result<()> {
        sink(&rec)?;
        metrics.push(rec);
        Ok(())
    };

    let mut final_eval = None;
    for step in 0..config.steps {
        let hyper = AdamHyper {
            lr: cosine_lr(step, config.steps, config.warmup_steps, config.lr, config.min_lr),
            adam: config.adam.clone(),
            clip_norm: config.clip_norm(),
        };
        let batch = data.train_batch(config, step)?;
        let report = train_step(&mut params, &mut state, &batch, &config.recursion, &config.loss, &hyper)?;
        let done = step + 1;
        let due = done == config.steps || (config.eval_every > 0 && done % config.eval_every == 0);
        if due {
            for s in &report.train {
                emit(s.record(done, SplitKind::Train), &mut metrics)?;
            }
            let eval = evaluate(&params, &data.eval_batches, &config.recursion, config.loss.beta)?;
            for s in &eval {
                emit(s.record(done, SplitKind::Eval), &mut metrics)?;
            }
            log::info!(
                "step {done}/{}: loss {:.4} | eval {}",
                config.steps,
                report.total_loss,
                eval.iter()
                    .map(|s| format!("r{} ce {:.4} acc {:.3}", s.r, s.ce_raw, s.accuracy))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            if done == config.steps {
                final_eval = Some(eval);
            }
        } else {
            log::debug!("step {done}: loss {:.5} grad_norm {:.4}", report.total_loss, report.stats.grad_norm);
        }
    }
    let final_eval = match final_eval {
        Some(e) => e,
        None => {
            let eval = evaluate(&params, &data.eval_batches, &config.recursion, config.loss.beta)?;
            for s in &eval {
                emit(s.record(0, SplitKind::Eval), &mut metrics)?;
            }
            eval
        }
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            step: config.steps,
            params,
        },
        metrics,
        final_eval,
    })
}

/// Trains and writes `metrics.jsonl`, the checkpoint files and
/// `fingerprint.txt` into `out`.
pub fn train_to_dir(config: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_fingerprint(out, &config.fingerprint())?;
    let path = out.join(METRICS_FILE);
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let outcome = train(config, &mut |rec| {
        let line = serde_json::to_string(rec).expect("record serialises");
        writeln!(writer, "{line}").map_err(|e| Error::io(&path, e))
    })?;
    writer.flush().map_err(|e| Error::io(&path, e))?;
    outcome.checkpoint.save(out)?;
    Ok(outcome)
}
