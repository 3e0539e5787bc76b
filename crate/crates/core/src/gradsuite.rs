//! 64-bit finite-difference checks of the model's analytic gradients: one
//! decoder block, one connector, and a two-step recursive forward through the
//! monotonic loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::connector::{connector_apply, ConnectorKind, LayerSelection};
use crate::error::Result;
use crate::loss::{loss_on_tape, LossConfig};
use crate::model::{
    block_forward, recursive_forward, BatchLayout, ModelConfig, ModelParams, MultimodalBatch,
    RecursionConfig, SequenceInput,
};
use crate::numerics::{grad_check_many, GradCheckReport, Tape, Tensor, Var};

/// Largest relative error the suite accepts.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_relative_error: f64,
    pub coordinates: usize,
    pub worst_tensor: String,
    pub worst_index: usize,
}

impl SuiteEntry {
    fn new(name: &'static str, report: GradCheckReport, names: &[String]) -> Self {
        SuiteEntry {
            name,
            max_relative_error: report.max_relative_error,
            coordinates: report.coordinates,
            worst_tensor: names.get(report.worst_tensor).cloned().unwrap_or_default(),
            worst_index: report.worst_index,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

/// Small, well-conditioned model: weights are large enough that every
/// gradient coordinate sits far above finite-difference round-off.
pub fn suite_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        mlp_ratio: 2,
        patch_dim: 3,
        init_std: 0.4,
        ..ModelConfig::default()
    }
}

pub fn suite_recursion() -> RecursionConfig {
    let mut r = RecursionConfig::default();
    r.connector.selection = LayerSelection::Uniform { k: 2 };
    r
}

/// Two vision tokens and four text tokens, the last two supervised.
pub fn toy_batch(seed: u64, config: &ModelConfig) -> Result<MultimodalBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Tensor<f32> = Tensor::randn(vec![2, config.patch_dim], 1.0, &mut rng);
    MultimodalBatch::single(SequenceInput {
        raw_patches: (0..2).map(|i| raw.row(i).to_vec()).collect(),
        text_ids: vec![1, 5, 7, 3],
        targets: vec![5, 7, 3, 9],
        loss_mask: vec![false, false, true, true],
    })
}

/// Model with every connector tensor moved off its zero initialisation.
pub fn suite_params(seed: u64) -> Result<ModelParams<f64>> {
    let mut params = ModelParams::<f64>::init(&suite_model_config(), &suite_recursion(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    for bank in &mut params.banks {
        bank.visit_mut("", &mut |_, t| {
            *t = Tensor::randn(t.shape().to_vec(), 0.5, &mut rng);
        });
    }
    Ok(params)
}

fn projection(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let n = tape.value(x).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Tensor<f64> = Tensor::randn(vec![n], 1.0, &mut rng);
    tape.weighted_sum(x, w.data())
}

/// Checks one decoder block with a random projection of its output.
pub fn check_block(seed: u64, eps: f64) -> Result<SuiteEntry> {
    let params = suite_params(seed)?;
    let config = params.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let x: Tensor<f64> = Tensor::randn(vec![6, config.d_model], 1.0, &mut rng);
    let b = &params.blocks[0];
    let mut tensors = vec![x];
    tensors.extend([&b.attn_norm, &b.wq, &b.wk, &b.wv, &b.wo, &b.mlp_norm, &b.w_up, &b.w_down].map(Clone::clone));
    let names: Vec<String> = ["input", "attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_down"]
        .map(String::from)
        .to_vec();
    let layout = BatchLayout {
        n_rows: 6,
        segments: vec![(0, 6)],
        vision_rows: vec![0, 1],
        text_rows: vec![2, 3, 4, 5],
        positions: (0..6).collect(),
    };
    let report = grad_check_many(
        |tape, v| {
            let block = crate::model::BoundBlock {
                attn_norm: v[1],
                wq: v[2],
                wk: v[3],
                wv: v[4],
                wo: v[5],
                mlp_norm: v[6],
                w_up: v[7],
                w_down: v[8],
            };
            let y = block_forward(tape, &block, v[0], &config, &layout)?;
            projection(tape, y, seed + 2)
        },
        &tensors,
        eps,
    )?;
    Ok(SuiteEntry::new("decoder block", report, &names))
}

/// Checks one full connector (`RMSNorm * s + MLP`).
pub fn check_connector(seed: u64, eps: f64) -> Result<SuiteEntry> {
    let params = suite_params(seed)?;
    let c = &params.banks[0].connectors[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let x: Tensor<f64> = Tensor::randn(vec![4, params.config.d_model], 1.0, &mut rng);
    let tensors = vec![
        x,
        c.rms_gain.clone(),
        c.scale.clone().expect("full connector"),
        c.w_up.clone().expect("full connector"),
        c.w_down.clone().expect("full connector"),
    ];
    let names: Vec<String> = ["input", "rms_gain", "scale", "w_up", "w_down"].map(String::from).to_vec();
    let eps_norm = params.config.rms_eps;
    let report = grad_check_many(
        |tape, v| {
            let bound = crate::connector::BoundConnector {
                rms_gain: v[1],
                scale: Some(v[2]),
                w_up: Some(v[3]),
                w_down: Some(v[4]),
            };
            let y = connector_apply(tape, v[0], &bound, ConnectorKind::Full, eps_norm)?;
            projection(tape, y, seed + 4)
        },
        &tensors,
        eps,
    )?;
    Ok(SuiteEntry::new("connector", report, &names))
}

/// Checks every trainable tensor through a two-step recursive forward and the
/// monotonic loss.
pub fn check_recursive_loss(seed: u64, eps: f64) -> Result<SuiteEntry> {
    let params = suite_params(seed)?;
    let recursion = suite_recursion();
    let batch = toy_batch(seed + 5, &params.config)?;
    let mask = batch.loss_mask();
    let named = params.named_tensors();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let tensors: Vec<Tensor<f64>> = named.into_iter().map(|(_, t)| t.clone()).collect();
    let loss = LossConfig::default();
    let report = grad_check_many(
        |tape, v| {
            let mut it = v.iter().copied();
            let bound = params.bind_with(tape, &mut |_, _| it.next().expect("one var per tensor"));
            let steps = recursive_forward(tape, &bound, &batch, &recursion)?;
            let losses: Vec<Var> = steps.iter().map(|s| s.token_losses).collect();
            Ok(loss_on_tape(tape, &losses, &mask, &loss)?.0)
        },
        &tensors,
        eps,
    )?;
    Ok(SuiteEntry::new("recursive forward + monotonic loss", report, &names))
}

pub fn run_suite(seed: u64, eps: f64) -> Result<Vec<SuiteEntry>> {
    Ok(vec![
        check_block(seed, eps)?,
        check_connector(seed, eps)?,
        check_recursive_loss(seed, eps)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for e in run_suite(0, 1e-6).unwrap() {
            assert!(e.passed(), "{e:?}");
        }
    }

    #[test]
    fn toy_batch_has_six_tokens() {
        let b = toy_batch(0, &suite_model_config()).unwrap();
        assert_eq!(b.layout().n_rows, 6);
    }
}
