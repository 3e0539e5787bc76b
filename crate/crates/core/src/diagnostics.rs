//! Layer-wise hidden-state diagnostics: mean token L2 norm and linear CKA
//! against the step's input embeddings.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ModelParams, MultimodalBatch, RecursionConfig};
use crate::numerics::{Scalar, Tensor};

/// Upper bound on pooled token rows used for CKA.
pub const CKA_MAX_ROWS: usize = 4096;

/// Mean over tokens of `||h_token||_2`, one value per layer.
pub fn layer_l2_norms<T: Scalar>(hidden: &[Tensor<T>]) -> Result<Vec<f64>> {
    if hidden.is_empty() {
        return Err(Error::InvalidArgument("layer_l2_norms needs at least one layer".into()));
    }
    hidden
        .iter()
        .map(|h| {
            if h.shape().len() != 2 {
                return Err(Error::shape("layer_l2_norms", h.shape(), &[0, 0]));
            }
            let (n, d) = (h.rows(), h.cols());
            if n == 0 {
                return Ok(0.0);
            }
            let total: f64 = h
                .data()
                .chunks(d.max(1))
                .map(|row| row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
                .sum();
            Ok(total / n as f64)
        })
        .collect()
}

fn centered(x: &Tensor<f64>) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut means = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(&means) {
            *v -= m;
        }
    }
    out
}

/// `A^T B` for row-major `a: (n, p)` and `b: (n, q)`.
fn cross(a: &[f64], p: usize, b: &[f64], q: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    let (p_, q_) = (p as isize, q as isize);
    f64::gemm(p, n, q, 1.0, (a, 1, p_), (b, q_, 1), 0.0, (&mut out, q_, 1));
    out
}

fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Linear CKA with column centering:
/// `||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F)`.
pub fn linear_cka(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    if x.shape().len() != 2 || y.shape().len() != 2 || x.rows() != y.rows() {
        return Err(Error::shape("linear_cka", x.shape(), y.shape()));
    }
    let n = x.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("linear_cka needs N >= 2 rows, got {n}")));
    }
    let (p, q) = (x.cols(), y.cols());
    let xc = centered(x);
    let yc = centered(y);
    let xx = frobenius(&cross(&xc, p, &xc, p, n));
    let yy = frobenius(&cross(&yc, q, &yc, q, n));
    if xx == 0.0 {
        return Err(Error::ZeroVariance("linear_cka: X"));
    }
    if yy == 0.0 {
        return Err(Error::ZeroVariance("linear_cka: Y"));
    }
    let yx = frobenius(&cross(&yc, q, &xc, p, n));
    Ok(yx * yx / (xx * yy))
}

/// Where the diagnosed samples came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceInfo {
    pub task: String,
    pub data_seed: u64,
    /// Which split of `data_seed` the samples were drawn from.
    pub split: String,
    pub sample_count: usize,
    pub subsample_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// 1-based recursion step.
    pub step: usize,
    /// Index `l` holds the value for `H_l`, with `H_0 = E^(r)`.
    pub per_layer_norm: Vec<f64>,
    pub per_layer_cka: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub fingerprint: String,
    pub slice: SliceInfo,
    pub sample_count: usize,
    pub token_count: usize,
    pub cka_rows: usize,
    pub steps: Vec<StepDiagnostics>,
}

impl DiagnosticsReport {
    /// Writes `report.json` content to `json_path` and the
    /// `layer_index,step,norm,cka` table to `csv_path`.
    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(json_path, e))?;
        std::fs::write(json_path, json + "\n").map_err(|e| Error::io(json_path, e))?;
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))
    }

    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        writeln!(out, "layer_index,step,norm,cka").unwrap();
        for s in &self.steps {
            for (l, (n, c)) in s.per_layer_norm.iter().zip(&s.per_layer_cka).enumerate() {
                writeln!(out, "{l},{},{n:e},{c:e}", s.step).unwrap();
            }
        }
        String::from_utf8(out).unwrap()
    }
}

/// Runs the model over `batches` and pools every token of every layer.
///
/// Norms use all tokens. CKA uses at most [`CKA_MAX_ROWS`] token rows, chosen
/// once with `slice.subsample_seed` and shared by all layers and steps.
pub fn run_diagnostics<T: Scalar>(
    params: &ModelParams<T>,
    batches: &[MultimodalBatch],
    recursion: &RecursionConfig,
    slice: SliceInfo,
    fingerprint: String,
) -> Result<DiagnosticsReport> {
    let token_count: usize = batches.iter().map(|b| b.layout().n_rows).sum();
    if token_count < 2 {
        return Err(Error::InvalidArgument("diagnostics need at least two tokens".into()));
    }
    let keep: Vec<bool> = if token_count > CKA_MAX_ROWS {
        let mut rng = ChaCha8Rng::seed_from_u64(slice.subsample_seed);
        let mut mask = vec![false; token_count];
        for i in rand::seq::index::sample(&mut rng, token_count, CKA_MAX_ROWS) {
            mask[i] = true;
        }
        mask
    } else {
        vec![true; token_count]
    };
    let cka_rows = keep.iter().filter(|&&k| k).count();

    let layers = params.config.n_layers + 1;
    let d = params.config.d_model;
    let steps = recursion.steps;
    let mut norm_sums = vec![vec![0.0f64; layers]; steps];
    let mut pooled = vec![vec![Vec::with_capacity(cka_rows * d); layers]; steps];
    let mut offset = 0;
    for batch in batches {
        let (tape, _, outputs) = forward(params, batch, recursion)?;
        let n = batch.layout().n_rows;
        for (r, step) in outputs.iter().enumerate() {
            for (l, &h) in step.hidden.iter().enumerate() {
                let value = tape.value(h);
                for (i, row) in value.data().chunks(d).enumerate() {
                    let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                    norm_sums[r][l] += row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if keep[offset + i] {
                        pooled[r][l].extend(row);
                    }
                }
            }
        }
        offset += n;
    }

    let mut reports = Vec::with_capacity(steps);
    for (r, layers_pooled) in pooled.into_iter().enumerate() {
        let mats: Vec<Tensor<f64>> = layers_pooled
            .into_iter()
            .map(|v| Tensor::new(vec![cka_rows, d], v))
            .collect::<Result<_>>()?;
        let per_layer_cka = mats
            .iter()
            .map(|h| linear_cka(h, &mats[0]))
            .collect::<Result<Vec<_>>>()?;
        reports.push(StepDiagnostics {
            step: r + 1,
            per_layer_norm: norm_sums[r].iter().map(|s| s / token_count as f64).collect(),
            per_layer_cka,
        });
    }
    Ok(DiagnosticsReport {
        fingerprint,
        sample_count: slice.sample_count,
        slice,
        token_count,
        cka_rows,
        steps: reports,
    })
}
