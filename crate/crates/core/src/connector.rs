//! Recursive connector: maps intermediate hidden states of one recursion step
//! back into input-embedding space for the next.
//!
//! For every selected layer `l` and modality `m`, the connector computes
//!
//! ```text
//! X = RMSNorm(H_l[m])
//! A = X * s + silu(X W_up) W_down
//! ```
//!
//! and the next input is `E1[m] + sum_l A_l[m]`, always anchored to the
//! first-step embeddings. With `s = 0` and `W_down = 0` every `A` is exactly
//! zero, so a freshly initialised recursive model reproduces the
//! non-recursive one at every step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Connector variants, from no connector at all up to the full
/// RMSNorm + MLP + scaled-residual module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectorKind {
    /// Vanilla recursion: the next input is the last hidden state.
    None,
    /// `A = RMSNorm(H)`.
    RmsNorm,
    /// `A = silu(X W_up) W_down`.
    RmsNormMlp,
    /// `A = X + silu(X W_up) W_down`.
    RmsNormMlpResidual,
    /// `A = X * s + silu(X W_up) W_down`.
    Full,
}

impl ConnectorKind {
    pub fn has_mlp(self) -> bool {
        matches!(
            self,
            ConnectorKind::RmsNormMlp | ConnectorKind::RmsNormMlpResidual | ConnectorKind::Full
        )
    }

    pub fn has_scale(self) -> bool {
        self == ConnectorKind::Full
    }

    fn has_plain_residual(self) -> bool {
        matches!(self, ConnectorKind::RmsNorm | ConnectorKind::RmsNormMlpResidual)
    }
}

impl std::str::FromStr for ConnectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown connector kind `{s}`")))
    }
}

/// How the layer set `S` is chosen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum LayerSelection {
    /// `ceil(i * L / k)` for `i = 1..=k`.
    Uniform { k: usize },
    First { k: usize },
    Last { k: usize },
    Explicit { layers: Vec<usize> },
}

impl Default for LayerSelection {
    fn default() -> Self {
        LayerSelection::Uniform { k: 4 }
    }
}

impl LayerSelection {
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<usize>> {
        let check_k = |k: usize| {
            if k == 0 || k > n_layers {
                Err(Error::Config(format!(
                    "layer selection needs 1 <= k <= L, got k={k}, L={n_layers}"
                )))
            } else {
                Ok(())
            }
        };
        match self {
            LayerSelection::Uniform { k } => select_layers(n_layers, *k),
            LayerSelection::First { k } => {
                check_k(*k)?;
                Ok((1..=*k).collect())
            }
            LayerSelection::Last { k } => {
                check_k(*k)?;
                Ok((n_layers - k + 1..=n_layers).collect())
            }
            LayerSelection::Explicit { layers } => {
                let increasing = layers.windows(2).all(|w| w[0] < w[1]);
                if layers.is_empty()
                    || !increasing
                    || layers.iter().any(|&l| l == 0 || l > n_layers)
                {
                    return Err(Error::Config(format!(
                        "explicit layers {layers:?} must be strictly increasing within 1..={n_layers}"
                    )));
                }
                Ok(layers.clone())
            }
        }
    }
}

/// Uniformly spaced layer indices `ceil(i * L / k)`, `i = 1..=k`.
pub fn select_layers(n_layers: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n_layers {
        return Err(Error::Config(format!(
            "select_layers needs 1 <= k <= L, got k={k}, L={n_layers}"
        )));
    }
    let mut out: Vec<usize> = (1..=k).map(|i| (i * n_layers).div_ceil(k)).collect();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectorConfig {
    pub kind: ConnectorKind,
    pub selection: LayerSelection,
    /// One parameter set for both modalities.
    pub shared_modality: bool,
    /// Separate banks for every recursion step instead of one shared bank.
    pub per_step: bool,
    /// MLP hidden width; defaults to the model width.
    pub hidden_width: Option<usize>,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        ConnectorConfig {
            kind: ConnectorKind::Full,
            selection: LayerSelection::default(),
            shared_modality: false,
            per_step: false,
            hidden_width: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Vision,
    Text,
}

/// Parameters of one connector `C_{l,m}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectorParams<T> {
    pub rms_gain: Tensor<T>,
    pub scale: Option<Tensor<T>>,
    pub w_up: Option<Tensor<T>>,
    pub w_down: Option<Tensor<T>>,
}

impl<T: Scalar> ConnectorParams<T> {
    fn new(kind: ConnectorKind, d: usize, hidden: usize) -> Self {
        ConnectorParams {
            rms_gain: Tensor::ones(vec![d]),
            scale: kind.has_scale().then(|| Tensor::zeros(vec![d])),
            w_up: kind.has_mlp().then(|| Tensor::zeros(vec![d, hidden])),
            w_down: kind.has_mlp().then(|| Tensor::zeros(vec![hidden, d])),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.rms_gain"), &self.rms_gain);
        if let Some(s) = &self.scale {
            f(format!("{prefix}.scale"), s);
        }
        if let Some(w) = &self.w_up {
            f(format!("{prefix}.w_up"), w);
        }
        if let Some(w) = &self.w_down {
            f(format!("{prefix}.w_down"), w);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.rms_gain"), &mut self.rms_gain);
        if let Some(s) = &mut self.scale {
            f(format!("{prefix}.scale"), s);
        }
        if let Some(w) = &mut self.w_up {
            f(format!("{prefix}.w_up"), w);
        }
        if let Some(w) = &mut self.w_down {
            f(format!("{prefix}.w_down"), w);
        }
    }
}

/// All connectors used to build one next-step input.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectorBank<T> {
    pub kind: ConnectorKind,
    pub selected_layers: Vec<usize>,
    pub shared_modality: bool,
    /// `connectors[pos * modalities + m]` for the `pos`-th selected layer.
    pub connectors: Vec<ConnectorParams<T>>,
}

impl<T: Scalar> ConnectorBank<T> {
    /// Allocates and zero-initialises a bank. `kind` must not be `None`.
    pub fn new<R: Rng + ?Sized>(
        config: &ConnectorConfig,
        n_layers: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if config.kind == ConnectorKind::None {
            return Err(Error::Config("connector kind `none` has no bank".into()));
        }
        let selected_layers = config.selection.resolve(n_layers)?;
        let hidden = config.hidden_width.unwrap_or(d_model);
        if hidden == 0 {
            return Err(Error::Config("connector hidden_width must be >= 1".into()));
        }
        let modalities = if config.shared_modality { 1 } else { 2 };
        let connectors = (0..selected_layers.len() * modalities)
            .map(|_| ConnectorParams::new(config.kind, d_model, hidden))
            .collect();
        let mut bank = ConnectorBank {
            kind: config.kind,
            selected_layers,
            shared_modality: config.shared_modality,
            connectors,
        };
        bank.init_connectors(rng);
        Ok(bank)
    }

    fn modalities(&self) -> usize {
        if self.shared_modality {
            1
        } else {
            2
        }
    }

    fn slot(&self, pos: usize, modality: Modality) -> usize {
        let m = match (self.shared_modality, modality) {
            (true, _) | (false, Modality::Vision) => 0,
            (false, Modality::Text) => 1,
        };
        pos * self.modalities() + m
    }

    /// Parameters for the `pos`-th selected layer.
    pub fn params(&self, pos: usize, modality: Modality) -> &ConnectorParams<T> {
        &self.connectors[self.slot(pos, modality)]
    }

    pub fn params_mut(&mut self, pos: usize, modality: Modality) -> &mut ConnectorParams<T> {
        let i = self.slot(pos, modality);
        &mut self.connectors[i]
    }

    /// Zeroes every residual scale and down-projection, draws `W_up` from
    /// `Normal(0, 0.02)` and resets the RMSNorm gains to one.
    pub fn init_connectors<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for c in &mut self.connectors {
            c.rms_gain = Tensor::ones(c.rms_gain.shape().to_vec());
            if let Some(s) = &mut c.scale {
                *s = Tensor::zeros(s.shape().to_vec());
            }
            if let Some(w) = &mut c.w_up {
                *w = Tensor::randn(w.shape().to_vec(), 0.02, rng);
            }
            if let Some(w) = &mut c.w_down {
                *w = Tensor::zeros(w.shape().to_vec());
            }
        }
    }

    fn prefix(&self, i: usize, bank: &str) -> String {
        let layer = self.selected_layers[i / self.modalities()];
        let m = match (self.shared_modality, i % self.modalities()) {
            (true, _) => "shared",
            (false, 0) => "vision",
            _ => "text",
        };
        format!("{bank}.layer{layer}.{m}")
    }

    pub(crate) fn visit<'a>(&'a self, bank: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, c) in self.connectors.iter().enumerate() {
            c.visit(&self.prefix(i, bank), f);
        }
    }

    pub(crate) fn visit_mut(&mut self, bank: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        let prefixes: Vec<String> = (0..self.connectors.len()).map(|i| self.prefix(i, bank)).collect();
        for (c, p) in self.connectors.iter_mut().zip(prefixes) {
            c.visit_mut(&p, f);
        }
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    pub(crate) fn bind(&self, tape: &mut Tape<T>, leaf: &mut dyn FnMut(&mut Tape<T>, &Tensor<T>) -> Var) -> BoundBank {
        let connectors = self
            .connectors
            .iter()
            .map(|c| BoundConnector {
                rms_gain: leaf(tape, &c.rms_gain),
                scale: c.scale.as_ref().map(|t| leaf(tape, t)),
                w_up: c.w_up.as_ref().map(|t| leaf(tape, t)),
                w_down: c.w_down.as_ref().map(|t| leaf(tape, t)),
            })
            .collect();
        BoundBank {
            kind: self.kind,
            selected_layers: self.selected_layers.clone(),
            shared_modality: self.shared_modality,
            connectors,
        }
    }
}

/// Connector parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundConnector {
    pub rms_gain: Var,
    pub scale: Option<Var>,
    pub w_up: Option<Var>,
    pub w_down: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct BoundBank {
    pub kind: ConnectorKind,
    pub selected_layers: Vec<usize>,
    pub shared_modality: bool,
    pub connectors: Vec<BoundConnector>,
}

impl BoundBank {
    pub fn connector(&self, pos: usize, modality: Modality) -> &BoundConnector {
        let modalities = if self.shared_modality { 1 } else { 2 };
        let m = usize::from(!self.shared_modality && modality == Modality::Text);
        &self.connectors[pos * modalities + m]
    }
}

/// Applies one connector to an `(N_m, d)` slice of hidden states.
pub fn connector_apply<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &BoundConnector,
    kind: ConnectorKind,
    eps: T,
) -> Result<Var> {
    let normed = tape.rms_norm(x, params.rms_gain, eps)?;
    let residual = match params.scale {
        Some(s) => Some(tape.mul_row(normed, s)?),
        None if kind.has_plain_residual() => Some(normed),
        None => None,
    };
    let mlp = match (params.w_up, params.w_down) {
        (Some(up), Some(down)) => {
            let h = tape.matmul(normed, up)?;
            let h = tape.silu(h)?;
            Some(tape.matmul(h, down)?)
        }
        _ => None,
    };
    match (residual, mlp) {
        (Some(r), Some(m)) => tape.add(r, m),
        (Some(r), None) => Ok(r),
        (None, Some(m)) => Ok(m),
        (None, None) => Err(Error::Config(format!(
            "connector kind {kind:?} produces no output"
        ))),
    }
}

/// Builds `E^(r+1)` from the first-step input `e1` and the step-`r` hidden
/// states `hidden[0..=L]`.
///
/// `vision_rows` and `text_rows` partition the rows of `e1`. Each modality is
/// transformed by its own connectors and the per-layer outputs are summed onto
/// the matching rows of `e1`.
pub fn build_next_input<T: Scalar>(
    tape: &mut Tape<T>,
    e1: Var,
    hidden: &[Var],
    vision_rows: &[usize],
    text_rows: &[usize],
    bank: &BoundBank,
    eps: T,
) -> Result<Var> {
    let n_rows = tape.value(e1).rows();
    let mut parts: Vec<(Var, &[usize])> = Vec::with_capacity(2);
    for (modality, rows) in [(Modality::Vision, vision_rows), (Modality::Text, text_rows)] {
        if rows.is_empty() {
            continue;
        }
        let mut total: Option<Var> = None;
        for (pos, &layer) in bank.selected_layers.iter().enumerate() {
            let h = *hidden.get(layer).ok_or(Error::OutOfRange {
                what: "connector layer",
                index: layer,
                limit: hidden.len().saturating_sub(1),
            })?;
            let slice = tape.gather_rows(h, rows)?;
            let a = connector_apply(tape, slice, bank.connector(pos, modality), bank.kind, eps)?;
            total = Some(match total {
                Some(t) => tape.add(t, a)?,
                None => a,
            });
        }
        if let Some(t) = total {
            parts.push((t, rows));
        }
    }
    if parts.is_empty() {
        return Ok(e1);
    }
    let delta = tape.scatter_rows(&parts, n_rows)?;
    tape.add(e1, delta)
}
