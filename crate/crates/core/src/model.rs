//! Multimodal decoder with shared-weight recursion.
//!
//! One stack of `L` pre-norm decoder blocks is reused at every recursion step.
//! Step `r` decodes `E^(r)`; the connector bank turns its hidden states into
//! `E^(r+1)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connector::{build_next_input, BoundBank, ConnectorBank, ConnectorConfig, ConnectorKind};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Raw patch width `p` fed to the fixed patch projector.
    pub patch_dim: usize,
    pub rms_eps: f64,
    pub rope_base: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            mlp_ratio: 4,
            patch_dim: 16,
            rms_eps: 1e-6,
            rope_base: 10_000.0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.vocab_size == 0 || self.d_model == 0 || self.mlp_ratio == 0 {
            return bad("vocab_size, d_model and mlp_ratio must be >= 1".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return bad("head dimension must be even for rotary embeddings".into());
        }
        if self.rms_eps <= 0.0 {
            return bad("rms_eps must be > 0".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Recursion depth and connector layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecursionConfig {
    /// Maximum recursion depth `R`.
    pub steps: usize,
    pub connector: ConnectorConfig,
}

impl Default for RecursionConfig {
    fn default() -> Self {
        RecursionConfig {
            steps: 2,
            connector: ConnectorConfig::default(),
        }
    }
}

impl RecursionConfig {
    /// Non-recursive baseline: one step, no connectors.
    pub fn baseline() -> Self {
        RecursionConfig {
            steps: 1,
            connector: ConnectorConfig {
                kind: ConnectorKind::None,
                ..ConnectorConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("recursion.steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of connector banks a model with this configuration allocates.
    pub fn bank_count(&self) -> usize {
        if self.steps < 2 || self.connector.kind == ConnectorKind::None {
            0
        } else if self.connector.per_step {
            self.steps - 1
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Scalar> BlockParams<T> {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let h = d * cfg.mlp_ratio;
        let std = cfg.init_std;
        BlockParams {
            attn_norm: Tensor::ones(vec![d]),
            wq: Tensor::randn(vec![d, d], std, rng),
            wk: Tensor::randn(vec![d, d], std, rng),
            wv: Tensor::randn(vec![d, d], std, rng),
            wo: Tensor::randn(vec![d, d], std, rng),
            mlp_norm: Tensor::ones(vec![d]),
            w_up: Tensor::randn(vec![d, h], std, rng),
            w_down: Tensor::randn(vec![h, d], std, rng),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor<T>); 8] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 8] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("mlp_norm", &mut self.mlp_norm),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }
}

/// All model tensors. The block list exists once and is reused by every
/// recursion step.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub text_embedding: Tensor<T>,
    /// Fixed, non-trainable `(p, d)` stand-in for a frozen vision encoder.
    pub patch_projector: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub head: Tensor<T>,
    /// Empty for `R = 1` or vanilla recursion; one bank when connectors are
    /// shared across steps, `R - 1` banks otherwise.
    pub banks: Vec<ConnectorBank<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialisation. Backbone and projector draws do not depend on
    /// the recursion configuration, so a baseline and a recursive model built
    /// from the same seed share their backbone initialisation.
    pub fn init(config: &ModelConfig, recursion: &RecursionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        recursion.validate()?;
        let d = config.d_model;
        let std = config.init_std;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut projector_rng = ChaCha8Rng::seed_from_u64(seed);
        projector_rng.set_stream(1);
        let mut connector_rng = ChaCha8Rng::seed_from_u64(seed);
        connector_rng.set_stream(2);

        let text_embedding = Tensor::randn(vec![config.vocab_size, d], std, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams::init(config, &mut rng))
            .collect();
        let head = Tensor::randn(vec![d, config.vocab_size], std, &mut rng);
        let patch_projector = Tensor::randn(vec![config.patch_dim, d], std, &mut projector_rng);
        let banks = (0..recursion.bank_count())
            .map(|_| ConnectorBank::new(&recursion.connector, config.n_layers, d, &mut connector_rng))
            .collect::<Result<_>>()?;
        Ok(ModelParams {
            config: config.clone(),
            text_embedding,
            patch_projector,
            blocks,
            head,
            banks,
        })
    }

    /// Visits every trainable tensor in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f("text_embedding".into(), &self.text_embedding);
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.fields() {
                f(format!("blocks.{i}.{name}"), t);
            }
        }
        f("head".into(), &self.head);
        for (i, bank) in self.banks.iter().enumerate() {
            bank.visit(&format!("connectors.{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f("text_embedding".into(), &mut self.text_embedding);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.fields_mut() {
                f(format!("blocks.{i}.{name}"), t);
            }
        }
        f("head".into(), &mut self.head);
        for (i, bank) in self.banks.iter_mut().enumerate() {
            bank.visit_mut(&format!("connectors.{i}"), f);
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Trainable count of the same backbone without connectors.
    pub fn baseline_count(&self) -> usize {
        self.trainable_count() - self.connector_count()
    }

    pub fn connector_count(&self) -> usize {
        self.banks.iter().map(ConnectorBank::parameter_count).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let block = |b: &BlockParams<T>| BlockParams {
            attn_norm: b.attn_norm.cast(),
            wq: b.wq.cast(),
            wk: b.wk.cast(),
            wv: b.wv.cast(),
            wo: b.wo.cast(),
            mlp_norm: b.mlp_norm.cast(),
            w_up: b.w_up.cast(),
            w_down: b.w_down.cast(),
        };
        let bank = |b: &ConnectorBank<T>| ConnectorBank {
            kind: b.kind,
            selected_layers: b.selected_layers.clone(),
            shared_modality: b.shared_modality,
            connectors: b
                .connectors
                .iter()
                .map(|c| crate::connector::ConnectorParams {
                    rms_gain: c.rms_gain.cast(),
                    scale: c.scale.as_ref().map(Tensor::cast),
                    w_up: c.w_up.as_ref().map(Tensor::cast),
                    w_down: c.w_down.as_ref().map(Tensor::cast),
                })
                .collect(),
        };
        ModelParams {
            config: self.config.clone(),
            text_embedding: self.text_embedding.cast(),
            patch_projector: self.patch_projector.cast(),
            blocks: self.blocks.iter().map(block).collect(),
            head: self.head.cast(),
            banks: self.banks.iter().map(bank).collect(),
        }
    }

    /// Records every trainable tensor as a tape leaf (in [`visit`] order) and
    /// the patch projector as a constant.
    ///
    /// [`visit`]: ModelParams::visit
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        self.bind_with(tape, &mut |tape, t| tape.param(t.clone()))
    }

    /// Like [`bind`](ModelParams::bind) but lets the caller supply the leaf for
    /// each trainable tensor, in [`visit`](ModelParams::visit) order.
    pub fn bind_with(
        &self,
        tape: &mut Tape<T>,
        leaf: &mut dyn FnMut(&mut Tape<T>, &Tensor<T>) -> Var,
    ) -> BoundParams {
        let text_embedding = leaf(tape, &self.text_embedding);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                attn_norm: leaf(tape, &b.attn_norm),
                wq: leaf(tape, &b.wq),
                wk: leaf(tape, &b.wk),
                wv: leaf(tape, &b.wv),
                wo: leaf(tape, &b.wo),
                mlp_norm: leaf(tape, &b.mlp_norm),
                w_up: leaf(tape, &b.w_up),
                w_down: leaf(tape, &b.w_down),
            })
            .collect();
        let head = leaf(tape, &self.head);
        let banks = self.banks.iter().map(|b| b.bind(tape, leaf)).collect();
        let patch_projector = tape.constant(self.patch_projector.clone());
        BoundParams {
            config: self.config.clone(),
            text_embedding,
            patch_projector,
            blocks,
            head,
            banks,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl BoundBlock {
    pub fn leaves(&self) -> [Var; 8] {
        [
            self.attn_norm,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.mlp_norm,
            self.w_up,
            self.w_down,
        ]
    }
}

/// Model parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub config: ModelConfig,
    pub text_embedding: Var,
    pub patch_projector: Var,
    pub blocks: Vec<BoundBlock>,
    pub head: Var,
    pub banks: Vec<BoundBank>,
}

impl BoundParams {
    /// Every trainable leaf, in [`ModelParams::visit`] order.
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = vec![self.text_embedding];
        for b in &self.blocks {
            out.extend(b.leaves());
        }
        out.push(self.head);
        for bank in &self.banks {
            for c in &bank.connectors {
                out.push(c.rms_gain);
                out.extend(c.scale);
                out.extend(c.w_up);
                out.extend(c.w_down);
            }
        }
        out
    }

    fn bank_for_step(&self, step: usize) -> Result<&BoundBank> {
        match self.banks.len() {
            0 => Err(Error::Config(
                "recursion beyond step 1 needs a connector bank, but the model has none".into(),
            )),
            1 => Ok(&self.banks[0]),
            n => self.banks.get(step - 1).ok_or_else(|| {
                Error::Config(format!(
                    "per-step connectors cover {} transitions; step {} needs more",
                    n,
                    step + 1
                ))
            }),
        }
    }
}

/// One sequence `[V, T]` in model form.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceInput {
    pub raw_patches: Vec<Vec<f32>>,
    pub text_ids: Vec<u32>,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl From<&Sample> for SequenceInput {
    fn from(s: &Sample) -> Self {
        SequenceInput {
            raw_patches: s.raw_patches.clone(),
            text_ids: s.text_ids(),
            targets: s.targets(),
            loss_mask: s.loss_mask.clone(),
        }
    }
}

impl SequenceInput {
    pub fn n_v(&self) -> usize {
        self.raw_patches.len()
    }

    pub fn n_t(&self) -> usize {
        self.text_ids.len()
    }
}

/// Sequences packed along the token axis. Attention never crosses sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalBatch {
    pub sequences: Vec<SequenceInput>,
}

/// Row bookkeeping for a packed batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchLayout {
    pub n_rows: usize,
    /// `(start, len)` of every sequence.
    pub segments: Vec<(usize, usize)>,
    pub vision_rows: Vec<usize>,
    pub text_rows: Vec<usize>,
    /// Position of each row within its own sequence.
    pub positions: Vec<usize>,
}

impl MultimodalBatch {
    pub fn new(sequences: Vec<SequenceInput>) -> Result<Self> {
        for s in &sequences {
            if s.text_ids.is_empty()
                || s.targets.len() != s.n_t()
                || s.loss_mask.len() != s.n_t()
            {
                return Err(Error::InvalidArgument(
                    "every sequence needs text ids with matching targets and loss mask".into(),
                ));
            }
        }
        Ok(MultimodalBatch { sequences })
    }

    pub fn single(seq: SequenceInput) -> Result<Self> {
        Self::new(vec![seq])
    }

    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        Self::new(samples.iter().map(SequenceInput::from).collect())
    }

    pub fn layout(&self) -> BatchLayout {
        let mut layout = BatchLayout {
            n_rows: 0,
            segments: Vec::with_capacity(self.sequences.len()),
            vision_rows: Vec::new(),
            text_rows: Vec::new(),
            positions: Vec::new(),
        };
        for s in &self.sequences {
            let start = layout.n_rows;
            let len = s.n_v() + s.n_t();
            layout.segments.push((start, len));
            layout.vision_rows.extend(start..start + s.n_v());
            layout.text_rows.extend(start + s.n_v()..start + len);
            layout.positions.extend(0..len);
            layout.n_rows += len;
        }
        layout
    }

    /// Next-token targets of all text rows, in row order.
    pub fn targets(&self) -> Vec<usize> {
        self.sequences
            .iter()
            .flat_map(|s| s.targets.iter().map(|&t| t as usize))
            .collect()
    }

    pub fn loss_mask(&self) -> Vec<bool> {
        self.sequences
            .iter()
            .flat_map(|s| s.loss_mask.iter().copied())
            .collect()
    }
}

/// Outputs of recursion step `r`, all recorded on the tape.
#[derive(Clone, Debug)]
pub struct StepOutputs {
    /// `hidden[0] = E^(r)`, `hidden[l] = H_l^(r)`.
    pub hidden: Vec<Var>,
    /// `(N_t, vocab)` logits over text rows only.
    pub logits: Var,
    /// `(N_t)` per-token cross-entropy.
    pub token_losses: Var,
}

impl StepOutputs {
    pub fn input(&self) -> Var {
        self.hidden[0]
    }

    pub fn last_hidden(&self) -> Var {
        *self.hidden.last().expect("hidden holds at least E")
    }
}

/// `E^(1) = [patch_projector(raw_patches), text_embedding[text_ids]]` per
/// sequence.
pub fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    batch: &MultimodalBatch,
    layout: &BatchLayout,
) -> Result<Var> {
    let cfg = &params.config;
    let ids: Vec<usize> = batch
        .sequences
        .iter()
        .flat_map(|s| s.text_ids.iter().map(|&t| t as usize))
        .collect();
    let text = tape.embedding(params.text_embedding, &ids)?;
    if layout.vision_rows.is_empty() {
        return tape.scatter_rows(&[(text, &layout.text_rows)], layout.n_rows);
    }
    let mut patches = Vec::with_capacity(layout.vision_rows.len() * cfg.patch_dim);
    for s in &batch.sequences {
        for p in &s.raw_patches {
            if p.len() != cfg.patch_dim {
                return Err(Error::shape("embed", &[p.len()], &[cfg.patch_dim]));
            }
            patches.extend(p.iter().map(|&v| T::of(v as f64)));
        }
    }
    let raw = tape.constant(Tensor::new(vec![layout.vision_rows.len(), cfg.patch_dim], patches)?);
    let vision = tape.matmul(raw, params.patch_projector)?;
    tape.scatter_rows(
        &[(vision, &layout.vision_rows), (text, &layout.text_rows)],
        layout.n_rows,
    )
}

/// `F(x; theta_l)`: pre-norm causal self-attention then pre-norm SiLU MLP,
/// both with residual connections.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    block: &BoundBlock,
    x: Var,
    config: &ModelConfig,
    layout: &BatchLayout,
) -> Result<Var> {
    let eps = T::of(config.rms_eps);
    let xn = tape.rms_norm(x, block.attn_norm, eps)?;
    let q = tape.matmul(xn, block.wq)?;
    let k = tape.matmul(xn, block.wk)?;
    let v = tape.matmul(xn, block.wv)?;
    let q = tape.rope(q, config.n_heads, &layout.positions, config.rope_base)?;
    let k = tape.rope(k, config.n_heads, &layout.positions, config.rope_base)?;
    let attn = tape.causal_attention(q, k, v, config.n_heads, &layout.segments)?;
    let attn = tape.matmul(attn, block.wo)?;
    let h = tape.add(x, attn)?;

    let hn = tape.rms_norm(h, block.mlp_norm, eps)?;
    let up = tape.matmul(hn, block.w_up)?;
    let up = tape.silu(up)?;
    let down = tape.matmul(up, block.w_down)?;
    tape.add(h, down)
}

/// Returns `[E, H_1, .., H_L]`.
pub fn decoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    e: Var,
    layout: &BatchLayout,
) -> Result<Vec<Var>> {
    if !tape.value(e).is_finite() {
        return Err(Error::NonFinite { op: "decoder input" });
    }
    let mut hidden = Vec::with_capacity(params.blocks.len() + 1);
    hidden.push(e);
    for (i, block) in params.blocks.iter().enumerate() {
        let x = *hidden.last().unwrap();
        let y = block_forward(tape, block, x, &params.config, layout).map_err(|e| Error::Layer {
            layer: i + 1,
            source: Box::new(e),
        })?;
        hidden.push(y);
    }
    Ok(hidden)
}

/// Logits for text rows only: `H_L[text] * head`.
pub fn lm_head<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    last_hidden: Var,
    layout: &BatchLayout,
) -> Result<Var> {
    let text = tape.gather_rows(last_hidden, &layout.text_rows)?;
    tape.matmul(text, params.head)
}

/// Runs `recursion.steps` passes of the shared decoder.
pub fn recursive_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    batch: &MultimodalBatch,
    recursion: &RecursionConfig,
) -> Result<Vec<StepOutputs>> {
    recursion.validate()?;
    let layout = batch.layout();
    let targets = batch.targets();
    let e1 = embed(tape, params, batch, &layout)?;
    let eps = T::of(params.config.rms_eps);
    let mut input = e1;
    let mut steps = Vec::with_capacity(recursion.steps);
    for r in 1..=recursion.steps {
        let hidden = decoder_forward(tape, params, input, &layout)?;
        let last = *hidden.last().unwrap();
        let logits = lm_head(tape, params, last, &layout)?;
        let token_losses = tape.cross_entropy(logits, &targets)?;
        steps.push(StepOutputs {
            hidden,
            logits,
            token_losses,
        });
        if r < recursion.steps {
            let hidden = &steps.last().unwrap().hidden;
            input = match recursion.connector.kind {
                ConnectorKind::None => last,
                _ => {
                    let bank = params.bank_for_step(r)?;
                    build_next_input(
                        tape,
                        e1,
                        hidden,
                        &layout.vision_rows,
                        &layout.text_rows,
                        bank,
                        eps,
                    )?
                }
            };
        }
    }
    Ok(steps)
}

/// Binds `params` to a fresh tape and runs [`recursive_forward`].
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    batch: &MultimodalBatch,
    recursion: &RecursionConfig,
) -> Result<(Tape<T>, BoundParams, Vec<StepOutputs>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let steps = recursive_forward(&mut tape, &bound, batch, recursion)?;
    Ok((tape, bound, steps))
}
