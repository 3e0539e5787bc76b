//! Deterministic synthetic tasks.
//!
//! * `grid_color`: a `G x G` grid of colours is shown only through vision
//!   patches; the prompt names one cell and the answer is its colour.
//! * `copy`: echo a random symbol span after `SEP`.
//! * `modadd`: answer `(a + b) mod m` for symbol-encoded `a`, `b`.
//!
//! Every generator is a pure function of `(seed, index, config)`.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const ANSWER: u32 = 3;
const SPECIALS: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    GridColor,
    Copy,
    Modadd,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid_color" | "grid-color" => Ok(TaskKind::GridColor),
            "copy" => Ok(TaskKind::Copy),
            "modadd" => Ok(TaskKind::Modadd),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub task: TaskKind,
    pub grid_size: usize,
    pub colors: usize,
    /// Symbol alphabet for `copy`.
    pub alphabet: usize,
    /// Span length for `copy`.
    pub copy_len: usize,
    pub modulus: usize,
    /// Drops every vision patch (`N_v = 0`).
    pub text_only: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            task: TaskKind::GridColor,
            grid_size: 4,
            colors: 8,
            alphabet: 8,
            copy_len: 4,
            modulus: 11,
            text_only: false,
        }
    }
}

impl TaskConfig {
    /// One-hot colour plus one-hot row and column.
    pub fn patch_dim(&self) -> usize {
        self.colors + 2 * self.grid_size
    }

    pub fn color_token(&self, color: usize) -> u32 {
        SPECIALS + color as u32
    }

    pub fn position_token(&self, cell: usize) -> u32 {
        SPECIALS + (self.colors + cell) as u32
    }

    pub fn symbol_token(&self, symbol: usize) -> u32 {
        SPECIALS + (self.colors + self.grid_size * self.grid_size + symbol) as u32
    }

    fn symbol_count(&self) -> usize {
        self.alphabet.max(self.modulus)
    }

    /// Smallest vocabulary holding every token this configuration emits.
    pub fn required_vocab(&self) -> usize {
        SPECIALS as usize + self.colors + self.grid_size * self.grid_size + self.symbol_count()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("task: {m}")));
        match self.task {
            TaskKind::GridColor if self.grid_size == 0 || self.colors == 0 => {
                bad("grid_color needs grid_size >= 1 and colors >= 1")
            }
            TaskKind::Copy if self.copy_len == 0 || self.alphabet == 0 => {
                bad("copy needs copy_len >= 1 and alphabet >= 1")
            }
            TaskKind::Modadd if self.modulus == 0 => bad("modadd needs modulus >= 1"),
            _ => Ok(()),
        }
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `(N_v, p)` raw patch vectors, projected later by the model.
    pub raw_patches: Vec<Vec<f32>>,
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    /// One flag per text token of `prompt ++ answer`; true where the token's
    /// next-token target lies inside the answer span.
    pub loss_mask: Vec<bool>,
}

impl Sample {
    fn new(raw_patches: Vec<Vec<f32>>, prompt: Vec<u32>, answer: Vec<u32>) -> Self {
        let n_t = prompt.len() + answer.len();
        let first = prompt.len() - 1;
        let loss_mask = (0..n_t)
            .map(|i| i >= first && i < first + answer.len())
            .collect();
        Sample {
            raw_patches,
            prompt,
            answer,
            loss_mask,
        }
    }

    pub fn n_v(&self) -> usize {
        self.raw_patches.len()
    }

    /// Teacher-forced input ids: `prompt ++ answer`.
    pub fn text_ids(&self) -> Vec<u32> {
        self.prompt.iter().chain(&self.answer).copied().collect()
    }

    /// `text_ids` shifted left by one, padded with `PAD`.
    pub fn targets(&self) -> Vec<u32> {
        let mut t: Vec<u32> = self.text_ids().into_iter().skip(1).collect();
        t.push(PAD);
        t
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn gen_grid_color(seed: u64, index: u64, config: &TaskConfig) -> Sample {
    let mut rng = sample_rng(seed, index);
    let g = config.grid_size;
    let c = config.colors;
    let cells = g * g;
    let grid: Vec<usize> = (0..cells).map(|_| rng.random_range(0..c)).collect();
    let query = rng.random_range(0..cells);

    let patches = if config.text_only {
        Vec::new()
    } else {
        grid.iter()
            .enumerate()
            .map(|(cell, &color)| {
                let mut p = vec![0.0f32; config.patch_dim()];
                p[color] = 1.0;
                p[c + cell / g] = 1.0;
                p[c + g + cell % g] = 1.0;
                p
            })
            .collect()
    };
    let prompt = vec![BOS, config.position_token(query), ANSWER];
    let answer = vec![config.color_token(grid[query])];
    Sample::new(patches, prompt, answer)
}

pub fn gen_copy(seed: u64, index: u64, config: &TaskConfig) -> Sample {
    let mut rng = sample_rng(seed, index);
    let span: Vec<u32> = (0..config.copy_len)
        .map(|_| config.symbol_token(rng.random_range(0..config.alphabet)))
        .collect();
    let mut prompt = vec![BOS];
    prompt.extend(&span);
    prompt.push(SEP);
    Sample::new(Vec::new(), prompt, span)
}

/// `modadd` sample for explicit operands.
pub fn modadd_sample(a: usize, b: usize, config: &TaskConfig) -> Sample {
    let m = config.modulus;
    let prompt = vec![
        BOS,
        config.symbol_token(a % m),
        config.symbol_token(b % m),
        ANSWER,
    ];
    let answer = vec![config.symbol_token((a + b) % m)];
    Sample::new(Vec::new(), prompt, answer)
}

pub fn gen_modadd(seed: u64, index: u64, config: &TaskConfig) -> Sample {
    let mut rng = sample_rng(seed, index);
    let a = rng.random_range(0..config.modulus);
    let b = rng.random_range(0..config.modulus);
    modadd_sample(a, b, config)
}

pub fn generate(seed: u64, index: u64, config: &TaskConfig) -> Sample {
    match config.task {
        TaskKind::GridColor => gen_grid_color(seed, index, config),
        TaskKind::Copy => gen_copy(seed, index, config),
        TaskKind::Modadd => gen_modadd(seed, index, config),
    }
}

/// Disjoint train/eval index sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u64>,
    pub eval: Vec<u64>,
}

/// Seeded permutation of `0..n_train + n_eval`, cut into train and eval.
pub fn make_split(seed: u64, n_train: usize, n_eval: usize) -> Result<Split> {
    if n_train == 0 || n_eval == 0 {
        return Err(Error::Config(
            "split sizes n_train and n_eval must both be >= 1".into(),
        ));
    }
    let mut all: Vec<u64> = (0..(n_train + n_eval) as u64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_u64.rotate_left(40));
    all.shuffle(&mut rng);
    let eval = all.split_off(n_train);
    Ok(Split { train: all, eval })
}

/// Writes `n` samples as JSON lines.
pub fn export_jsonl(path: &Path, seed: u64, n: usize, config: &TaskConfig) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for i in 0..n as u64 {
        let line = serde_json::to_string(&generate(seed, i, config)).map_err(|e| Error::json(path, e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_color_single_cell_single_color() {
        let cfg = TaskConfig {
            grid_size: 1,
            colors: 1,
            ..TaskConfig::default()
        };
        for i in 0..20 {
            let s = gen_grid_color(3, i, &cfg);
            assert_eq!(s.answer, vec![cfg.color_token(0)]);
            assert_eq!(s.n_v(), 1);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        for task in [TaskKind::GridColor, TaskKind::Copy, TaskKind::Modadd] {
            let cfg = TaskConfig {
                task,
                ..TaskConfig::default()
            };
            let a = serde_json::to_vec(&generate(9, 123, &cfg)).unwrap();
            let b = serde_json::to_vec(&generate(9, 123, &cfg)).unwrap();
            assert_eq!(a, b);
            assert_ne!(generate(9, 123, &cfg), generate(9, 124, &cfg));
        }
    }

    #[test]
    fn grid_patch_encodes_the_queried_cell() {
        let cfg = TaskConfig::default();
        let s = gen_grid_color(1, 5, &cfg);
        let cell = (s.prompt[1] - cfg.position_token(0)) as usize;
        let patch = &s.raw_patches[cell];
        let color = patch[..cfg.colors].iter().position(|&v| v == 1.0).unwrap();
        assert_eq!(s.answer[0], cfg.color_token(color));
        assert_eq!(patch[cfg.colors + cell / 4], 1.0);
        assert_eq!(patch[cfg.colors + 4 + cell % 4], 1.0);
        assert_eq!(patch.iter().sum::<f32>(), 3.0);
        assert_eq!(s.n_v(), 16);
        assert_eq!(patch.len(), cfg.patch_dim());
    }

    #[test]
    fn targets_are_shifted_and_masked_on_the_answer() {
        let cfg = TaskConfig::default();
        let s = gen_grid_color(0, 0, &cfg);
        let ids = s.text_ids();
        let targets = s.targets();
        assert_eq!(ids.len(), targets.len());
        for i in 0..ids.len() - 1 {
            assert_eq!(targets[i], ids[i + 1]);
        }
        let masked: Vec<u32> = targets
            .iter()
            .zip(&s.loss_mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect();
        assert_eq!(masked, s.answer);
    }

    #[test]
    fn copy_of_length_one_targets_the_prompt_token() {
        let cfg = TaskConfig {
            task: TaskKind::Copy,
            copy_len: 1,
            ..TaskConfig::default()
        };
        for i in 0..10 {
            let s = gen_copy(4, i, &cfg);
            assert_eq!(s.answer, vec![s.prompt[1]]);
            assert_eq!(s.n_v(), 0);
        }
    }

    #[test]
    fn modadd_examples() {
        let cfg = TaskConfig {
            task: TaskKind::Modadd,
            modulus: 7,
            ..TaskConfig::default()
        };
        for b in 0..7 {
            let s = modadd_sample(0, b, &cfg);
            assert_eq!(s.answer[0], cfg.symbol_token(b));
        }
        assert_eq!(modadd_sample(5, 4, &cfg).answer[0], cfg.symbol_token(2));
    }

    #[test]
    fn text_only_drops_patches() {
        let cfg = TaskConfig {
            text_only: true,
            ..TaskConfig::default()
        };
        assert_eq!(gen_grid_color(0, 0, &cfg).n_v(), 0);
    }

    #[test]
    fn required_vocab_fits_default_model() {
        assert!(TaskConfig::default().required_vocab() <= 64);
    }

    #[test]
    fn split_is_disjoint_and_stable() {
        let a = make_split(7, 100, 30).unwrap();
        let b = make_split(7, 100, 30).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<u64> = a.train.iter().chain(&a.eval).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 130);
        assert!(make_split(7, 0, 3).is_err());
    }

    #[test]
    fn grid_color_answers_are_uniform_over_colors() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let cfg = TaskConfig::default();
        let n = 10_000;
        let mut counts = vec![0usize; cfg.colors];
        for i in 0..n {
            let s = gen_grid_color(11, i, &cfg);
            let c = (0..cfg.colors).find(|&c| cfg.color_token(c) == s.answer[0]).unwrap();
            counts[c] += 1;
        }
        let expected = n as f64 / cfg.colors as f64;
        let stat: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((cfg.colors - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 {stat} p {p} counts {counts:?}");
    }
}
