//! Ablation grids: a base configuration plus axes of dotted-path overrides,
//! expanded into the cartesian product of runs.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{StepEval, TrainConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    /// Dotted path into the configuration, e.g. `loss.variant`.
    pub path: String,
    pub values: Vec<Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    #[serde(default)]
    pub base: TrainConfig,
    pub axes: Vec<Axis>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    /// `path=value` pairs joined by commas; `base` for an empty grid.
    pub name: String,
    pub config: TrainConfig,
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("ablation path `{path}`: `{key}` is not inside an object")))?;
        if !obj.contains_key(*key) {
            return Err(Error::Config(format!("ablation path `{path}`: unknown field `{key}`")));
        }
        if i + 1 == parts.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*key).unwrap();
    }
    Err(Error::Config("empty ablation path".into()))
}

/// Parses `path=value`; `value` is read as JSON, falling back to a plain
/// string.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path.trim().to_string(), value))
}

/// Returns `config` with the field at dotted `path` replaced by `value`.
pub fn with_override(config: &TrainConfig, path: &str, value: Value) -> Result<TrainConfig> {
    let mut v = serde_json::to_value(config).expect("config serialises");
    set_path(&mut v, path, value)?;
    serde_json::from_value(v).map_err(|e| Error::Config(format!("override {path}: {e}")))
}

fn label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl AblationSpec {
    /// Cartesian product of every axis, first axis varying slowest.
    pub fn expand(&self) -> Result<Vec<Arm>> {
        for axis in &self.axes {
            if axis.values.is_empty() {
                return Err(Error::Config(format!("ablation axis `{}` has no values", axis.path)));
            }
        }
        let base = serde_json::to_value(&self.base).expect("config serialises");
        let total: usize = self.axes.iter().map(|a| a.values.len()).product();
        let mut arms = Vec::with_capacity(total);
        for mut k in 0..total {
            let mut choice = vec![0; self.axes.len()];
            for (i, axis) in self.axes.iter().enumerate().rev() {
                choice[i] = k % axis.values.len();
                k /= axis.values.len();
            }
            let mut value = base.clone();
            let mut names = Vec::new();
            for (axis, &c) in self.axes.iter().zip(&choice) {
                set_path(&mut value, &axis.path, axis.values[c].clone())?;
                names.push(format!("{}={}", axis.path, label(&axis.values[c])));
            }
            let config: TrainConfig = serde_json::from_value(value)
                .map_err(|e| Error::Config(format!("ablation arm {}: {e}", names.join(","))))?;
            config.validate()?;
            let name = if names.is_empty() { "base".into() } else { names.join(",") };
            arms.push(Arm { name, config });
        }
        Ok(arms)
    }
}

/// Final evaluation of one ablation arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub fingerprint: String,
    pub eval: Vec<StepEval>,
}

/// Fixed-width table: one row per arm, accuracy and CE for every step.
pub fn summary_table(results: &[ArmResult]) -> String {
    let max_r = results.iter().map(|r| r.eval.len()).max().unwrap_or(0);
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(3).max(3);
    let mut out = format!("{:<width$}", "arm");
    for r in 1..=max_r {
        out += &format!("  {:>8}  {:>8}", format!("acc@{r}"), format!("ce@{r}"));
    }
    out.push('\n');
    for res in results {
        out += &format!("{:<width$}", res.name);
        for r in 0..max_r {
            match res.eval.get(r) {
                Some(s) => out += &format!("  {:>8.4}  {:>8.4}", s.accuracy, s.ce_raw),
                None => out += &format!("  {:>8}  {:>8}", "-", "-"),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossVariant;

    #[test]
    fn loss_by_depth_grid_has_six_arms() {
        let spec: AblationSpec = serde_json::from_str(
            r#"{"axes": [
                {"path": "loss.variant", "values": ["final_step_only", "each_step", "monotonic"]},
                {"path": "recursion.steps", "values": [1, 2]}
            ]}"#,
        )
        .unwrap();
        let arms = spec.expand().unwrap();
        assert_eq!(arms.len(), 6);
        assert_eq!(arms[0].name, "loss.variant=final_step_only,recursion.steps=1");
        assert_eq!(arms[5].config.loss.variant, LossVariant::Monotonic);
        assert_eq!(arms[5].config.recursion.steps, 2);
        assert_eq!(arms[4].config.recursion.steps, 1);
    }

    #[test]
    fn bad_paths_are_config_errors() {
        let spec = AblationSpec {
            base: TrainConfig::default(),
            axes: vec![Axis {
                path: "loss.gamma".into(),
                values: vec![Value::from(1)],
            }],
        };
        assert!(matches!(spec.expand(), Err(Error::Config(_))));
        let spec = AblationSpec {
            base: TrainConfig::default(),
            axes: vec![Axis {
                path: "recursion.steps".into(),
                values: vec![Value::from("two")],
            }],
        };
        assert!(spec.expand().is_err());
    }

    #[test]
    fn overrides() {
        let (p, v) = parse_override("loss.variant=each_step").unwrap();
        let c = with_override(&TrainConfig::default(), &p, v).unwrap();
        assert_eq!(c.loss.variant, LossVariant::EachStep);
        let (p, v) = parse_override("recursion.connector.selection={\"strategy\":\"last\",\"k\":2}").unwrap();
        let c = with_override(&TrainConfig::default(), &p, v).unwrap();
        assert_eq!(c.recursion.connector.selection, crate::connector::LayerSelection::Last { k: 2 });
        assert!(parse_override("steps").is_err());
    }

    #[test]
    fn empty_grid_is_the_base() {
        let spec = AblationSpec {
            base: TrainConfig::default(),
            axes: vec![],
        };
        let arms = spec.expand().unwrap();
        assert_eq!(arms.len(), 1);
        assert_eq!(arms[0].name, "base");
    }

    #[test]
    fn table_has_a_row_per_arm() {
        let eval = |r, acc| StepEval {
            r,
            ce_raw: 1.0,
            ce_adjusted: 1.0,
            accuracy: acc,
            degraded_fraction: 0.0,
            tokens: 1,
            samples: 1,
        };
        let t = summary_table(&[
            ArmResult { name: "a".into(), fingerprint: String::new(), eval: vec![eval(1, 0.5)] },
            ArmResult { name: "bb".into(), fingerprint: String::new(), eval: vec![eval(1, 0.5), eval(2, 0.75)] },
        ]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("acc@2"));
        assert!(lines[1].contains('-'));
        assert!(lines[2].contains("0.7500"));
    }
}
