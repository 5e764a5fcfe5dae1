//! Flat `key = value` run configuration.
//!
//! Lines hold one `key = value` pair; `#` starts a comment; blank lines are
//! skipped. Unknown keys and duplicate keys are errors — a config either
//! parses completely or not at all. Flag overrides reuse [`RunConfig::set`]
//! and may touch any key any number of times.

use crate::caching::LayerPlan;
use crate::model::{AttentionStyle, Mode, ModelConfig};
use crate::task::TaskKind;
use crate::{CoreError, Result};

/// Everything one command run needs: the model shape, the run
/// hyperparameters, and output locations.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub n_z: usize,
    pub d_latent: usize,
    pub scorer_hidden: usize,
    pub contexts: Vec<(String, usize)>,
    pub ratio: f64,
    pub active_layers: Vec<usize>,
    pub mode: Mode,
    /// `None` lets the mode pick its canonical attention style.
    pub attention_style: Option<AttentionStyle>,
    pub soft_gate: bool,
    pub context_positions: bool,
    pub seed: u64,
    /// Sampling steps.
    pub steps: usize,
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub task: TaskKind,
    pub eval_samples: usize,
    pub out_dir: String,
    /// Checkpoint to load; empty means fresh seeded initialization.
    pub checkpoint: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            layers: 4,
            d_model: 32,
            heads: 2,
            d_ff: 64,
            n_z: 16,
            d_latent: 8,
            scorer_hidden: 16,
            contexts: vec![("ref".into(), 16), ("traj".into(), 16)],
            ratio: 0.5,
            active_layers: vec![0, 2],
            mode: Mode::FullDit2,
            attention_style: None,
            soft_gate: true,
            context_positions: false,
            seed: 0,
            steps: 30,
            iters: 200,
            lr: 0.05,
            batch: 4,
            task: TaskKind::Copy,
            eval_samples: 16,
            out_dir: "out".into(),
            checkpoint: String::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CoreError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CoreError::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

/// `"ref:16,traj:16"` → named segment list; `"none"` → no segments.
fn parse_contexts(value: &str) -> Result<Vec<(String, usize)>> {
    if value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| {
            let part = part.trim();
            let (name, len) = part.split_once(':').ok_or_else(|| {
                CoreError::Config(format!(
                    "contexts: expected name:len, got {part:?}"
                ))
            })?;
            let name = name.trim();
            if name.is_empty() {
                return Err(CoreError::Config("contexts: empty segment name".into()));
            }
            Ok((name.to_string(), parse_num::<usize>("contexts", len.trim())?))
        })
        .collect()
}

fn parse_layer_list(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| parse_num::<usize>("active_layers", part.trim()))
        .collect()
}

impl RunConfig {
    /// Applies one key. Shared by file parsing and `--set` overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "layers" => self.layers = parse_num(key, value)?,
            "d_model" => self.d_model = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "d_ff" => self.d_ff = parse_num(key, value)?,
            "n_z" => self.n_z = parse_num(key, value)?,
            "d_latent" => self.d_latent = parse_num(key, value)?,
            "scorer_hidden" => self.scorer_hidden = parse_num(key, value)?,
            "contexts" => self.contexts = parse_contexts(value)?,
            "ratio" => self.ratio = parse_num(key, value)?,
            "active_layers" => self.active_layers = parse_layer_list(value)?,
            "mode" => self.mode = Mode::parse(value)?,
            "attention_style" => {
                self.attention_style = match value {
                    "auto" => None,
                    other => Some(AttentionStyle::parse(other)?),
                }
            }
            "soft_gate" => self.soft_gate = parse_bool(key, value)?,
            "context_positions" => self.context_positions = parse_bool(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "iters" => self.iters = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "task" => self.task = TaskKind::parse(value)?,
            "eval_samples" => self.eval_samples = parse_num(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            "checkpoint" => self.checkpoint = value.to_string(),
            _ => return Err(CoreError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a whole config file on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::Config(format!("line {}: expected key = value", no + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(CoreError::Config(format!(
                    "line {}: duplicate key {key:?}",
                    no + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| CoreError::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    /// The model shape this run config describes, fully validated.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            n_z: self.n_z,
            contexts: self.contexts.clone(),
            d_latent: self.d_latent,
            ratio: self.ratio,
            scorer_hidden: self.scorer_hidden,
            plan: LayerPlan::new(self.active_layers.clone(), self.layers)?,
            mode: self.mode,
            style: self.attention_style,
            soft_gate: self.soft_gate,
            context_positions: self.context_positions,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.layers, 4);
        assert_eq!(cfg.steps, 30);
        assert_eq!(cfg.mode, Mode::FullDit2);
        assert!(cfg.attention_style.is_none());
        cfg.model_config().unwrap();
    }

    #[test]
    fn full_file_parses_every_key_kind() {
        let text = "\
# model shape
layers = 6
d_model = 16
heads = 4            # heads divide d_model
d_ff = 32
n_z = 4
d_latent = 4
scorer_hidden = 8
contexts = pose:4, depth:2
ratio = 0.25
active_layers = 0, 3
mode = no_step_cache
attention_style = decoupled
soft_gate = false
context_positions = true

# run
seed = 42
steps = 8
iters = 10
lr = 0.01
batch = 2
task = linear-map
eval_samples = 3
out_dir = scratch/test
checkpoint = scratch/model.fdt2
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.layers, 6);
        assert_eq!(cfg.heads, 4);
        assert_eq!(cfg.contexts, vec![("pose".into(), 4), ("depth".into(), 2)]);
        assert_eq!(cfg.active_layers, vec![0, 3]);
        assert_eq!(cfg.mode, Mode::NoStepCache);
        assert_eq!(cfg.attention_style, Some(AttentionStyle::Decoupled));
        assert!(!cfg.soft_gate);
        assert!(cfg.context_positions);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.task, TaskKind::LinearMap);
        assert_eq!(cfg.out_dir, "scratch/test");
        let mc = cfg.model_config().unwrap();
        assert_eq!(mc.n_c(), 6);
        assert_eq!(mc.plan.active(), &[0, 3]);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::parse("depth = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("depth"), "error should name the key: {msg}");
        assert!(msg.contains("line 1"), "error should locate the line: {msg}");
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = RunConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate key"));
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(RunConfig::parse("just some words\n").is_err());
        assert!(RunConfig::parse("ratio = not-a-number\n").is_err());
        assert!(RunConfig::parse("soft_gate = yes\n").is_err());
        assert!(RunConfig::parse("contexts = ref16\n").is_err());
        assert!(RunConfig::parse("mode = turbo\n").is_err());
        assert!(RunConfig::parse("attention_style = masked_oracle\n").is_err());
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let cfg = RunConfig::parse("\n# all defaults\n   \nseed = 7 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn overrides_may_rewrite_parsed_values() {
        let mut cfg = RunConfig::parse("seed = 1\n").unwrap();
        cfg.set("seed", "9").unwrap();
        cfg.set("mode", "baseline_icc").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.mode, Mode::BaselineIcc);
        assert!(cfg.set("nope", "1").is_err());
    }

    #[test]
    fn contexts_none_clears_segments() {
        let mut cfg = RunConfig::parse("contexts = none\nmode = no_condition\n").unwrap();
        assert!(cfg.contexts.is_empty());
        let mc = cfg.model_config().unwrap();
        assert_eq!(mc.n_c(), 0);
        // Selection modes validate fine with zero context as well.
        cfg.mode = Mode::FullDit2;
        cfg.model_config().unwrap();
    }

    #[test]
    fn invalid_model_shapes_fail_at_model_config() {
        let cfg = RunConfig::parse("heads = 3\n").unwrap();
        assert!(cfg.model_config().is_err(), "32 % 3 != 0");
        let cfg = RunConfig::parse("active_layers = 1, 2\n").unwrap();
        assert!(cfg.model_config().is_err(), "plan must include layer 0");
        let cfg = RunConfig::parse("mode = fulldit2\nattention_style = full\n").unwrap();
        assert!(cfg.model_config().is_err(), "step caching needs decoupled");
    }
}
