//! Strict, line-based experiment configuration.
//!
//! The format is UTF-8 text, one `section.key = value` per line; `#` starts
//! a comment line and blank lines are ignored. Parsing is strict: an unknown
//! or duplicated key is a hard error naming the key and line, and every
//! value must convert cleanly to its declared type. Relative paths are
//! resolved against the directory containing the config file, so a config
//! and its data files travel together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use minidistill::distill::{DistillConfig, Objective, Reduction, TeacherCombination};
use minidistill::trainer::{OptimizerConfig, TrainConfig};

use crate::error::{CliError, Result};

/// Where the training grammar comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GrammarSource {
    Builtin,
    File(PathBuf),
}

/// Architecture of one model section (`teacher.*` or `student.*`). The
/// vocabulary size always comes from the data, and `max_seq_len` defaults to
/// the training sequence length.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_multiplier: usize,
    pub max_seq_len: Option<usize>,
    pub norm_epsilon: f64,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
}

/// Explicit `distill.*` keys. Unset keys fall back to the objective's
/// conventional defaults at resolution time, so a comparison grid can swap
/// the objective per variant while honoring every explicit override.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistillOverrides {
    pub objective: Option<Objective>,
    pub temperature: Option<f64>,
    pub alpha: Option<f64>,
    pub beta_start: Option<f64>,
    pub beta_floor: Option<f64>,
    pub chunk_size: Option<usize>,
    pub teacher_combination: Option<TeacherCombination>,
    pub reduction: Option<Reduction>,
}

impl DistillOverrides {
    pub fn objective(&self) -> Objective {
        self.objective.unwrap_or(Objective::Reverse)
    }

    pub fn resolve(&self, objective: Objective) -> DistillConfig {
        let mut cfg = DistillConfig::defaults(objective);
        if let Some(t) = self.temperature {
            cfg.temperature = t;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(b) = self.beta_start {
            cfg.beta_start = b;
        }
        if let Some(b) = self.beta_floor {
            cfg.beta_floor = b;
        }
        if let Some(k) = self.chunk_size {
            cfg.chunk_size = k;
        }
        if let Some(c) = self.teacher_combination {
            cfg.teacher_combination = c;
        }
        if let Some(r) = self.reduction {
            cfg.reduction = r;
        }
        cfg
    }
}

/// Everything a command needs, parsed and typed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub out_dir: Option<PathBuf>,
    pub grammar: GrammarSource,
    pub data_tokens: usize,
    pub data_seed: u64,
    pub eval_tokens: usize,
    pub minimal_pairs: usize,
    pub teacher: ModelSection,
    pub teacher2_checkpoint: Option<PathBuf>,
    pub student: ModelSection,
    pub distill: DistillOverrides,
    pub train: TrainConfig,
    pub optimizer: OptimizerConfig,
    pub variants: Vec<String>,
}

impl ExperimentConfig {
    /// The output directory, which must come from `run.out` or `--out`.
    pub fn require_out(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| CliError::Config("run.out is not set and no --out was given".into()))
    }
}

/// Read and parse a config file; the error for a missing file names the path.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read config file '{}': {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config(&text, base)
}

struct Entries {
    map: BTreeMap<String, (String, usize)>,
    base: PathBuf,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.map.remove(key)
    }

    fn take_str(&mut self, key: &str) -> Option<String> {
        self.take(key).map(|(v, _)| v)
    }

    fn take_path(&mut self, key: &str) -> Option<PathBuf> {
        self.take(key).map(|(v, _)| self.resolve(&v))
    }

    fn resolve(&self, value: &str) -> PathBuf {
        let p = Path::new(value);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn take_parsed<T, F>(&mut self, key: &str, kind: &str, convert: F) -> Result<Option<T>>
    where
        F: Fn(&str) -> Option<T>,
    {
        match self.take(key) {
            None => Ok(None),
            Some((value, line)) => convert(&value).map(Some).ok_or_else(|| {
                CliError::Config(format!(
                    "key '{key}': expected {kind}, got '{value}' (line {line})"
                ))
            }),
        }
    }

    fn take_usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.take_parsed(key, "an unsigned integer", |v| v.parse().ok())
    }

    fn take_u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.take_parsed(key, "an unsigned integer", |v| v.parse().ok())
    }

    fn take_f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.take_parsed(key, "a number", |v| v.parse().ok())
    }
}

fn split_line(line: &str, number: usize) -> Result<Option<(String, String)>> {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(None);
    }
    let (key, value) = trimmed.split_once('=').ok_or_else(|| {
        CliError::Config(format!("line {number} is not 'section.key = value': '{trimmed}'"))
    })?;
    let key = key.trim();
    let value = value.trim();
    if key.is_empty() || !key.contains('.') {
        return Err(CliError::Config(format!(
            "line {number}: key '{key}' must be of the form section.key"
        )));
    }
    if value.is_empty() {
        return Err(CliError::Config(format!("line {number}: key '{key}' has an empty value")));
    }
    Ok(Some((key.to_string(), value.to_string())))
}

fn model_section(
    entries: &mut Entries,
    prefix: &str,
    d_model: usize,
    n_layers: usize,
    seed: u64,
) -> Result<ModelSection> {
    Ok(ModelSection {
        d_model: entries.take_usize(&format!("{prefix}.d_model"))?.unwrap_or(d_model),
        n_layers: entries.take_usize(&format!("{prefix}.n_layers"))?.unwrap_or(n_layers),
        n_heads: entries.take_usize(&format!("{prefix}.n_heads"))?.unwrap_or(4),
        ffn_multiplier: entries
            .take_usize(&format!("{prefix}.ffn_multiplier"))?
            .unwrap_or(4),
        max_seq_len: entries.take_usize(&format!("{prefix}.max_seq_len"))?,
        norm_epsilon: entries
            .take_f64(&format!("{prefix}.norm_epsilon"))?
            .unwrap_or(1e-6),
        seed: entries.take_u64(&format!("{prefix}.seed"))?.unwrap_or(seed),
        checkpoint: entries.take_path(&format!("{prefix}.checkpoint")),
    })
}

pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let mut map: BTreeMap<String, (String, usize)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let number = i + 1;
        if let Some((key, value)) = split_line(line, number)? {
            if let Some((_, first)) = map.get(&key) {
                return Err(CliError::Config(format!(
                    "key '{key}' is set twice (lines {first} and {number})"
                )));
            }
            map.insert(key, (value, number));
        }
    }
    let mut entries = Entries {
        map,
        base: base_dir.to_path_buf(),
    };

    let run_id = entries.take_str("run.id").unwrap_or_else(|| "run".into());
    let out_dir = entries.take_path("run.out");

    let grammar = match entries.take("data.grammar") {
        None => GrammarSource::Builtin,
        Some((v, _)) if v == "builtin" => GrammarSource::Builtin,
        Some((v, _)) => GrammarSource::File(entries.resolve(&v)),
    };
    let data_tokens = entries.take_usize("data.tokens")?.unwrap_or(100_000);
    let data_seed = entries.take_u64("data.seed")?.unwrap_or(0);
    let eval_tokens = entries.take_usize("data.eval_tokens")?.unwrap_or(5_000);
    let minimal_pairs = entries.take_usize("data.minimal_pairs")?.unwrap_or(64);

    let teacher = model_section(&mut entries, "teacher", 128, 2, 1)?;
    let student = model_section(&mut entries, "student", 64, 1, 2)?;
    let teacher2_checkpoint = entries.take_path("teacher2.checkpoint");

    let distill = DistillOverrides {
        objective: entries.take_parsed("distill.objective", "'forward' or 'reverse'", |v| {
            match v {
                "forward" => Some(Objective::Forward),
                "reverse" => Some(Objective::Reverse),
                _ => None,
            }
        })?,
        temperature: entries.take_f64("distill.temperature")?,
        alpha: entries.take_f64("distill.alpha")?,
        beta_start: entries.take_f64("distill.beta_start")?,
        beta_floor: entries.take_f64("distill.beta_floor")?,
        chunk_size: entries.take_usize("distill.chunk_size")?,
        teacher_combination: entries.take_parsed(
            "distill.teacher_combination",
            "'mean_loss' or 'mean_prob'",
            |v| match v {
                "mean_loss" => Some(TeacherCombination::MeanLoss),
                "mean_prob" => Some(TeacherCombination::MeanProb),
                _ => None,
            },
        )?,
        reduction: entries.take_parsed("distill.reduction", "'mean' or 'sum'", |v| match v {
            "mean" => Some(Reduction::Mean),
            "sum" => Some(Reduction::Sum),
            _ => None,
        })?,
    };

    let train_defaults = TrainConfig::defaults();
    let train = TrainConfig {
        batch_size: entries
            .take_usize("train.batch_size")?
            .unwrap_or(train_defaults.batch_size),
        seq_len: entries
            .take_usize("train.seq_len")?
            .unwrap_or(train_defaults.seq_len),
        epochs: entries
            .take_usize("train.epochs")?
            .unwrap_or(train_defaults.epochs),
        grad_accum: entries
            .take_usize("train.grad_accum")?
            .unwrap_or(train_defaults.grad_accum),
        seed: entries.take_u64("train.seed")?.unwrap_or(train_defaults.seed),
        checkpoint_every: entries
            .take_usize("train.checkpoint_every")?
            .unwrap_or(train_defaults.checkpoint_every),
    };

    let opt_defaults = OptimizerConfig::defaults();
    let optimizer = OptimizerConfig {
        learning_rate: entries
            .take_f64("optimizer.learning_rate")?
            .unwrap_or(opt_defaults.learning_rate),
        beta1: entries.take_f64("optimizer.beta1")?.unwrap_or(opt_defaults.beta1),
        beta2: entries.take_f64("optimizer.beta2")?.unwrap_or(opt_defaults.beta2),
        epsilon: entries
            .take_f64("optimizer.epsilon")?
            .unwrap_or(opt_defaults.epsilon),
        weight_decay: entries
            .take_f64("optimizer.weight_decay")?
            .unwrap_or(opt_defaults.weight_decay),
        t_max: entries.take_usize("optimizer.t_max")?.unwrap_or(opt_defaults.t_max),
        eta_min: entries
            .take_f64("optimizer.eta_min")?
            .unwrap_or(opt_defaults.eta_min),
    };

    let variants = entries
        .take_str("compare.variants")
        .map(|v| {
            v.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
        .unwrap_or_default();

    if let Some((key, (_, line))) = entries.map.iter().next() {
        return Err(CliError::Config(format!(
            "unknown configuration key '{key}' (line {line})"
        )));
    }

    Ok(ExperimentConfig {
        run_id,
        out_dir,
        grammar,
        data_tokens,
        data_seed,
        eval_tokens,
        minimal_pairs,
        teacher,
        teacher2_checkpoint,
        student,
        distill,
        train,
        optimizer,
        variants,
    })
}
