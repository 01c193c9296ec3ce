//! Run configuration files.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := ws* '#' any*
//! entry   := ws* section '.' key ws* '=' ws* value ws*
//! section := ident ; key := ident ; ident := [a-z0-9_]+
//! ```
//!
//! Values are numbers, `true`/`false`, names, paths or comma-separated lists
//! (an empty value is an empty list). Unknown keys, duplicate keys and values
//! of the wrong type are errors reported with line and column.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use ickd::bank::{NegativeStrategy, PositiveCount};
use ickd::train::{Ablation, Mode, SweepAxis, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs,
    Spirals,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub noise: f64,
    pub seed: u64,
    pub test_per_class: usize,
    pub train_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs,
            classes: 10,
            per_class: 60,
            dim: 16,
            spread: 0.3,
            noise: 0.05,
            seed: 7,
            test_per_class: 15,
            train_file: None,
            test_file: None,
        }
    }
}

/// Hidden-layer widths; input and output widths come from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub teacher_hidden: Vec<usize>,
    pub student_hidden: Vec<usize>,
    /// Second online student; defaults to the student widths.
    pub peer_hidden: Option<Vec<usize>>,
    pub teacher_checkpoint: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            teacher_hidden: vec![128, 64],
            student_hidden: vec![8],
            peer_hidden: None,
            teacher_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub rows: Vec<Ablation>,
    pub weight_variants: bool,
    pub sweep_axes: Vec<SweepAxis>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            rows: vec![Ablation::KdOnly, Ablation::KdPicd, Ablation::KdNicd, Ablation::Full],
            weight_variants: true,
            sweep_axes: SweepAxis::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigError {
    /// File path, or `--set` for command-line overrides.
    pub origin: String,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}: {}", self.origin, self.line, self.column, self.message)
    }
}

enum SetError {
    UnknownKey,
    BadValue(String),
}

fn num<T: std::str::FromStr>(v: &str, what: &str) -> Result<T, SetError> {
    v.parse()
        .map_err(|_| SetError::BadValue(format!("expected {what}, found {v:?}")))
}

fn real(v: &str) -> Result<f64, SetError> {
    let x: f64 = num(v, "a number")?;
    if !x.is_finite() {
        return Err(SetError::BadValue(format!("expected a finite number, found {v:?}")));
    }
    Ok(x)
}

fn flag(v: &str) -> Result<bool, SetError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(SetError::BadValue(format!("expected true or false, found {v:?}"))),
    }
}

fn list<T>(v: &str, item: impl Fn(&str) -> Result<T, SetError>) -> Result<Vec<T>, SetError> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| item(s.trim())).collect()
}

fn path(v: &str) -> Result<Option<PathBuf>, SetError> {
    Ok((!v.is_empty()).then(|| PathBuf::from(v)))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn named<T>(v: &str, parse: impl Fn(&str) -> Option<T>, options: &str) -> Result<T, SetError> {
    parse(v).ok_or_else(|| SetError::BadValue(format!("expected one of {options}, found {v:?}")))
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<(), SetError> {
        let t = &mut self.train;
        match key {
            "data.source" => {
                self.data.source = named(
                    v,
                    |s| match s {
                        "blobs" => Some(DataSource::Blobs),
                        "spirals" => Some(DataSource::Spirals),
                        "file" => Some(DataSource::File),
                        _ => None,
                    },
                    "blobs, spirals, file",
                )?
            }
            "data.classes" => self.data.classes = num(v, "an integer")?,
            "data.per_class" => self.data.per_class = num(v, "an integer")?,
            "data.dim" => self.data.dim = num(v, "an integer")?,
            "data.spread" => self.data.spread = real(v)?,
            "data.noise" => self.data.noise = real(v)?,
            "data.seed" => self.data.seed = num(v, "an integer")?,
            "data.test_per_class" => self.data.test_per_class = num(v, "an integer")?,
            "data.train_file" => self.data.train_file = path(v)?,
            "data.test_file" => self.data.test_file = path(v)?,

            "model.teacher_hidden" => self.model.teacher_hidden = list(v, |s| num(s, "an integer"))?,
            "model.student_hidden" => self.model.student_hidden = list(v, |s| num(s, "an integer"))?,
            "model.peer_hidden" => {
                self.model.peer_hidden = if v.is_empty() {
                    None
                } else {
                    Some(list(v, |s| num(s, "an integer"))?)
                }
            }
            "model.teacher_checkpoint" => self.model.teacher_checkpoint = path(v)?,

            "train.epochs" => t.epochs = num(v, "an integer")?,
            "train.batch_size" => t.batch_size = num(v, "an integer")?,
            "train.lr" => t.lr.initial = real(v)?,
            "train.lr_decay_epochs" => t.lr.decay_epochs = list(v, |s| num(s, "an integer"))?,
            "train.lr_decay_factor" => t.lr.decay_factor = real(v)?,
            "train.momentum" => t.momentum = real(v)?,
            "train.weight_decay" => t.weight_decay = real(v)?,
            "train.seed" => t.seed = num(v, "an integer")?,
            "train.mode" => t.mode = named(v, Mode::parse, "offline, online, teacher_free, ce_only")?,
            "train.ablation" => {
                t.ablation = named(v, Ablation::parse, "none, kd_only, kd_picd, kd_nicd, full, ickd_all")?
            }
            "train.record_wall_time" => t.record_wall_time = flag(v)?,

            "loss.alpha" => t.loss.alpha = real(v)?,
            "loss.tau_kd" => t.loss.tau_kd = real(v)?,
            "loss.tau1" => t.loss.tau1 = real(v)?,
            "loss.tau_nicd" => t.loss.tau_nicd = real(v)?,
            "loss.gamma_picd" => t.loss.gamma_picd = real(v)?,
            "loss.gamma_nicd" => t.loss.gamma_nicd = real(v)?,
            "loss.use_a_weights" => t.loss.use_a_weights = flag(v)?,
            "loss.use_b_weights" => t.loss.use_b_weights = flag(v)?,
            "loss.temperature_scaling" => t.loss.temperature_scaling = flag(v)?,

            "retrieval.beta1" => t.retrieval.beta1 = real(v)?,
            "retrieval.beta2" => t.retrieval.beta2 = real(v)?,
            "retrieval.k_positive" => {
                t.retrieval.k_positive = if v == "all" {
                    PositiveCount::All
                } else {
                    PositiveCount::Top(num(v, "an integer or all")?)
                }
            }
            "retrieval.n_negative" => t.retrieval.n_negative = num(v, "an integer")?,
            "retrieval.negative_strategy" => {
                t.retrieval.negative_strategy = named(
                    v,
                    |s| match s {
                        "hardest" => Some(NegativeStrategy::Hardest),
                        "random" => Some(NegativeStrategy::Random),
                        _ => None,
                    },
                    "hardest, random",
                )?
            }

            "online.mirror" => t.online.mirror = flag(v)?,
            "online.peer_seed" => t.online.peer_seed = num(v, "an integer")?,

            "experiment.seeds" => self.experiment.seeds = list(v, |s| num(s, "an integer"))?,
            "experiment.rows" => {
                self.experiment.rows = list(v, |s| {
                    named(s, Ablation::parse, "none, kd_only, kd_picd, kd_nicd, full, ickd_all")
                })?
            }
            "experiment.weight_variants" => self.experiment.weight_variants = flag(v)?,
            "experiment.sweep_axes" => {
                self.experiment.sweep_axes = list(v, |s| {
                    named(s, SweepAxis::parse, "k, beta1, beta2, gamma_picd, gamma_nicd")
                })?
            }
            _ => return Err(SetError::UnknownKey),
        }
        Ok(())
    }

    /// Every key with its current value, in grammar form.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let t = &self.train;
        let d = &self.data;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put(
            "data.source",
            match d.source {
                DataSource::Blobs => "blobs",
                DataSource::Spirals => "spirals",
                DataSource::File => "file",
            }
            .into(),
        );
        put("data.classes", d.classes.to_string());
        put("data.per_class", d.per_class.to_string());
        put("data.dim", d.dim.to_string());
        put("data.spread", d.spread.to_string());
        put("data.noise", d.noise.to_string());
        put("data.seed", d.seed.to_string());
        put("data.test_per_class", d.test_per_class.to_string());
        put("data.train_file", show_path(&d.train_file));
        put("data.test_file", show_path(&d.test_file));
        put("model.teacher_hidden", join(&self.model.teacher_hidden));
        put("model.student_hidden", join(&self.model.student_hidden));
        put(
            "model.peer_hidden",
            self.model.peer_hidden.as_deref().map(join).unwrap_or_default(),
        );
        put("model.teacher_checkpoint", show_path(&self.model.teacher_checkpoint));
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.lr", t.lr.initial.to_string());
        put("train.lr_decay_epochs", join(&t.lr.decay_epochs));
        put("train.lr_decay_factor", t.lr.decay_factor.to_string());
        put("train.momentum", t.momentum.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("train.seed", t.seed.to_string());
        put("train.mode", t.mode.name().into());
        put("train.ablation", t.ablation.name().into());
        put("train.record_wall_time", t.record_wall_time.to_string());
        put("loss.alpha", t.loss.alpha.to_string());
        put("loss.tau_kd", t.loss.tau_kd.to_string());
        put("loss.tau1", t.loss.tau1.to_string());
        put("loss.tau_nicd", t.loss.tau_nicd.to_string());
        put("loss.gamma_picd", t.loss.gamma_picd.to_string());
        put("loss.gamma_nicd", t.loss.gamma_nicd.to_string());
        put("loss.use_a_weights", t.loss.use_a_weights.to_string());
        put("loss.use_b_weights", t.loss.use_b_weights.to_string());
        put("loss.temperature_scaling", t.loss.temperature_scaling.to_string());
        put("retrieval.beta1", t.retrieval.beta1.to_string());
        put("retrieval.beta2", t.retrieval.beta2.to_string());
        put(
            "retrieval.k_positive",
            match t.retrieval.k_positive {
                PositiveCount::Top(k) => k.to_string(),
                PositiveCount::All => "all".into(),
            },
        );
        put("retrieval.n_negative", t.retrieval.n_negative.to_string());
        put(
            "retrieval.negative_strategy",
            match t.retrieval.negative_strategy {
                NegativeStrategy::Hardest => "hardest",
                NegativeStrategy::Random => "random",
            }
            .into(),
        );
        put("online.mirror", t.online.mirror.to_string());
        put("online.peer_seed", t.online.peer_seed.to_string());
        put("experiment.seeds", join(&self.experiment.seeds));
        put(
            "experiment.rows",
            self.experiment
                .rows
                .iter()
                .map(|a| a.name())
                .collect::<Vec<_>>()
                .join(","),
        );
        put(
            "experiment.weight_variants",
            self.experiment.weight_variants.to_string(),
        );
        put(
            "experiment.sweep_axes",
            self.experiment
                .sweep_axes
                .iter()
                .map(|a| a.name())
                .collect::<Vec<_>>()
                .join(","),
        );
        m
    }

    /// The configuration as a file that parses back to the same value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = String::new();
        for (k, v) in self.entries() {
            let s = k.split('.').next().unwrap_or_default();
            if s != section {
                if !out.is_empty() {
                    out.push('\n');
                }
                section = s.to_string();
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

fn column_of(line: &str, sub: &str) -> usize {
    let byte = sub.as_ptr() as usize - line.as_ptr() as usize;
    line[..byte].chars().count() + 1
}

/// Applies one `key = value` line. `line_no` and `origin` only feed errors.
fn apply_line(
    cfg: &mut RunConfig,
    seen: &mut BTreeMap<String, usize>,
    raw: &str,
    origin: &str,
    line_no: usize,
) -> Result<(), ConfigError> {
    let err = |column: usize, message: String| ConfigError {
        origin: origin.to_string(),
        line: line_no,
        column,
        message,
    };
    let trimmed = raw.trim();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(());
    }
    let Some(eq) = raw.find('=') else {
        return Err(err(column_of(raw, trimmed), "expected `section.key = value`".into()));
    };
    let key = raw[..eq].trim();
    let value = raw[eq + 1..].trim();
    if key.is_empty() {
        return Err(err(column_of(raw, trimmed), "missing key before `=`".into()));
    }
    let key_col = column_of(raw, key);
    match key.split_once('.') {
        Some((s, k)) if is_ident(s) && is_ident(k) => {}
        _ => return Err(err(key_col, format!("malformed key {key:?}, expected `section.key`"))),
    }
    if let Some(prev) = seen.insert(key.to_string(), line_no) {
        return Err(err(
            key_col,
            format!("duplicate key {key:?} (first set on line {prev})"),
        ));
    }
    let value_col = if value.is_empty() {
        raw.len().min(eq + 1) + 1
    } else {
        column_of(raw, value)
    };
    cfg.set(key, value).map_err(|e| match e {
        SetError::UnknownKey => err(key_col, format!("unknown key {key:?}")),
        SetError::BadValue(m) => err(value_col, format!("{key}: {m}")),
    })
}

pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    apply_text(&mut cfg, text, origin)?;
    Ok(cfg)
}

fn apply_text(cfg: &mut RunConfig, text: &str, origin: &str) -> Result<(), ConfigError> {
    let mut seen = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        apply_line(cfg, &mut seen, line, origin, i + 1)?;
    }
    Ok(())
}

/// Applies `--set key=value` overrides in order; later ones win.
pub fn apply_overrides(cfg: &mut RunConfig, overrides: &[String]) -> Result<(), ConfigError> {
    for (i, o) in overrides.iter().enumerate() {
        let mut seen = BTreeMap::new();
        if !o.contains('=') {
            return Err(ConfigError {
                origin: "--set".into(),
                line: i + 1,
                column: 1,
                message: format!("expected key=value, found {o:?}"),
            });
        }
        apply_line(cfg, &mut seen, o, "--set", i + 1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.train.retrieval.k_positive = PositiveCount::All;
        cfg.model.peer_hidden = Some(vec![4, 3]);
        cfg.data.train_file = Some("a/b.bin".into());
        cfg.train.lr.decay_epochs = vec![];
        let back = parse_config(&cfg.to_text(), "mem").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = RunConfig::default();
        for (k, v) in cfg.entries() {
            let mut c = RunConfig::default();
            assert!(c.set(&k, &v).is_ok(), "{k} = {v}");
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn parses_comments_and_values() {
        let text = "# header\n\n  train.epochs = 12\nloss.gamma_picd=0.5\nretrieval.k_positive = all\nexperiment.rows = kd_only, full\n";
        let cfg = parse_config(text, "t").unwrap();
        assert_eq!(cfg.train.epochs, 12);
        assert_eq!(cfg.train.loss.gamma_picd, 0.5);
        assert_eq!(cfg.train.retrieval.k_positive, PositiveCount::All);
        assert_eq!(cfg.experiment.rows, vec![Ablation::KdOnly, Ablation::Full]);
    }

    #[test]
    fn unknown_key_reports_position() {
        let e = parse_config("train.epochs = 3\n  loss.gama_picd = 1\n", "run.conf").unwrap_err();
        assert_eq!((e.line, e.column), (2, 3));
        assert!(e.message.contains("loss.gama_picd"), "{e}");
        assert_eq!(e.to_string(), "run.conf:2:3: unknown key \"loss.gama_picd\"");
    }

    #[test]
    fn bad_values_report_value_column() {
        let e = parse_config("train.epochs = ten\n", "c").unwrap_err();
        assert_eq!((e.line, e.column), (1, 16));
        let e = parse_config("loss.use_a_weights = yes\n", "c").unwrap_err();
        assert!(e.message.contains("true or false"));
        let e = parse_config("train.lr = inf\n", "c").unwrap_err();
        assert!(e.message.contains("finite"));
    }

    #[test]
    fn structural_errors() {
        assert!(parse_config("train.epochs 3\n", "c").is_err());
        assert!(parse_config("epochs = 3\n", "c").is_err());
        assert!(parse_config("Train.epochs = 3\n", "c").is_err());
        let e = parse_config("train.epochs = 3\ntrain.epochs = 4\n", "c").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.message.contains("duplicate"));
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut cfg = RunConfig::default();
        apply_overrides(&mut cfg, &["train.epochs=3".into(), "train.epochs=5".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        let e = apply_overrides(&mut cfg, &["train.epochs=1".into(), "nope".into()]).unwrap_err();
        assert_eq!((e.origin.as_str(), e.line), ("--set", 2));
        let e = apply_overrides(&mut cfg, &["loss.bogus=1".into()]).unwrap_err();
        assert!(e.message.contains("loss.bogus"));
    }
}
