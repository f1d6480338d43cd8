use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{PipelineError, Result};
use crate::corpus::CorpusSpec;
use crate::model::{ModelConfig, ScaleMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub algorithm: Optimizer,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Stop once the dev EER is at or below this value.
    pub target_dev_eer: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            algorithm: Optimizer::Adam,
            lr: 1e-4,
            batch_size: 16,
            epochs: 30,
            weight_decay: 0.0,
            target_dev_eer: None,
        }
    }
}

/// File locations; unset paths are `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub audio_dir: Option<PathBuf>,
    /// Trial list for `featurize`, `score` and `eval`.
    pub protocol: Option<PathBuf>,
    pub train_protocol: Option<PathBuf>,
    pub dev_protocol: Option<PathBuf>,
    pub feature_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
    pub score_out: Option<PathBuf>,
    /// Score file read by `eval`.
    pub scores: Option<PathBuf>,
    pub det_csv: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub sweep_out: Option<PathBuf>,
}

/// Everything a command needs, loaded from a `key=value` file and overridden
/// by `--key value` flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub paths: Paths,
    /// Miss-cost weight of the detection cost function.
    pub beta: f64,
    pub corpus: CorpusSpec,
    pub sweep_frame_ms: Vec<f64>,
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            paths: Paths::default(),
            beta: 1.0,
            corpus: CorpusSpec::default(),
            sweep_frame_ms: vec![20.0, 32.0, 40.0],
            resume: false,
        }
    }
}

/// Every recognised key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("alpha", "pre-emphasis coefficient"),
    ("preemphasis_sign", "+1 or -1"),
    ("clip_seconds", "clip length after padding/truncation"),
    ("frame_ms", "analysis frame length"),
    ("hop_ms", "frame advance"),
    ("n_mels", "mel filters"),
    ("fmin", "lowest mel edge in Hz"),
    ("fmax", "highest mel edge in Hz"),
    ("log_floor", "floor inside the log"),
    ("center", "reflect-pad so frames are centred"),
    ("deep_channels", "channels of the learned raw-frame path"),
    ("base_channels", "classifier stem channels"),
    ("lambda", "weight of the clip-level loss"),
    ("scale_mode", "attention scale: sqrt_t or sqrt_d"),
    ("seed", "seed for init, shuffling and simulation"),
    ("optimizer", "adam"),
    ("lr", "learning rate"),
    ("batch_size", "clips per step"),
    ("epochs", "maximum epochs"),
    ("weight_decay", "decoupled weight decay"),
    ("target_dev_eer", "stop early at this dev EER (none to disable)"),
    ("beta", "miss-cost weight of the detection cost"),
    ("audio_dir", "directory holding <utt>.wav/.flac"),
    ("protocol", "trial list for featurize/score/eval"),
    ("train_protocol", "training trial list"),
    ("dev_protocol", "development trial list"),
    ("feature_dir", "feature cache directory"),
    ("checkpoint", "model checkpoint path"),
    ("train_log", "training log CSV (default <checkpoint>.log.csv)"),
    ("score_out", "score file written by score"),
    ("scores", "score file read by eval"),
    ("det_csv", "DET curve CSV written by eval"),
    ("out_dir", "output directory for simulate/sweep"),
    ("sweep_out", "sweep CSV (default <out_dir>/sweep.csv)"),
    ("sweep_frame_ms", "comma-separated frame lengths for sweep"),
    ("n_bona_fide", "simulated bona fide clips"),
    ("n_replay", "simulated replay clips"),
    ("n_df_surrogate", "simulated DF-surrogate clips"),
    ("dev_fraction", "fraction of each simulated class held out for dev"),
    ("record_env", "simulate a room in front of the replay recording"),
    ("resume", "continue training from <checkpoint>.state"),
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| PipelineError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(PipelineError::Config(format!("{key}: expected true/false, got {value:?}"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.model.dsp;
        let p = &mut self.paths;
        match key {
            "alpha" => d.alpha = parse_num(key, value)?,
            "preemphasis_sign" => d.preemphasis_sign = parse_num(key, value)?,
            "clip_seconds" => d.clip_seconds = parse_num(key, value)?,
            "frame_ms" => d.frame_ms = parse_num(key, value)?,
            "hop_ms" => d.hop_ms = parse_num(key, value)?,
            "n_mels" => d.n_mels = parse_num(key, value)?,
            "fmin" => d.fmin = parse_num(key, value)?,
            "fmax" => d.fmax = parse_num(key, value)?,
            "log_floor" => d.log_floor = parse_num(key, value)?,
            "center" => d.center = parse_bool(key, value)?,
            "deep_channels" => self.model.deep_channels = parse_num(key, value)?,
            "base_channels" => self.model.base_channels = parse_num(key, value)?,
            "lambda" => self.model.lambda = parse_num(key, value)?,
            "scale_mode" => {
                self.model.scale_mode = ScaleMode::parse(value.trim()).ok_or_else(|| {
                    PipelineError::Config(format!("scale_mode: unknown {value:?}"))
                })?
            }
            "seed" => {
                self.model.seed = parse_num(key, value)?;
                self.corpus.seed = self.model.seed;
            }
            "optimizer" => match value.trim() {
                "adam" => self.optimizer.algorithm = Optimizer::Adam,
                other => {
                    return Err(PipelineError::Config(format!("optimizer: unknown {other:?}")))
                }
            },
            "lr" => self.optimizer.lr = parse_num(key, value)?,
            "batch_size" => self.optimizer.batch_size = parse_num(key, value)?,
            "epochs" => self.optimizer.epochs = parse_num(key, value)?,
            "weight_decay" => self.optimizer.weight_decay = parse_num(key, value)?,
            "target_dev_eer" => {
                self.optimizer.target_dev_eer = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "beta" => self.beta = parse_num(key, value)?,
            "audio_dir" => p.audio_dir = opt_path(value),
            "protocol" => p.protocol = opt_path(value),
            "train_protocol" => p.train_protocol = opt_path(value),
            "dev_protocol" => p.dev_protocol = opt_path(value),
            "feature_dir" => p.feature_dir = opt_path(value),
            "checkpoint" => p.checkpoint = opt_path(value),
            "train_log" => p.train_log = opt_path(value),
            "score_out" => p.score_out = opt_path(value),
            "scores" => p.scores = opt_path(value),
            "det_csv" => p.det_csv = opt_path(value),
            "out_dir" => p.out_dir = opt_path(value),
            "sweep_out" => p.sweep_out = opt_path(value),
            "sweep_frame_ms" => {
                self.sweep_frame_ms = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_>>()?
            }
            "n_bona_fide" => self.corpus.bona_fide = parse_num(key, value)?,
            "n_replay" => self.corpus.replay = parse_num(key, value)?,
            "n_df_surrogate" => self.corpus.df_surrogate = parse_num(key, value)?,
            "dev_fraction" => self.corpus.dev_fraction = parse_num(key, value)?,
            "record_env" => self.corpus.record_env = parse_bool(key, value)?,
            "resume" => self.resume = parse_bool(key, value)?,
            _ => return Err(PipelineError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("{origin}:{}: expected key=value, got {raw:?}", i + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| PipelineError::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Optional config file, then overrides in order; later settings win.
    pub fn load<'a>(
        file: Option<&Path>,
        overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Current value of every key, in [`CONFIG_KEYS`] order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let d = &self.model.dsp;
        let p = &self.paths;
        let o = &self.optimizer;
        let c = &self.corpus;
        CONFIG_KEYS
            .iter()
            .map(|&(k, _)| {
                let v = match k {
                    "alpha" => d.alpha.to_string(),
                    "preemphasis_sign" => d.preemphasis_sign.to_string(),
                    "clip_seconds" => d.clip_seconds.to_string(),
                    "frame_ms" => d.frame_ms.to_string(),
                    "hop_ms" => d.hop_ms.to_string(),
                    "n_mels" => d.n_mels.to_string(),
                    "fmin" => d.fmin.to_string(),
                    "fmax" => d.fmax.to_string(),
                    "log_floor" => d.log_floor.to_string(),
                    "center" => d.center.to_string(),
                    "deep_channels" => self.model.deep_channels.to_string(),
                    "base_channels" => self.model.base_channels.to_string(),
                    "lambda" => self.model.lambda.to_string(),
                    "scale_mode" => self.model.scale_mode.as_str().into(),
                    "seed" => self.model.seed.to_string(),
                    "optimizer" => "adam".into(),
                    "lr" => o.lr.to_string(),
                    "batch_size" => o.batch_size.to_string(),
                    "epochs" => o.epochs.to_string(),
                    "weight_decay" => o.weight_decay.to_string(),
                    "target_dev_eer" => o
                        .target_dev_eer
                        .map_or_else(|| "none".into(), |v| v.to_string()),
                    "beta" => self.beta.to_string(),
                    "audio_dir" => show_path(&p.audio_dir),
                    "protocol" => show_path(&p.protocol),
                    "train_protocol" => show_path(&p.train_protocol),
                    "dev_protocol" => show_path(&p.dev_protocol),
                    "feature_dir" => show_path(&p.feature_dir),
                    "checkpoint" => show_path(&p.checkpoint),
                    "train_log" => show_path(&p.train_log),
                    "score_out" => show_path(&p.score_out),
                    "scores" => show_path(&p.scores),
                    "det_csv" => show_path(&p.det_csv),
                    "out_dir" => show_path(&p.out_dir),
                    "sweep_out" => show_path(&p.sweep_out),
                    "sweep_frame_ms" => self
                        .sweep_frame_ms
                        .iter()
                        .map(f64::to_string)
                        .collect::<Vec<_>>()
                        .join(","),
                    "n_bona_fide" => c.bona_fide.to_string(),
                    "n_replay" => c.replay.to_string(),
                    "n_df_surrogate" => c.df_surrogate.to_string(),
                    "dev_fraction" => c.dev_fraction.to_string(),
                    "record_env" => c.record_env.to_string(),
                    "resume" => self.resume.to_string(),
                    _ => unreachable!("every key is listed"),
                };
                (k, v)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Checks every numeric knob; paths are checked per command.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optimizer;
        if !(1e-5..=1e-1).contains(&o.lr) {
            return Err(PipelineError::Config(format!("lr {} outside [1e-5, 1e-1]", o.lr)));
        }
        if o.batch_size == 0 {
            return Err(PipelineError::Config("batch_size must be >= 1".into()));
        }
        if o.epochs == 0 {
            return Err(PipelineError::Config("epochs must be >= 1".into()));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(PipelineError::Config("weight_decay must be >= 0".into()));
        }
        if let Some(t) = o.target_dev_eer {
            if !(0.0..=1.0).contains(&t) {
                return Err(PipelineError::Config(format!("target_dev_eer {t} outside [0, 1]")));
            }
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(PipelineError::Config(format!("beta {} must be > 0", self.beta)));
        }
        if !(0.0..1.0).contains(&self.corpus.dev_fraction) {
            return Err(PipelineError::Config("dev_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// The model-defining keys stored next to a checkpoint.
    pub fn sidecar(&self) -> String {
        const KEYS: [&str; 14] = [
            "alpha",
            "preemphasis_sign",
            "clip_seconds",
            "frame_ms",
            "hop_ms",
            "n_mels",
            "fmin",
            "fmax",
            "center",
            "deep_channels",
            "base_channels",
            "lambda",
            "scale_mode",
            "seed",
        ];
        let mut s = String::new();
        for (k, v) in self.pairs() {
            if KEYS.contains(&k) {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        s
    }

    /// Model config recorded in a sidecar, applied on top of the defaults.
    pub fn model_from_sidecar(text: &str, origin: &str) -> Result<ModelConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, origin)?;
        Ok(cfg.model)
    }
}

pub(crate) fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| PipelineError::Config(format!("{key} is required")))
}

pub(crate) fn require_file<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = require(value, key)?;
    if !p.is_file() {
        return Err(PipelineError::Config(format!("{key}: {} is not a file", p.display())));
    }
    Ok(p)
}

pub(crate) fn require_dir<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = require(value, key)?;
    if !p.is_dir() {
        return Err(PipelineError::Config(format!("{key}: {} is not a directory", p.display())));
    }
    Ok(p)
}

/// An output path must not be a directory and its nearest existing ancestor
/// must be one.
pub(crate) fn check_output(p: &Path, key: &str) -> Result<()> {
    if p.is_dir() {
        return Err(PipelineError::Config(format!("{key}: {} is a directory", p.display())));
    }
    let mut anc = p.parent();
    while let Some(a) = anc {
        if a.as_os_str().is_empty() || a.is_dir() {
            return Ok(());
        }
        if a.exists() {
            return Err(PipelineError::Config(format!(
                "{key}: {} is not a directory",
                a.display()
            )));
        }
        anc = a.parent();
    }
    Ok(())
}

pub(crate) fn check_output_dir(p: &Path, key: &str) -> Result<()> {
    if p.exists() && !p.is_dir() {
        return Err(PipelineError::Config(format!("{key}: {} is not a directory", p.display())));
    }
    check_output(&p.join("x"), key)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_sit_in_documented_ranges() {
        let c = RunConfig::default();
        assert_eq!(c.optimizer.lr, 1e-4);
        assert_eq!(c.optimizer.batch_size, 16);
        assert!((1e-4..=2e-2).contains(&c.optimizer.lr));
        assert!((16..=64).contains(&c.optimizer.batch_size));
        assert_eq!(c.optimizer.epochs, 30);
        assert_eq!(c.beta, 1.0);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("lr", "0.002").unwrap();
        c.set("scale_mode", "sqrt_d").unwrap();
        c.set("checkpoint", "/tmp/x.ck").unwrap();
        c.set("sweep_frame_ms", "20,32").unwrap();
        c.set("target_dev_eer", "0.05").unwrap();
        let back = RunConfig::load(None, []).and_then(|mut d| {
            d.apply_text(&c.to_text(), "mem")?;
            Ok(d)
        });
        assert_eq!(back.unwrap(), c);
        assert_eq!(CONFIG_KEYS.len(), c.pairs().len());
    }

    #[test]
    fn comments_and_flags_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# header\nlr = 0.001  # trailing\n\nbatch_size=32\n").unwrap();
        let c = RunConfig::load(Some(&path), [("lr", "0.01")]).unwrap();
        assert_eq!(c.optimizer.lr, 0.01);
        assert_eq!(c.optimizer.batch_size, 32);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = RunConfig::default();
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("lr", "fast").is_err());
        assert!(c.set("center", "maybe").is_err());
        let bad = |k: &str, v: &str| {
            let mut c = RunConfig::default();
            c.set(k, v).unwrap();
            c.validate().is_err()
        };
        assert!(bad("lr", "0.5"));
        assert!(bad("lr", "1e-6"));
        assert!(bad("batch_size", "0"));
        assert!(bad("beta", "0"));
        assert!(bad("frame_ms", "32.01"));
        assert!(RunConfig::default().apply_text("lr 0.1", "x").is_err());
    }

    #[test]
    fn sidecar_restores_model_config() {
        let mut c = RunConfig::default();
        c.set("frame_ms", "20").unwrap();
        c.set("hop_ms", "10").unwrap();
        c.set("lambda", "0.5").unwrap();
        c.set("seed", "9").unwrap();
        let m = RunConfig::model_from_sidecar(&c.sidecar(), "sidecar").unwrap();
        assert_eq!(m, c.model);
    }

    #[test]
    fn output_checks() {
        let dir = tempfile::tempdir().unwrap();
        assert!(check_output(dir.path(), "k").is_err());
        assert!(check_output(&dir.path().join("a/b/c.txt"), "k").is_ok());
        let f = dir.path().join("file");
        fs::write(&f, "").unwrap();
        assert!(check_output(&f.join("child"), "k").is_err());
        assert!(check_output_dir(&f, "k").is_err());
    }
}
