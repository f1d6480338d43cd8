use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{check_output, check_output_dir, require, require_dir, require_file};
use super::train::{score_parallel, sidecar_path};
use super::{load_features, train, write_text, PipelineError, Result, RunConfig};
use crate::audio::{parse_protocol, read_scores, write_scores, Key, ScoreLine};
use crate::corpus::{build_corpus, Manifest};
use crate::metrics::{compute_eer, compute_min_tdcf, det_curve, Eer, MinTdcf, OperatingPoint};
use crate::model::{ModelConfig, Network};

/// Sidecar keys that change what a checkpoint computes.
const SHAPE_KEYS: [&str; 11] = [
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
];

fn check_sidecar(checkpoint: &Path, cfg: &RunConfig) -> Result<()> {
    let path = sidecar_path(checkpoint);
    let Ok(text) = fs::read_to_string(&path) else {
        return Ok(());
    };
    let stored = RunConfig::model_from_sidecar(&text, &path.display().to_string())?;
    let stored = RunConfig {
        model: stored,
        ..RunConfig::default()
    };
    let ours: HashMap<_, _> = cfg.pairs().into_iter().collect();
    let diffs: Vec<String> = stored
        .pairs()
        .into_iter()
        .filter(|(k, v)| SHAPE_KEYS.contains(k) && ours.get(k) != Some(v))
        .map(|(k, v)| format!("{k}: checkpoint {v}, config {}", ours[k]))
        .collect();
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::ShapeMismatch(diffs.join("; ")))
    }
}

fn load_network(cfg: &ModelConfig, checkpoint: &Path) -> Result<Network> {
    Network::load(cfg.clone(), checkpoint).map_err(|e| match e {
        crate::model::ModelError::Param(name, why) => {
            PipelineError::ShapeMismatch(format!("{name}: {why}"))
        }
        other => other.into(),
    })
}

/// Eval-mode scores for every trial of `protocol`, in protocol order,
/// written to `score_out`.
pub fn score(cfg: &RunConfig) -> Result<Vec<ScoreLine>> {
    cfg.validate()?;
    let p = &cfg.paths;
    let checkpoint = require_file(&p.checkpoint, "checkpoint")?;
    let protocol = require_file(&p.protocol, "protocol")?;
    let audio_dir = require_dir(&p.audio_dir, "audio_dir")?;
    let out = require(&p.score_out, "score_out")?;
    check_output(out, "score_out")?;
    check_sidecar(checkpoint, cfg)?;
    let net = load_network(&cfg.model, checkpoint)?;
    let records = parse_protocol(protocol)?;
    let feats = load_features(&records, audio_dir, p.feature_dir.as_deref(), &cfg.model)?;
    let scores = score_parallel(&net, &feats, cfg.optimizer.batch_size)?;
    let lines: Vec<ScoreLine> = records
        .iter()
        .zip(scores)
        .map(|(r, s)| ScoreLine::new(r.utt_id.clone(), s))
        .collect();
    super::ensure_parent(out)?;
    write_scores(&lines, out)?;
    Ok(lines)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub eer: Eer,
    pub min_tdcf: MinTdcf,
    pub beta: f64,
    pub n_bona_fide: usize,
    pub n_spoof: usize,
    /// Scored utterances absent from the protocol.
    pub extra_scores: Vec<String>,
    pub det: Vec<OperatingPoint>,
}

impl EvalReport {
    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "trials: {} bona fide, {} spoof", self.n_bona_fide, self.n_spoof);
        let _ = writeln!(
            s,
            "EER {:.2}% (threshold {:.6})",
            100.0 * self.eer.eer,
            self.eer.threshold
        );
        let _ = writeln!(
            s,
            "min t-DCF {:.4} (beta {}, threshold {:.6})",
            self.min_tdcf.value, self.beta, self.min_tdcf.threshold
        );
        s
    }

    pub fn csv(&self) -> String {
        format!(
            "eer,eer_threshold,min_tdcf,tdcf_threshold,beta,n_bona_fide,n_spoof\n{},{},{},{},{},{},{}\n",
            self.eer.eer,
            self.eer.threshold,
            self.min_tdcf.value,
            self.min_tdcf.threshold,
            self.beta,
            self.n_bona_fide,
            self.n_spoof
        )
    }

    pub fn det_csv(&self) -> String {
        let mut s = String::from("frr,far\n");
        for p in &self.det {
            let _ = writeln!(s, "{},{}", p.frr, p.far);
        }
        s
    }
}

/// EER and minimum detection cost of `scores` against `protocol`; also
/// writes the DET curve when `det_csv` is set.
pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let p = &cfg.paths;
    let scores_path = require_file(&p.scores, "scores")?;
    let protocol = require_file(&p.protocol, "protocol")?;
    if let Some(d) = &p.det_csv {
        check_output(d, "det_csv")?;
    }
    let records = parse_protocol(protocol)?;
    let scores = read_scores(scores_path)?;
    let by_utt: HashMap<&str, f64> = scores.iter().map(|s| (s.utt_id.as_str(), s.score)).collect();
    let (mut bona, mut spoof) = (Vec::new(), Vec::new());
    for r in &records {
        let s = *by_utt
            .get(r.utt_id.as_str())
            .ok_or_else(|| PipelineError::MissingScore(r.utt_id.clone()))?;
        match r.key {
            Key::BonaFide => bona.push(s),
            Key::Spoof => spoof.push(s),
        }
    }
    let in_protocol: std::collections::HashSet<&str> =
        records.iter().map(|r| r.utt_id.as_str()).collect();
    let extra_scores = scores
        .iter()
        .filter(|s| !in_protocol.contains(s.utt_id.as_str()))
        .map(|s| s.utt_id.clone())
        .collect();
    let report = EvalReport {
        eer: compute_eer(&bona, &spoof)?,
        min_tdcf: compute_min_tdcf(&bona, &spoof, cfg.beta)?,
        beta: cfg.beta,
        n_bona_fide: bona.len(),
        n_spoof: spoof.len(),
        extra_scores,
        det: det_curve(&bona, &spoof)?,
    };
    if let Some(d) = &p.det_csv {
        write_text(d, &report.det_csv())?;
    }
    Ok(report)
}

/// Synthesises a labelled corpus under `out_dir`.
pub fn simulate(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    let out = require(&cfg.paths.out_dir, "out_dir")?;
    check_output_dir(out, "out_dir")?;
    let mut spec = cfg.corpus.clone();
    spec.duration_s = cfg.model.dsp.clip_seconds;
    Ok(build_corpus(&spec, out)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_frames: usize,
    pub best_dev_eer: f64,
}

pub const SWEEP_HEADER: &str = "frame_ms,hop_ms,n_frames,dev_eer";

/// Retrains once per frame length (hop = half a frame) with the shared
/// seed and writes `frame_ms,hop_ms,n_frames,dev_eer` rows.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if cfg.sweep_frame_ms.is_empty() {
        return Err(PipelineError::Config("sweep_frame_ms is empty".into()));
    }
    let out = require(&cfg.paths.out_dir, "out_dir")?;
    check_output_dir(out, "out_dir")?;
    let csv_path = cfg
        .paths
        .sweep_out
        .clone()
        .unwrap_or_else(|| out.join("sweep.csv"));
    check_output(&csv_path, "sweep_out")?;
    // Every setting is checked before the first run starts.
    let runs: Vec<(f64, RunConfig)> = cfg
        .sweep_frame_ms
        .iter()
        .map(|&f| {
            let mut c = cfg.clone();
            c.model.dsp.frame_ms = f;
            c.model.dsp.hop_ms = f / 2.0;
            c.validate()?;
            let dir = sweep_dir(out, f);
            c.paths.checkpoint = Some(dir.join("model.ck"));
            c.paths.train_log = Some(dir.join("train_log.csv"));
            c.paths.feature_dir = cfg.paths.feature_dir.as_deref().map(|d| sweep_dir(d, f));
            c.resume = false;
            Ok((f, c))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (f, c) in runs {
        let outcome = train(&c)?;
        rows.push(SweepRow {
            frame_ms: f,
            hop_ms: f / 2.0,
            n_frames: c.model.n_frames()?,
            best_dev_eer: outcome.best_dev_eer,
        });
    }
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        let _ = writeln!(s, "{},{},{},{}", r.frame_ms, r.hop_ms, r.n_frames, r.best_dev_eer);
    }
    write_text(&csv_path, &s)?;
    Ok(rows)
}

/// Output directory of one sweep setting.
pub fn sweep_dir(out_dir: &Path, frame_ms: f64) -> PathBuf {
    out_dir.join(format!("frame_{frame_ms}ms"))
}
