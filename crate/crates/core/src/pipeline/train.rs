use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{check_output, require_dir, require_file};
use super::{load_features, write_text, Adam, PipelineError, Result, RunConfig};
use crate::audio::{parse_protocol, Key, TrialRecord};
use crate::corpus::mix_seed;
use crate::metrics::compute_eer;
use crate::model::{Batch, Features, Network};
use crate::tensor::{load_checkpoint, save_checkpoint, BnMode, Tensor};

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Per-clip means over the epoch.
    pub l_att: f64,
    pub l_fin: f64,
    pub total: f64,
    pub dev_eer: f64,
}

pub const LOG_HEADER: &str = "epoch,l_att,l_fin,total,dev_eer";

impl EpochRecord {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.l_att, self.l_fin, self.total, self.dev_eer
        )
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let [e, a, l, t, d] = f[..] else { return None };
        Some(EpochRecord {
            epoch: e.parse().ok()?,
            l_att: a.parse().ok()?,
            l_fin: l.parse().ok()?,
            total: t.parse().ok()?,
            dev_eer: d.parse().ok()?,
        })
    }
}

/// Progress needed to continue a run where it stopped.
///
/// Shuffling is derived from `(seed, epoch)`, so the epoch counter is the
/// whole RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dev_eer: f64,
    pub best_checkpoint: Option<PathBuf>,
}

impl TrainState {
    fn new(seed: u64) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            seed,
            history: Vec::new(),
            best_epoch: None,
            best_dev_eer: f64::INFINITY,
            best_checkpoint: None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epoch={}", self.epoch);
        let _ = writeln!(s, "step={}", self.step);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "best_epoch={}", self.best_epoch.map_or("none".into(), |e| e.to_string()));
        let _ = writeln!(s, "best_dev_eer={}", self.best_dev_eer);
        let _ = writeln!(
            s,
            "best_checkpoint={}",
            self.best_checkpoint
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string())
        );
        for r in &self.history {
            let _ = writeln!(s, "history={}", r.csv());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |l: &str| PipelineError::Config(format!("train state: bad line {l:?}"));
        let mut st = TrainState::new(0);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            match k {
                "epoch" => st.epoch = v.parse().map_err(|_| bad(line))?,
                "step" => st.step = v.parse().map_err(|_| bad(line))?,
                "seed" => st.seed = v.parse().map_err(|_| bad(line))?,
                "best_epoch" => {
                    st.best_epoch = match v {
                        "none" => None,
                        _ => Some(v.parse().map_err(|_| bad(line))?),
                    }
                }
                "best_dev_eer" => st.best_dev_eer = v.parse().map_err(|_| bad(line))?,
                "best_checkpoint" => {
                    st.best_checkpoint = (v != "none").then(|| PathBuf::from(v))
                }
                "history" => st.history.push(EpochRecord::parse(v).ok_or_else(|| bad(line))?),
                _ => return Err(bad(line)),
            }
        }
        Ok(st)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dev_eer: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// The dev EER target was met before the epoch budget ran out.
    pub stopped_early: bool,
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Model settings written next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    with_suffix(checkpoint, ".cfg")
}

pub fn state_path(checkpoint: &Path) -> PathBuf {
    with_suffix(checkpoint, ".state")
}

/// Parameters and optimizer moments after the latest epoch.
pub fn last_path(checkpoint: &Path) -> PathBuf {
    with_suffix(checkpoint, ".last")
}

pub fn log_path(cfg: &RunConfig, checkpoint: &Path) -> PathBuf {
    cfg.paths
        .train_log
        .clone()
        .unwrap_or_else(|| with_suffix(checkpoint, ".log.csv"))
}

fn targets(records: &[TrialRecord]) -> Vec<f64> {
    records
        .iter()
        .map(|r| if r.key == Key::BonaFide { 1.0 } else { 0.0 })
        .collect()
}

/// Eval-mode dev EER, scoring chunks in parallel.
pub(crate) fn dev_eer(net: &Network, feats: &[Features], labels: &[f64], batch: usize) -> Result<f64> {
    let scores = score_parallel(net, feats, batch)?;
    let (mut bona, mut spoof) = (Vec::new(), Vec::new());
    for (s, &y) in scores.iter().zip(labels) {
        if y == 1.0 {
            bona.push(*s);
        } else {
            spoof.push(*s);
        }
    }
    Ok(compute_eer(&bona, &spoof)?.eer)
}

/// Eval-mode scores; clips are independent so chunking does not change them.
pub(crate) fn score_parallel(net: &Network, feats: &[Features], batch: usize) -> Result<Vec<f64>> {
    let parts: Vec<Result<Vec<f64>>> = feats
        .par_chunks(batch.max(1))
        .map(|c| Ok(net.score(c, c.len())?))
        .collect();
    let mut out = Vec::with_capacity(feats.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn save_last(path: &Path, net: &Network, opt: &Adam) -> Result<()> {
    let mut named: Vec<(String, Tensor)> = net.params().named_tensors();
    for (i, name) in net.params().names().iter().enumerate() {
        let shape = net.params().values()[i].shape().to_vec();
        named.push((format!("adam.m/{name}"), Tensor::new(&shape, opt.m[i].clone())?));
        named.push((format!("adam.v/{name}"), Tensor::new(&shape, opt.v[i].clone())?));
    }
    save_checkpoint(path, named.iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok(())
}

fn load_last(path: &Path, net: &mut Network, opt: &mut Adam) -> Result<()> {
    let all = load_checkpoint(path)?;
    let (adam, params): (Vec<_>, Vec<_>) = all.into_iter().partition(|(n, _)| n.starts_with("adam."));
    net.params_mut().load_named(&params)?;
    for (i, name) in net.params().names().to_vec().iter().enumerate() {
        for (prefix, dst) in [("adam.m/", &mut opt.m[i]), ("adam.v/", &mut opt.v[i])] {
            let key = format!("{prefix}{name}");
            let t = adam
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| PipelineError::Config(format!("{}: missing {key}", path.display())))?;
            if t.1.numel() != dst.len() {
                return Err(PipelineError::ShapeMismatch(format!("{key} in {}", path.display())));
            }
            dst.copy_from_slice(t.1.data());
        }
    }
    Ok(())
}

fn write_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut s = format!("{LOG_HEADER}\n");
    for r in history {
        s.push_str(&r.csv());
        s.push('\n');
    }
    write_text(path, &s)
}

/// Trains on `train_protocol`, selects the epoch with the lowest dev EER and
/// writes the checkpoint, its settings sidecar, the CSV log and the resume
/// state.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let p = &cfg.paths;
    let train_protocol = require_file(&p.train_protocol, "train_protocol")?;
    let dev_protocol = require_file(&p.dev_protocol, "dev_protocol")?;
    let audio_dir = require_dir(&p.audio_dir, "audio_dir")?;
    let checkpoint = super::config::require(&p.checkpoint, "checkpoint")?;
    check_output(checkpoint, "checkpoint")?;
    let log = log_path(cfg, checkpoint);
    check_output(&log, "train_log")?;
    if cfg.resume && !state_path(checkpoint).is_file() {
        return Err(PipelineError::Config(format!(
            "resume: {} not found",
            state_path(checkpoint).display()
        )));
    }

    let train_rec = parse_protocol(train_protocol)?;
    let dev_rec = parse_protocol(dev_protocol)?;
    let model_cfg = cfg.model.clone();
    let cache = p.feature_dir.as_deref();
    let train_x = load_features(&train_rec, audio_dir, cache, &model_cfg)?;
    let dev_x = load_features(&dev_rec, audio_dir, cache, &model_cfg)?;
    let (train_y, dev_y) = (targets(&train_rec), targets(&dev_rec));

    let o = &cfg.optimizer;
    let mut net = Network::new(model_cfg)?;
    let mut opt = Adam::new(o.lr, o.weight_decay, net.params().values());
    let mut state = TrainState::new(cfg.model.seed);
    if cfg.resume {
        let text = fs::read_to_string(state_path(checkpoint))
            .map_err(|e| PipelineError::io(&state_path(checkpoint), e))?;
        state = TrainState::parse(&text)?;
        if state.seed != cfg.model.seed {
            return Err(PipelineError::Config(format!(
                "resume: state was trained with seed {}, config has {}",
                state.seed, cfg.model.seed
            )));
        }
        load_last(&last_path(checkpoint), &mut net, &mut opt)?;
        opt.step = state.step;
    }
    write_text(&sidecar_path(checkpoint), &cfg.sidecar())?;

    let reached = |s: &TrainState| {
        o.target_dev_eer
            .is_some_and(|t| s.history.last().is_some_and(|r| r.dev_eer <= t))
    };
    let n = train_x.len();
    while state.epoch < o.epochs && !reached(&state) {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.model.seed, epoch as u64)));
        let (mut l_att, mut l_fin, mut total) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(o.batch_size) {
            let refs: Vec<&Features> = chunk.iter().map(|&i| &train_x[i]).collect();
            let y: Vec<f64> = chunk.iter().map(|&i| train_y[i]).collect();
            let g = net.gradients(&Batch::new(&refs)?, &y, BnMode::Train)?;
            if !g.loss.total.is_finite() || g.grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(PipelineError::NonFiniteLoss {
                    epoch,
                    batch: chunk.iter().map(|&i| train_rec[i].utt_id.clone()).collect(),
                });
            }
            opt.update(net.params_mut().values_mut(), &g.grads);
            net.params_mut().stats_mut().clone_from_slice(&g.stats);
            l_att += g.loss.l_att;
            l_fin += g.loss.l_fin;
            total += g.loss.total;
            state.step += 1;
        }
        let eer = dev_eer(&net, &dev_x, &dev_y, o.batch_size)?;
        let k = n.max(1) as f64;
        state.history.push(EpochRecord {
            epoch: epoch + 1,
            l_att: l_att / k,
            l_fin: l_fin / k,
            total: total / k,
            dev_eer: eer,
        });
        state.epoch += 1;
        if eer < state.best_dev_eer {
            state.best_dev_eer = eer;
            state.best_epoch = Some(epoch + 1);
            state.best_checkpoint = Some(checkpoint.to_path_buf());
            net.save(checkpoint)?;
        }
        write_log(&log, &state.history)?;
        save_last(&last_path(checkpoint), &net, &opt)?;
        write_text(&state_path(checkpoint), &state.to_text())?;
    }
    Ok(TrainOutcome {
        stopped_early: reached(&state) && state.epoch < o.epochs,
        history: state.history,
        best_epoch: state.best_epoch,
        best_dev_eer: state.best_dev_eer,
        checkpoint: checkpoint.to_path_buf(),
        log,
    })
}
