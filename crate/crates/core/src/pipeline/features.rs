use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::{PipelineError, Result};
use crate::audio::{find_audio, load_trial, TrialRecord};
use crate::dsp::{cache, mel_spectrogram, raw_frames, DspConfig, FrameMatrix, MelFeature};
use crate::model::{Features, ModelConfig};

const INDEX: &str = "index.txt";

/// Cache file of one view of one utterance.
pub fn cache_path(dir: &Path, utt_id: &str, view: &str) -> PathBuf {
    dir.join(format!("{utt_id}.{view}.bin"))
}

/// Digest of the audio bytes and every setting that shapes the features.
fn content_hash(audio: &Path, dsp: &DspConfig) -> Result<String> {
    let bytes = fs::read(audio).map_err(|e| PipelineError::io(audio, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    h.update(format!("{dsp:?}").as_bytes());
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn read_index(dir: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(dir.join(INDEX))
        .unwrap_or_default()
        .lines()
        .filter_map(|l| {
            let (u, h) = l.split_once(' ')?;
            Some((u.to_string(), h.to_string()))
        })
        .collect()
}

fn write_index(dir: &Path, index: &BTreeMap<String, String>) -> Result<()> {
    let text: String = index.iter().map(|(u, h)| format!("{u} {h}\n")).collect();
    let path = dir.join(INDEX);
    fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))
}

/// Outcome of a featurize run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeaturizeReport {
    pub computed: Vec<String>,
    pub skipped: Vec<String>,
    /// `(utt_id, reason)` for every clip that could not be processed.
    pub failed: Vec<(String, String)>,
}

impl FeaturizeReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "featurize: {} computed, {} up to date, {} failed\n",
            self.computed.len(),
            self.skipped.len(),
            self.failed.len()
        );
        for (u, why) in &self.failed {
            s.push_str(&format!("  FAILED {u}: {why}\n"));
        }
        s
    }
}

enum Outcome {
    Computed(String),
    Skipped,
}

fn featurize_one(
    record: &TrialRecord,
    audio_dir: &Path,
    out: &Path,
    dsp: &DspConfig,
    known: Option<&String>,
) -> Result<Outcome> {
    let audio = find_audio(audio_dir, &record.utt_id)
        .ok_or_else(|| PipelineError::MissingAudio(record.utt_id.clone()))?;
    let hash = content_hash(&audio, dsp)?;
    let mel_path = cache_path(out, &record.utt_id, "mel");
    let raw_path = cache_path(out, &record.utt_id, "raw");
    if known == Some(&hash) && mel_path.is_file() && raw_path.is_file() {
        return Ok(Outcome::Skipped);
    }
    let clip = load_trial(audio_dir, record)?;
    let mel = mel_spectrogram(&clip, dsp)?;
    let raw = raw_frames(&clip, dsp)?;
    cache::write(&mel_path, mel.n_mels, mel.n_frames, &mel.data)?;
    cache::write(&raw_path, raw.frame_len, raw.n_frames, &raw.data)?;
    Ok(Outcome::Computed(hash))
}

/// Writes `<utt>.mel.bin` and `<utt>.raw.bin` for every trial, skipping
/// clips whose audio and settings are unchanged since the last run.
///
/// Per-clip failures are collected, not fatal.
pub fn featurize(
    records: &[TrialRecord],
    audio_dir: &Path,
    out: &Path,
    dsp: &DspConfig,
) -> Result<FeaturizeReport> {
    dsp.validate()?;
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    let mut index = read_index(out);
    let results: Vec<(String, Result<Outcome>)> = records
        .par_iter()
        .map(|r| {
            let res = featurize_one(r, audio_dir, out, dsp, index.get(&r.utt_id));
            (r.utt_id.clone(), res)
        })
        .collect();
    let mut report = FeaturizeReport::default();
    for (utt, res) in results {
        match res {
            Ok(Outcome::Computed(hash)) => {
                index.insert(utt.clone(), hash);
                report.computed.push(utt);
            }
            Ok(Outcome::Skipped) => report.skipped.push(utt),
            Err(e) => {
                index.remove(&utt);
                report.failed.push((utt, e.to_string()));
            }
        }
    }
    write_index(out, &index)?;
    Ok(report)
}

fn read_cached(dir: &Path, utt_id: &str, cfg: &ModelConfig) -> Result<Features> {
    let (l, t) = (cfg.dsp.frame_len()?, cfg.n_frames()?);
    let (rows, cols, raw) = cache::read(&cache_path(dir, utt_id, "raw"))?;
    let (m_rows, m_cols, mel) = cache::read(&cache_path(dir, utt_id, "mel"))?;
    if (rows, cols, m_rows, m_cols) != (l, t, cfg.dsp.n_mels, t) {
        return Err(PipelineError::ShapeMismatch(format!(
            "cache for {utt_id} is raw {rows}x{cols} / mel {m_rows}x{m_cols}, config wants \
             {l}x{t} / {}x{t}",
            cfg.dsp.n_mels
        )));
    }
    let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect();
    Ok(Features::from_parts(
        FrameMatrix {
            frame_len: rows,
            n_frames: cols,
            data: widen(raw),
            windowed: false,
        },
        MelFeature {
            n_mels: m_rows,
            n_frames: m_cols,
            data: widen(mel),
        },
    )?)
}

/// Features for every trial, in order.
///
/// With a cache directory the clips are featurized first (reusing up-to-date
/// files) and read back; otherwise they are computed in memory. Fails on the
/// first clip that cannot be loaded.
pub fn load_features(
    records: &[TrialRecord],
    audio_dir: &Path,
    cache_dir: Option<&Path>,
    cfg: &ModelConfig,
) -> Result<Vec<Features>> {
    match cache_dir {
        Some(dir) => {
            let report = featurize(records, audio_dir, dir, &cfg.dsp)?;
            if let Some((utt, why)) = report.failed.first() {
                return Err(PipelineError::Item(format!("{utt}: {why}")));
            }
            records
                .par_iter()
                .map(|r| read_cached(dir, &r.utt_id, cfg))
                .collect()
        }
        None => records
            .par_iter()
            .map(|r| Ok(Features::from_clip(&load_trial(audio_dir, r)?, cfg)?))
            .collect(),
    }
}
