//! Mel-spectrogram and raw-frame front ends.
//!
//! Both paths share the same length normalisation and framing, so the time
//! axis always agrees: with centred framing and `N` samples there are
//! `1 + N / hop` frames.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::audio::{AudioClip, SAMPLE_RATE};

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("empty input signal")]
    EmptyInput,
    #[error("signal of {len} samples is shorter than one {frame_len}-sample frame")]
    SignalTooShort { len: usize, frame_len: usize },
    #[error("window length {0} is too small (need at least 2)")]
    WindowTooShort(usize),
    #[error("invalid framing: frame_len={frame_len}, hop={hop}")]
    InvalidFraming { frame_len: usize, hop: usize },
    #[error("invalid frequency bounds: fmin={fmin} Hz, fmax={fmax} Hz, nyquist={nyquist} Hz")]
    InvalidFrequencyBounds { fmin: f64, fmax: f64, nyquist: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("feature cache {path}: {reason}")]
    Cache { path: String, reason: String },
}

pub type Result<T, E = DspError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct DspConfig {
    pub alpha: f64,
    /// +1 gives `y(t) = s(t) + alpha*s(t-1)`, -1 the conventional high-pass form.
    pub preemphasis_sign: f64,
    pub clip_seconds: f64,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub center: bool,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            alpha: 0.97,
            preemphasis_sign: 1.0,
            clip_seconds: 2.0,
            frame_ms: 32.0,
            hop_ms: 16.0,
            n_mels: 128,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
            center: true,
        }
    }
}

fn ms_to_samples(ms: f64, what: &str) -> Result<usize> {
    let exact = ms * SAMPLE_RATE as f64 / 1000.0;
    let n = exact.round();
    if (exact - n).abs() > 1e-9 || n < 1.0 {
        return Err(DspError::InvalidConfig(format!(
            "{what} of {ms} ms is not a whole number of samples at 16 kHz"
        )));
    }
    Ok(n as usize)
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(DspError::InvalidConfig(format!(
                "alpha {} outside [0, 1)",
                self.alpha
            )));
        }
        if self.preemphasis_sign != 1.0 && self.preemphasis_sign != -1.0 {
            return Err(DspError::InvalidConfig(
                "preemphasis_sign must be +1 or -1".into(),
            ));
        }
        if !(self.clip_seconds > 0.0) {
            return Err(DspError::InvalidConfig("clip_seconds must be > 0".into()));
        }
        let frame = self.frame_len()?;
        let hop = self.hop_len()?;
        if hop > frame {
            return Err(DspError::InvalidFraming {
                frame_len: frame,
                hop,
            });
        }
        if frame < 2 {
            return Err(DspError::WindowTooShort(frame));
        }
        if self.n_mels == 0 {
            return Err(DspError::InvalidConfig("n_mels must be >= 1".into()));
        }
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(DspError::InvalidFrequencyBounds {
                fmin: self.fmin,
                fmax: self.fmax,
                nyquist,
            });
        }
        if !(self.log_floor > 0.0) {
            return Err(DspError::InvalidConfig("log_floor must be > 0".into()));
        }
        self.clip_samples()?;
        Ok(())
    }

    pub fn frame_len(&self) -> Result<usize> {
        ms_to_samples(self.frame_ms, "frame")
    }

    pub fn hop_len(&self) -> Result<usize> {
        ms_to_samples(self.hop_ms, "hop")
    }

    pub fn clip_samples(&self) -> Result<usize> {
        ms_to_samples(self.clip_seconds * 1000.0, "clip length")
    }

    /// Number of frames produced for a normalised clip.
    pub fn n_frames(&self) -> Result<usize> {
        frame_count(
            self.clip_samples()?,
            self.frame_len()?,
            self.hop_len()?,
            self.center,
        )
    }
}

/// First-order pre-emphasis, `y(t) = s(t) + sign*alpha*s(t-1)` with `s(-1) = 0`.
pub fn preemphasize(samples: &[f64], alpha: f64, sign: f64) -> Vec<f64> {
    let k = sign * alpha;
    let mut prev = 0.0;
    samples
        .iter()
        .map(|&s| {
            let y = s + k * prev;
            prev = s;
            y
        })
        .collect()
}

/// Truncates to `target` samples, or tiles the clip from its start until the
/// target length is reached.
pub fn normalize_length(samples: &[f64], target: usize) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(DspError::EmptyInput);
    }
    Ok(samples.iter().copied().cycle().take(target).collect())
}

/// Symmetric Hamming window.
pub fn hamming_window(len: usize) -> Result<Vec<f64>> {
    if len < 2 {
        return Err(DspError::WindowTooShort(len));
    }
    let denom = (len - 1) as f64;
    Ok((0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / denom).cos())
        .collect())
}

pub fn frame_count(n: usize, frame_len: usize, hop: usize, center: bool) -> Result<usize> {
    if hop == 0 || frame_len < hop {
        return Err(DspError::InvalidFraming { frame_len, hop });
    }
    if center {
        Ok(1 + n / hop)
    } else if n < frame_len {
        Err(DspError::SignalTooShort { len: n, frame_len })
    } else {
        Ok(1 + (n - frame_len) / hop)
    }
}

/// Index into `0..n` under reflection about the end samples (edge sample not
/// repeated), for any integer position.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Frames stored sample-major: `data[k * n_frames + t]` is sample `k` of frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub frame_len: usize,
    pub n_frames: usize,
    pub data: Vec<f64>,
    pub windowed: bool,
}

impl FrameMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.frame_len, self.n_frames)
    }

    pub fn get(&self, k: usize, t: usize) -> f64 {
        self.data[k * self.n_frames + t]
    }

    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.frame_len).map(|k| self.get(k, t)).collect()
    }
}

/// Splits a signal into overlapping frames.
///
/// With `center`, the signal is reflect-padded by `frame_len / 2` on the left
/// and `frame_len - frame_len / 2` on the right, so frame `t` is centred on
/// sample `t * hop`.
pub fn frame_signal(
    samples: &[f64],
    frame_len: usize,
    hop: usize,
    apply_window: bool,
    center: bool,
) -> Result<FrameMatrix> {
    if samples.is_empty() {
        return Err(DspError::EmptyInput);
    }
    let n_frames = frame_count(samples.len(), frame_len, hop, center)?;
    let offset = if center { (frame_len / 2) as isize } else { 0 };
    let window = if apply_window {
        Some(hamming_window(frame_len)?)
    } else {
        None
    };
    let n = samples.len();
    let mut data = vec![0.0; frame_len * n_frames];
    for t in 0..n_frames {
        let start = (t * hop) as isize - offset;
        for k in 0..frame_len {
            let mut v = samples[reflect_index(start + k as isize, n)];
            if let Some(w) = &window {
                v *= w[k];
            }
            data[k * n_frames + t] = v;
        }
    }
    Ok(FrameMatrix {
        frame_len,
        n_frames,
        data,
        windowed: apply_window,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the `n_mels` triangular filters, equally spaced
/// on the HTK mel scale.
pub fn mel_center_frequencies(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    mel_edge_frequencies(n_mels, fmin, fmax)[1..=n_mels].to_vec()
}

fn mel_edge_frequencies(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Row-major mel filter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.n_bins..(k + 1) * self.n_bins]
    }
}

/// Triangular HTK-mel filters over the one-sided spectrum of an `n_fft`-point
/// FFT. Each triangle's half-widths are floored at one FFT bin so that no
/// filter falls between bins and comes out empty.
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
        return Err(DspError::InvalidFrequencyBounds { fmin, fmax, nyquist });
    }
    if n_mels == 0 || n_fft < 2 {
        return Err(DspError::InvalidConfig(format!(
            "n_mels={n_mels}, n_fft={n_fft}"
        )));
    }
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let edges = mel_edge_frequencies(n_mels, fmin, fmax);
    let mut weights = vec![0.0; n_mels * n_bins];
    for k in 0..n_mels {
        let center = edges[k + 1];
        let left = (center - edges[k]).max(bin_hz);
        let right = (edges[k + 2] - center).max(bin_hz);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f <= center {
                1.0 - (center - f) / left
            } else {
                1.0 - (f - center) / right
            };
            weights[k * n_bins + b] = w.max(0.0);
        }
    }
    Ok(MelFilterbank {
        n_mels,
        n_bins,
        weights,
    })
}

/// One-sided power spectrum `|X_k|^2`, k = 0..=n/2, of each frame.
/// Output is bin-major: `out[b * n_frames + t]`.
pub fn power_spectrogram(frames: &FrameMatrix) -> Vec<f64> {
    let n = frames.frame_len;
    let n_bins = n / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut out = vec![0.0; n_bins * frames.n_frames];
    for t in 0..frames.n_frames {
        for (k, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(frames.get(k, t), 0.0);
        }
        fft.process(&mut buf);
        for b in 0..n_bins {
            out[b * frames.n_frames + t] = buf[b].norm_sqr();
        }
    }
    out
}

/// Log-mel feature matrix stored row-major `(n_mels, n_frames)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFeature {
    pub n_mels: usize,
    pub n_frames: usize,
    pub data: Vec<f64>,
}

impl MelFeature {
    pub fn shape(&self) -> (usize, usize) {
        (self.n_mels, self.n_frames)
    }

    pub fn get(&self, m: usize, t: usize) -> f64 {
        self.data[m * self.n_frames + t]
    }
}

/// Pre-emphasis, length normalisation, Hamming-windowed centred framing,
/// power spectrum, mel projection and `ln(max(x, floor))`.
///
/// The learnable normalisation that follows lives in the model.
pub fn mel_spectrogram(clip: &AudioClip, cfg: &DspConfig) -> Result<MelFeature> {
    cfg.validate()?;
    let emphasized = preemphasize(&clip.samples, cfg.alpha, cfg.preemphasis_sign);
    let signal = normalize_length(&emphasized, cfg.clip_samples()?)?;
    let frame_len = cfg.frame_len()?;
    let frames = frame_signal(&signal, frame_len, cfg.hop_len()?, true, cfg.center)?;
    let power = power_spectrogram(&frames);
    let fb = mel_filterbank(cfg.n_mels, frame_len, SAMPLE_RATE, cfg.fmin, cfg.fmax)?;
    let t_len = frames.n_frames;
    let mut data = vec![0.0; cfg.n_mels * t_len];
    for m in 0..cfg.n_mels {
        let row = fb.row(m);
        let out = &mut data[m * t_len..(m + 1) * t_len];
        for (b, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let p = &power[b * t_len..(b + 1) * t_len];
            for (o, &v) in out.iter_mut().zip(p) {
                *o += w * v;
            }
        }
        for o in out.iter_mut() {
            *o = o.max(cfg.log_floor).ln();
        }
    }
    Ok(MelFeature {
        n_mels: cfg.n_mels,
        n_frames: t_len,
        data,
    })
}

/// Unwindowed, un-emphasised frames of the length-normalised clip: the input
/// of the learned feature path.
pub fn raw_frames(clip: &AudioClip, cfg: &DspConfig) -> Result<FrameMatrix> {
    cfg.validate()?;
    let signal = normalize_length(&clip.samples, cfg.clip_samples()?)?;
    frame_signal(&signal, cfg.frame_len()?, cfg.hop_len()?, false, cfg.center)
}

/// Reads/writes the feature cache container: `u32 rows`, `u32 cols` (LE) then
/// row-major little-endian `f32`.
pub mod cache {
    use super::*;

    pub fn write(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
        let err = |reason: String| DspError::Cache {
            path: path.display().to_string(),
            reason,
        };
        if rows * cols != data.len() {
            return Err(err(format!("{rows}x{cols} header for {} values", data.len())));
        }
        let mut buf = Vec::with_capacity(8 + 4 * data.len());
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        for &v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| err(e.to_string()))?;
        f.write_all(&buf).map_err(|e| err(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
        let err = |reason: String| DspError::Cache {
            path: path.display().to_string(),
            reason,
        };
        let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
        if bytes.len() < 8 {
            return Err(err("truncated header".into()));
        }
        let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != rows * cols * 4 {
            return Err(err(format!(
                "payload of {} bytes does not match {rows}x{cols}",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((rows, cols, data))
    }
}
