//! Synthetic labelled corpora: bona fide clips through a room and a
//! microphone, replayed clips through a second loudspeaker/room/microphone
//! chain, and a vocoder-like "DF surrogate" spoof class.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::audio::{write_protocol, write_wav, AudioClip, AudioError, Key, Label, TrialRecord};

const FS: f64 = crate::audio::SAMPLE_RATE as f64;

/// Peak level every synthesised clip is normalised to.
pub const PEAK: f64 = 0.9;
/// Longest impulse response, in taps.
pub const MAX_IR_TAPS: usize = 4096;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid corpus request: {0}")]
    Invalid(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// SplitMix64 finaliser; derives independent child seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IrKind {
    Room,
    Microphone,
    Speaker,
}

impl IrKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IrKind::Room => "room",
            IrKind::Microphone => "microphone",
            IrKind::Speaker => "speaker",
        }
    }
}

/// Unit-norm FIR response.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    pub kind: IrKind,
    pub taps: Vec<f64>,
    /// `key=value` design parameters, for manifests.
    pub params: Vec<(String, String)>,
}

impl ImpulseResponse {
    /// The identity response.
    pub fn delta(kind: IrKind) -> Self {
        ImpulseResponse {
            kind,
            taps: vec![1.0],
            params: vec![("design".into(), "delta".into())],
        }
    }

    fn normalized(kind: IrKind, mut taps: Vec<f64>, params: Vec<(String, String)>) -> Self {
        let norm = taps.iter().map(|v| v * v).sum::<f64>().sqrt();
        taps.iter_mut().for_each(|v| *v /= norm);
        ImpulseResponse { kind, taps, params }
    }

    pub fn describe(&self) -> String {
        let mut s = format!("{} taps={}", self.kind.as_str(), self.taps.len());
        for (k, v) in &self.params {
            s.push_str(&format!(" {k}={v}"));
        }
        s
    }
}

fn blackman(n: usize, len: usize) -> f64 {
    let x = 2.0 * PI * n as f64 / (len - 1) as f64;
    0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos()
}

fn sinc_lowpass(n: isize, cutoff_hz: f64) -> f64 {
    let wc = 2.0 * cutoff_hz / FS;
    if n == 0 {
        wc
    } else {
        (PI * wc * n as f64).sin() / (PI * n as f64)
    }
}

/// Loudspeaker response: windowed-sinc band-pass from 100 Hz to `cutoff_hz`.
pub fn speaker_ir(cutoff_hz: f64) -> ImpulseResponse {
    let len = 1023;
    let mid = (len / 2) as isize;
    let taps = (0..len)
        .map(|i| {
            let n = i as isize - mid;
            (sinc_lowpass(n, cutoff_hz) - sinc_lowpass(n, 100.0)) * blackman(i, len)
        })
        .collect();
    ImpulseResponse::normalized(
        IrKind::Speaker,
        taps,
        vec![
            ("low_hz".into(), "100".into()),
            ("cutoff_hz".into(), format!("{cutoff_hz:.1}")),
        ],
    )
}

/// A random response of `kind`, a pure function of `seed`.
///
/// Room: direct path plus an exponentially decaying noise tail with T60 in
/// [50, 400] ms. Microphone: a delta plus a short smoothing kernel
/// (at most 64 taps). Speaker: [`speaker_ir`] with cutoff in [3.5, 7] kHz.
pub fn random_ir(kind: IrKind, seed: u64) -> ImpulseResponse {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, kind as u64));
    match kind {
        IrKind::Room => {
            let t60 = rng.random_range(0.05..0.4);
            let len = ((t60 * FS).ceil() as usize).min(MAX_IR_TAPS);
            let direct_gain: f64 = rng.random_range(1.0..4.0);
            let taps = (0..len)
                .map(|n| {
                    let decay = (-6.9078 * n as f64 / (t60 * FS)).exp();
                    let noise: f64 = rng.sample(StandardNormal);
                    if n == 0 {
                        direct_gain
                    } else {
                        0.1 * decay * noise
                    }
                })
                .collect();
            ImpulseResponse::normalized(
                kind,
                taps,
                vec![
                    ("t60_ms".into(), format!("{:.1}", t60 * 1000.0)),
                    ("direct_gain".into(), format!("{direct_gain:.3}")),
                ],
            )
        }
        IrKind::Microphone => {
            let len = rng.random_range(8..=64usize);
            let amount = rng.random_range(0.2..1.0);
            let hann: Vec<f64> = (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * (n as f64 + 1.0) / (len as f64 + 1.0)).cos())
                .collect();
            let sum: f64 = hann.iter().sum();
            let taps = hann
                .iter()
                .enumerate()
                .map(|(n, w)| amount * w / sum + if n == 0 { 1.0 } else { 0.0 })
                .collect();
            ImpulseResponse::normalized(
                kind,
                taps,
                vec![
                    ("smooth_len".into(), len.to_string()),
                    ("smooth_amount".into(), format!("{amount:.3}")),
                ],
            )
        }
        IrKind::Speaker => speaker_ir(rng.random_range(3500.0..7000.0)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceKind {
    Tone,
    Chirp,
    NoiseBurst,
    FormantLike,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Tone => "tone",
            SourceKind::Chirp => "chirp",
            SourceKind::NoiseBurst => "noise-burst",
            SourceKind::FormantLike => "formant-like",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            SourceKind::Tone,
            SourceKind::Chirp,
            SourceKind::NoiseBurst,
            SourceKind::FormantLike,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stand-in for a human utterance; peak magnitude is at most 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSignal {
    pub samples: Vec<f64>,
    pub descriptor: String,
}

fn peak(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn scale_to_peak(x: &mut [f64], target: f64) {
    let p = peak(x);
    if p > 0.0 {
        let g = target / p;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

pub fn synth_source(kind: SourceKind, duration_s: f64, seed: u64) -> Result<SourceSignal> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(CorpusError::Invalid(format!("duration {duration_s} s")));
    }
    let n = (duration_s * FS).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 100 + kind as u64));
    let t = |i: usize| i as f64 / FS;
    let (mut samples, descriptor): (Vec<f64>, String) = match kind {
        SourceKind::Tone => {
            let f0 = rng.random_range(100.0..4000.0);
            (
                (0..n).map(|i| 0.8 * (2.0 * PI * f0 * t(i)).sin()).collect(),
                format!("tone f0={f0:.2}"),
            )
        }
        SourceKind::Chirp => {
            let f0 = rng.random_range(100.0..500.0);
            let f1 = rng.random_range(2000.0..7000.0);
            let rate = (f1 - f0) / duration_s;
            (
                (0..n)
                    .map(|i| 0.8 * (2.0 * PI * (f0 * t(i) + 0.5 * rate * t(i) * t(i))).sin())
                    .collect(),
                format!("chirp f0={f0:.1} f1={f1:.1}"),
            )
        }
        SourceKind::NoiseBurst => {
            let mut out = vec![0.0; n];
            let mut i = 0;
            let mut bursts = 0;
            while i < n {
                let on = (rng.random_range(0.05..0.3) * FS) as usize;
                let off = (rng.random_range(0.02..0.15) * FS) as usize;
                let end = (i + on).min(n);
                for (k, v) in out[i..end].iter_mut().enumerate() {
                    // Short raised-cosine ramps avoid clicks.
                    let ramp = ((k.min(end - i - 1 - k) as f64) / 80.0).min(1.0);
                    let s: f64 = rng.sample(StandardNormal);
                    *v = 0.25 * ramp * s;
                }
                bursts += 1;
                i = end + off;
            }
            (out, format!("noise-burst bursts={bursts}"))
        }
        SourceKind::FormantLike => {
            let f0 = rng.random_range(90.0..250.0);
            let drift = rng.random_range(0.02..0.1);
            let drift_hz = rng.random_range(0.5..3.0);
            let formants = [
                rng.random_range(300.0..900.0),
                rng.random_range(900.0..2500.0),
                rng.random_range(2500.0..3500.0),
            ];
            let gains = [1.0, rng.random_range(0.3..0.7), rng.random_range(0.1..0.4)];
            let breath = rng.random_range(0.01..0.04);
            let mut phase = [0.0f64; 3];
            let mut pitch_phase = 0.0f64;
            let out = (0..n)
                .map(|i| {
                    let bend = 1.0 + drift * (2.0 * PI * drift_hz * t(i)).sin();
                    pitch_phase += 2.0 * PI * f0 * bend / FS;
                    // Glottal-rate envelope.
                    let env = 0.5 * (1.0 + pitch_phase.cos());
                    let mut v = 0.0;
                    for k in 0..3 {
                        phase[k] += 2.0 * PI * formants[k] * bend / FS;
                        v += gains[k] * env * phase[k].sin();
                    }
                    let noise: f64 = rng.sample(StandardNormal);
                    v + breath * noise
                })
                .collect();
            (
                out,
                format!(
                    "formant-like f0={f0:.1} formants={:.0}/{:.0}/{:.0}",
                    formants[0], formants[1], formants[2]
                ),
            )
        }
    };
    if peak(&samples) > 1.0 {
        scale_to_peak(&mut samples, 1.0);
    }
    Ok(SourceSignal {
        samples,
        descriptor,
    })
}

/// Full linear convolution, direct form.
pub fn convolve_full(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let mut y = vec![0.0; x.len() + h.len() - 1];
    for (k, &hk) in h.iter().enumerate() {
        for (yi, &xi) in y[k..k + x.len()].iter_mut().zip(x) {
            *yi += hk * xi;
        }
    }
    y
}

/// Convolution keeping only the first `x.len()` outputs.
pub fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut y = vec![0.0; n];
    for (k, &hk) in h.iter().enumerate().take(n) {
        for (yi, &xi) in y[k..].iter_mut().zip(x) {
            *yi += hk * xi;
        }
    }
    y
}

fn cascade(
    utt_id: &str,
    src: &SourceSignal,
    stages: &[&ImpulseResponse],
    label: Label,
) -> Result<AudioClip> {
    let mut x = src.samples.clone();
    for ir in stages {
        x = convolve_truncated(&x, &ir.taps);
    }
    scale_to_peak(&mut x, PEAK);
    Ok(AudioClip::new(utt_id, x, label)?)
}

/// `source * room * microphone`, truncated to the source length.
pub fn synth_genuine(
    utt_id: &str,
    src: &SourceSignal,
    env: &ImpulseResponse,
    mic: &ImpulseResponse,
) -> Result<AudioClip> {
    cascade(utt_id, src, &[env, mic], Label::BonaFide)
}

/// Impulse responses of a replay attack, in signal order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayChain {
    /// Room of the original recording; absent by default.
    pub record_env: Option<ImpulseResponse>,
    pub mic: ImpulseResponse,
    pub speaker: ImpulseResponse,
    pub env: ImpulseResponse,
    pub mic2: ImpulseResponse,
}

impl ReplayChain {
    pub fn identity() -> Self {
        ReplayChain {
            record_env: None,
            mic: ImpulseResponse::delta(IrKind::Microphone),
            speaker: ImpulseResponse::delta(IrKind::Speaker),
            env: ImpulseResponse::delta(IrKind::Room),
            mic2: ImpulseResponse::delta(IrKind::Microphone),
        }
    }

    fn stages(&self) -> Vec<&ImpulseResponse> {
        let mut v = Vec::with_capacity(5);
        if let Some(e) = &self.record_env {
            v.push(e);
        }
        v.extend([&self.mic, &self.speaker, &self.env, &self.mic2]);
        v
    }
}

/// `source [* room] * mic * loudspeaker * room' * mic'`, truncated to the
/// source length.
pub fn synth_replay(utt_id: &str, src: &SourceSignal, chain: &ReplayChain) -> Result<AudioClip> {
    cascade(utt_id, src, &chain.stages(), Label::Spoof)
}

pub const DF_FFT: usize = 512;
pub const DF_HOP: usize = 256;
pub const DF_SMOOTH_BINS: usize = 5;

fn sqrt_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).sqrt())
        .collect()
}

/// Magnitude spectra (`n_fft/2 + 1` bins) of the `sqrt-Hann` frames used by
/// the surrogate.
pub fn stft_magnitudes(x: &[f64]) -> Vec<Vec<f64>> {
    let win = sqrt_hann(DF_FFT);
    let fft = FftPlanner::new().plan_fft_forward(DF_FFT);
    let mut out = Vec::new();
    let mut start = 0;
    while start + DF_FFT <= x.len() {
        let mut buf: Vec<Complex<f64>> = x[start..start + DF_FFT]
            .iter()
            .zip(&win)
            .map(|(s, w)| Complex::new(s * w, 0.0))
            .collect();
        fft.process(&mut buf);
        out.push(buf[..=DF_FFT / 2].iter().map(|c| c.norm()).collect());
        start += DF_HOP;
    }
    out
}

/// Vocoder-like resynthesis: per-frame magnitude smoothed over
/// [`DF_SMOOTH_BINS`] bins, phase replaced by seeded random phase, then
/// weighted overlap-add. Output has the input length.
pub fn synth_df_surrogate(utt_id: &str, src: &SourceSignal, seed: u64) -> Result<AudioClip> {
    let n = src.samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xDF));
    let win = sqrt_hann(DF_FFT);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(DF_FFT);
    let inv = planner.plan_fft_inverse(DF_FFT);
    let half = DF_FFT / 2;
    // Pad so every sample is covered by two frames.
    let padded: Vec<f64> = std::iter::repeat_n(0.0, half)
        .chain(src.samples.iter().copied())
        .chain(std::iter::repeat_n(0.0, DF_FFT))
        .collect();
    let mut acc = vec![0.0; padded.len()];
    let mut start = 0;
    while start + DF_FFT <= padded.len() {
        let mut buf: Vec<Complex<f64>> = padded[start..start + DF_FFT]
            .iter()
            .zip(&win)
            .map(|(s, w)| Complex::new(s * w, 0.0))
            .collect();
        fwd.process(&mut buf);
        let mag: Vec<f64> = buf[..=half].iter().map(|c| c.norm()).collect();
        let r = DF_SMOOTH_BINS / 2;
        for k in 0..=half {
            let lo = k.saturating_sub(r);
            let hi = (k + r).min(half);
            let smooth = mag[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            let phase = if k == 0 || k == half {
                0.0
            } else {
                rng.random_range(-PI..PI)
            };
            buf[k] = Complex::from_polar(smooth, phase);
            if k > 0 && k < half {
                buf[DF_FFT - k] = buf[k].conj();
            }
        }
        inv.process(&mut buf);
        for (i, (c, w)) in buf.iter().zip(&win).enumerate() {
            acc[start + i] += c.re / DF_FFT as f64 * w;
        }
        start += DF_HOP;
    }
    let mut out = acc[half..half + n].to_vec();
    scale_to_peak(&mut out, PEAK);
    Ok(AudioClip::new(utt_id, out, Label::Spoof)?)
}

/// Clip counts and knobs of a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub bona_fide: usize,
    pub replay: usize,
    pub df_surrogate: usize,
    pub seed: u64,
    pub duration_s: f64,
    /// Fraction of each class held out for the dev protocol.
    pub dev_fraction: f64,
    /// Put a room response in front of the replay recording microphone.
    pub record_env: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            bona_fide: 200,
            replay: 200,
            df_surrogate: 0,
            seed: 1234,
            duration_s: 2.0,
            dev_fraction: 0.2,
            record_env: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipClass {
    Genuine,
    Replay,
    DfSurrogate,
}

impl ClipClass {
    pub fn system_id(self) -> &'static str {
        match self {
            ClipClass::Genuine => "genuine",
            ClipClass::Replay => "replay",
            ClipClass::DfSurrogate => "df-surrogate",
        }
    }

    fn tag(self) -> &'static str {
        match self {
            ClipClass::Genuine => "B",
            ClipClass::Replay => "R",
            ClipClass::DfSurrogate => "D",
        }
    }

    pub fn key(self) -> Key {
        match self {
            ClipClass::Genuine => Key::BonaFide,
            _ => Key::Spoof,
        }
    }
}

/// Everything needed to regenerate one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecipe {
    pub utt_id: String,
    pub class: ClipClass,
    pub seed: u64,
    pub source: SourceKind,
    pub dev: bool,
}

/// Sources used in corpora; pure tones are excluded as too easy to overfit.
const CORPUS_SOURCES: [SourceKind; 3] = [
    SourceKind::FormantLike,
    SourceKind::Chirp,
    SourceKind::NoiseBurst,
];

impl ClipRecipe {
    fn irs(&self, record_env: bool) -> Vec<ImpulseResponse> {
        let s = |i: u64| mix_seed(self.seed, i);
        match self.class {
            ClipClass::Genuine => vec![
                random_ir(IrKind::Room, s(1)),
                random_ir(IrKind::Microphone, s(2)),
            ],
            ClipClass::Replay => {
                let mut v = Vec::new();
                if record_env {
                    v.push(random_ir(IrKind::Room, s(1)));
                }
                v.extend([
                    random_ir(IrKind::Microphone, s(2)),
                    random_ir(IrKind::Speaker, s(3)),
                    random_ir(IrKind::Room, s(4)),
                    random_ir(IrKind::Microphone, s(5)),
                ]);
                v
            }
            ClipClass::DfSurrogate => Vec::new(),
        }
    }

    /// Synthesises the clip and returns it with its manifest lines.
    pub fn render(&self, duration_s: f64, record_env: bool) -> Result<(AudioClip, Vec<String>)> {
        let src = synth_source(self.source, duration_s, mix_seed(self.seed, 0))?;
        let irs = self.irs(record_env);
        let clip = match self.class {
            ClipClass::Genuine => synth_genuine(&self.utt_id, &src, &irs[0], &irs[1])?,
            ClipClass::Replay => {
                let mut it = irs.iter().cloned();
                let record_env = if record_env { it.next() } else { None };
                let chain = ReplayChain {
                    record_env,
                    mic: it.next().expect("chain"),
                    speaker: it.next().expect("chain"),
                    env: it.next().expect("chain"),
                    mic2: it.next().expect("chain"),
                };
                synth_replay(&self.utt_id, &src, &chain)?
            }
            ClipClass::DfSurrogate => synth_df_surrogate(&self.utt_id, &src, self.seed)?,
        };
        let mut lines = vec![
            format!("utt_id={}", self.utt_id),
            format!("class={}", self.class.system_id()),
            format!("key={}", self.class.key().as_str()),
            format!("partition={}", if self.dev { "dev" } else { "train" }),
            format!("seed={}", self.seed),
            format!("source={}", src.descriptor),
        ];
        for (i, ir) in irs.iter().enumerate() {
            lines.push(format!("ir{i}={}", ir.describe()));
        }
        if self.class == ClipClass::DfSurrogate {
            lines.push("note=surrogate for generated speech, not a real TTS/VC system".into());
        }
        Ok((clip, lines))
    }
}

/// Deterministic clip list for `spec`; the last `dev_fraction` of each
/// class goes to dev.
pub fn plan_corpus(spec: &CorpusSpec) -> Result<Vec<ClipRecipe>> {
    if !(0.0..1.0).contains(&spec.dev_fraction) {
        return Err(CorpusError::Invalid(format!(
            "dev_fraction {} must be in [0, 1)",
            spec.dev_fraction
        )));
    }
    if !(spec.duration_s > 0.0) {
        return Err(CorpusError::Invalid(format!("duration {} s", spec.duration_s)));
    }
    let mut out = Vec::new();
    for (class, count) in [
        (ClipClass::Genuine, spec.bona_fide),
        (ClipClass::Replay, spec.replay),
        (ClipClass::DfSurrogate, spec.df_surrogate),
    ] {
        let n_dev = (count as f64 * spec.dev_fraction).round() as usize;
        for i in 0..count {
            let seed = mix_seed(mix_seed(spec.seed, class as u64 + 1), i as u64);
            out.push(ClipRecipe {
                utt_id: format!("SIM_{}_{:05}", class.tag(), i),
                class,
                seed,
                source: CORPUS_SOURCES[i % CORPUS_SOURCES.len()],
                dev: i >= count - n_dev,
            });
        }
    }
    Ok(out)
}

/// What [`build_corpus`] wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub audio_dir: PathBuf,
    pub protocol: PathBuf,
    pub train_protocol: PathBuf,
    pub dev_protocol: PathBuf,
    pub manifest: PathBuf,
    pub records: Vec<TrialRecord>,
    /// One `key=value` line group per clip.
    pub entries: Vec<Vec<String>>,
}

/// Writes `wav/<utt>.wav`, `protocol.txt` (all clips), `protocol_train.txt`,
/// `protocol_dev.txt` and `manifest.txt` under `out_dir`.
pub fn build_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Manifest> {
    let recipes = plan_corpus(spec)?;
    let audio_dir = out_dir.join("wav");
    fs::create_dir_all(&audio_dir).map_err(io_err(&audio_dir))?;
    let rendered: Vec<Result<(ClipRecipe, Vec<String>)>> = recipes
        .par_iter()
        .map(|r| {
            let (clip, lines) = r.render(spec.duration_s, spec.record_env)?;
            write_wav(audio_dir.join(format!("{}.wav", r.utt_id)), &clip)?;
            Ok((r.clone(), lines))
        })
        .collect();
    let mut records = Vec::with_capacity(recipes.len());
    let mut entries = Vec::with_capacity(recipes.len());
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for item in rendered {
        let (r, lines) = item?;
        let rec = TrialRecord::new("SIM", &r.utt_id, r.class.system_id(), r.class.key());
        if r.dev {
            dev.push(rec.clone());
        } else {
            train.push(rec.clone());
        }
        records.push(rec);
        entries.push(lines);
    }
    let m = Manifest {
        protocol: out_dir.join("protocol.txt"),
        train_protocol: out_dir.join("protocol_train.txt"),
        dev_protocol: out_dir.join("protocol_dev.txt"),
        manifest: out_dir.join("manifest.txt"),
        audio_dir,
        records,
        entries,
    };
    write_protocol(&m.protocol, &m.records)?;
    write_protocol(&m.train_protocol, &train)?;
    write_protocol(&m.dev_protocol, &dev)?;
    let mut text = format!(
        "# synthetic corpus seed={} duration_s={} record_env={}\n",
        spec.seed, spec.duration_s, spec.record_env
    );
    for group in &m.entries {
        text.push('\n');
        for line in group {
            text.push_str(line);
            text.push('\n');
        }
    }
    let mut f = fs::File::create(&m.manifest).map_err(io_err(&m.manifest))?;
    f.write_all(text.as_bytes()).map_err(io_err(&m.manifest))?;
    Ok(m)
}
