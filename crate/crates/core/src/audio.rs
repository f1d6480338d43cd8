//! Audio ingestion, protocol files and score files.
//!
//! Clips are always mono 16-bit PCM at 16 kHz. Anything else is rejected;
//! nothing here resamples or downmixes.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

/// The only sample rate the pipeline accepts.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: unsupported sample rate {rate} Hz (expected 16000)")]
    UnsupportedRate { path: PathBuf, rate: u32 },
    #[error("{path}: unsupported bit depth {bits} (expected 16-bit PCM)")]
    UnsupportedDepth { path: PathBuf, bits: u32 },
    #[error("{path}: {channels} channels (expected mono)")]
    MultiChannel { path: PathBuf, channels: u32 },
    #[error("{path}: corrupt or unreadable audio: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("{path}:{line}: malformed line: {text:?}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        text: String,
    },
    #[error("{path}:{line}: duplicate utterance id {utt_id}")]
    DuplicateUttId {
        path: PathBuf,
        line: usize,
        utt_id: String,
    },
    #[error("invalid clip {utt_id}: {reason}")]
    InvalidClip { utt_id: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AudioError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        AudioError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = AudioError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    BonaFide,
    Spoof,
    Unknown,
}

impl Label {
    /// Binary training target: bona fide is the positive (high-score) class.
    pub fn target(self) -> Option<f64> {
        match self {
            Label::BonaFide => Some(1.0),
            Label::Spoof => Some(0.0),
            Label::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub utt_id: String,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: Label,
}

impl AudioClip {
    /// Builds a clip and checks the canonical-format invariants.
    pub fn new(utt_id: impl Into<String>, samples: Vec<f64>, label: Label) -> Result<Self> {
        let clip = AudioClip {
            utt_id: utt_id.into(),
            samples,
            sample_rate: SAMPLE_RATE,
            label,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| AudioError::InvalidClip {
            utt_id: self.utt_id.clone(),
            reason,
        };
        if self.sample_rate != SAMPLE_RATE {
            return Err(fail(format!("sample rate {}", self.sample_rate)));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(fail(format!("non-finite sample at index {i}")));
        }
        Ok(())
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn pcm_to_unit(v: i16) -> f64 {
    v as f64 / 32768.0
}

/// Decodes a WAV or FLAC file holding mono 16-bit PCM at 16 kHz.
///
/// The container is sniffed from the magic bytes, not the extension.
pub fn decode_audio(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| AudioError::io(path, e))?;
    let corrupt = |reason: &str| AudioError::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 4 {
        return Err(corrupt("file too short"));
    }
    let samples = match &bytes[..4] {
        b"RIFF" => decode_wav(path, &bytes)?,
        b"fLaC" => decode_flac(path, &bytes)?,
        _ => return Err(corrupt("unrecognised container (expected WAV or FLAC)")),
    };
    let utt_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(AudioClip {
        utt_id,
        samples,
        sample_rate: SAMPLE_RATE,
        label: Label::Unknown,
    })
}

fn check_format(path: &Path, rate: u32, bits: u32, channels: u32) -> Result<()> {
    if channels != 1 {
        return Err(AudioError::MultiChannel {
            path: path.to_path_buf(),
            channels,
        });
    }
    if bits != 16 {
        return Err(AudioError::UnsupportedDepth {
            path: path.to_path_buf(),
            bits,
        });
    }
    if rate != SAMPLE_RATE {
        return Err(AudioError::UnsupportedRate {
            path: path.to_path_buf(),
            rate,
        });
    }
    Ok(())
}

fn decode_wav(path: &Path, bytes: &[u8]) -> Result<Vec<f64>> {
    let corrupt = |e: hound::Error| AudioError::CorruptFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let reader = hound::WavReader::new(std::io::Cursor::new(bytes)).map_err(corrupt)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(AudioError::UnsupportedDepth {
            path: path.to_path_buf(),
            bits: spec.bits_per_sample as u32,
        });
    }
    check_format(
        path,
        spec.sample_rate,
        spec.bits_per_sample as u32,
        spec.channels as u32,
    )?;
    reader
        .into_samples::<i16>()
        .map(|s| s.map(pcm_to_unit).map_err(corrupt))
        .collect()
}

fn decode_flac(path: &Path, bytes: &[u8]) -> Result<Vec<f64>> {
    let corrupt = |e: claxon::Error| AudioError::CorruptFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut reader = claxon::FlacReader::new(std::io::Cursor::new(bytes)).map_err(corrupt)?;
    let info = reader.streaminfo();
    check_format(path, info.sample_rate, info.bits_per_sample, info.channels)?;
    reader
        .samples()
        .map(|s| s.map(|v| pcm_to_unit(v as i16)).map_err(corrupt))
        .collect()
}

/// Writes a clip as 16-bit PCM mono WAV. Samples are clamped to [-1, 1) before
/// quantisation.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => AudioError::io(path, io),
        other => AudioError::CorruptFile {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in &clip.samples {
        writer.write_sample(quantize(s)).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}

pub fn quantize(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Looks for `<utt_id>.wav` then `<utt_id>.flac` under `dir`.
pub fn find_audio(dir: &Path, utt_id: &str) -> Option<PathBuf> {
    ["wav", "flac"]
        .iter()
        .map(|ext| dir.join(format!("{utt_id}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads the clip for a protocol trial and attaches its ground-truth label.
pub fn load_trial(dir: &Path, record: &TrialRecord) -> Result<AudioClip> {
    let path = find_audio(dir, &record.utt_id).ok_or_else(|| {
        AudioError::io(
            &dir.join(&record.utt_id),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no .wav or .flac file"),
        )
    })?;
    let mut clip = decode_audio(&path)?;
    clip.utt_id = record.utt_id.clone();
    clip.label = record.key.into();
    Ok(clip)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Key {
    BonaFide,
    Spoof,
}

impl Key {
    pub fn as_str(self) -> &'static str {
        match self {
            Key::BonaFide => "bonafide",
            Key::Spoof => "spoof",
        }
    }
}

impl From<Key> for Label {
    fn from(k: Key) -> Label {
        match k {
            Key::BonaFide => Label::BonaFide,
            Key::Spoof => Label::Spoof,
        }
    }
}

/// One line of an ASVspoof-style protocol file.
///
/// Columns are `speaker utt [middle...] key`. A two-column line is read as
/// `utt key` with an unknown speaker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialRecord {
    pub speaker_id: String,
    pub utt_id: String,
    /// Columns between the utterance id and the key, kept verbatim.
    pub middle: Vec<String>,
    pub key: Key,
}

impl TrialRecord {
    pub fn new(speaker_id: &str, utt_id: &str, system_id: &str, key: Key) -> Self {
        TrialRecord {
            speaker_id: speaker_id.to_string(),
            utt_id: utt_id.to_string(),
            middle: vec!["-".to_string(), system_id.to_string()],
            key,
        }
    }

    /// The attack/system column: the one right before the key, "-" when absent.
    pub fn system_id(&self) -> &str {
        if self.middle.len() >= 2 {
            self.middle.last().map(String::as_str).unwrap_or("-")
        } else {
            "-"
        }
    }

    pub fn parse_line(line: &str) -> Option<TrialRecord> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 {
            return None;
        }
        let key = match *fields.last()? {
            "bonafide" => Key::BonaFide,
            "spoof" => Key::Spoof,
            _ => return None,
        };
        let (speaker, utt, middle) = if fields.len() == 2 {
            ("-", fields[0], &[][..])
        } else {
            (fields[0], fields[1], &fields[2..fields.len() - 1])
        };
        Some(TrialRecord {
            speaker_id: speaker.to_string(),
            utt_id: utt.to_string(),
            middle: middle.iter().map(|s| s.to_string()).collect(),
            key,
        })
    }
}

impl fmt::Display for TrialRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.speaker_id == "-" && self.middle.is_empty() {
            return write!(f, "{} {}", self.utt_id, self.key.as_str());
        }
        write!(f, "{} {}", self.speaker_id, self.utt_id)?;
        for m in &self.middle {
            write!(f, " {m}")?;
        }
        write!(f, " {}", self.key.as_str())
    }
}

/// Parses a protocol file. Blank lines are skipped; every error carries a
/// 1-based line number.
pub fn parse_protocol(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| AudioError::io(path, e))?;
    parse_protocol_str(path, &text)
}

pub fn parse_protocol_str(path: &Path, text: &str) -> Result<Vec<TrialRecord>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = TrialRecord::parse_line(line).ok_or_else(|| AudioError::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            text: line.to_string(),
        })?;
        if !seen.insert(record.utt_id.clone()) {
            return Err(AudioError::DuplicateUttId {
                path: path.to_path_buf(),
                line: i + 1,
                utt_id: record.utt_id,
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_protocol(path: impl AsRef<Path>, records: &[TrialRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| AudioError::io(path, e))
}

/// Detection score for one utterance; higher means more bona fide.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLine {
    pub utt_id: String,
    pub score: f64,
}

impl ScoreLine {
    pub fn new(utt_id: impl Into<String>, score: f64) -> Self {
        ScoreLine {
            utt_id: utt_id.into(),
            score,
        }
    }
}

pub fn write_scores(records: &[ScoreLine], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| AudioError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{} {:.6}", r.utt_id, r.score).map_err(|e| AudioError::io(path, e))?;
    }
    w.flush().map_err(|e| AudioError::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreLine>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| AudioError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = || AudioError::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            text: line.to_string(),
        };
        let mut fields = line.split_whitespace();
        let (Some(utt), Some(score), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(malformed());
        };
        let score: f64 = score.parse().map_err(|_| malformed())?;
        if !score.is_finite() {
            return Err(malformed());
        }
        out.push(ScoreLine::new(utt, score));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_pcm_wav(path: &Path, rate: u32, channels: u16, values: &[i16]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &v in values {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn decode_scales_pcm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u1.wav");
        write_pcm_wav(&p, 16_000, 1, &[0, 16384, -32768]);
        let clip = decode_audio(&p).unwrap();
        assert_eq!(clip.samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(clip.label, Label::Unknown);
        assert_eq!(clip.utt_id, "u1");
    }

    #[test]
    fn decode_rejects_bad_formats() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_pcm_wav(&p, 8_000, 1, &[1, 2, 3]);
        assert!(matches!(
            decode_audio(&p),
            Err(AudioError::UnsupportedRate { rate: 8000, .. })
        ));

        let p = dir.path().join("b.wav");
        write_pcm_wav(&p, 16_000, 2, &[1, 2, 3, 4]);
        assert!(matches!(
            decode_audio(&p),
            Err(AudioError::MultiChannel { channels: 2, .. })
        ));

        let p = dir.path().join("c.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            decode_audio(&p),
            Err(AudioError::UnsupportedDepth { bits: 24, .. })
        ));

        let p = dir.path().join("empty.wav");
        fs::write(&p, b"").unwrap();
        assert!(matches!(
            decode_audio(&p),
            Err(AudioError::CorruptFile { .. })
        ));

        let p = dir.path().join("junk.wav");
        fs::write(&p, b"RIFF\x00\x00garbage").unwrap();
        assert!(matches!(
            decode_audio(&p),
            Err(AudioError::CorruptFile { .. })
        ));
    }

    #[test]
    fn write_then_decode_wav() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let clip = AudioClip::new("x", vec![0.25, -0.5, 0.0, 0.999], Label::BonaFide).unwrap();
        write_wav(&p, &clip).unwrap();
        let back = decode_audio(&p).unwrap();
        for (a, b) in clip.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn clip_rejects_nan() {
        assert!(AudioClip::new("x", vec![0.0, f64::NAN], Label::Spoof).is_err());
    }

    #[test]
    fn protocol_lines() {
        let r = TrialRecord::parse_line("LA_0079 LA_T_1138215 - - bonafide").unwrap();
        assert_eq!(r.speaker_id, "LA_0079");
        assert_eq!(r.utt_id, "LA_T_1138215");
        assert_eq!(r.key, Key::BonaFide);
        assert_eq!(r.system_id(), "-");

        let r = TrialRecord::parse_line("X U1 - - spoof").unwrap();
        assert_eq!(r.key, Key::Spoof);

        let r = TrialRecord::parse_line("LA_0079 LA_T_1 - A07 spoof").unwrap();
        assert_eq!(r.system_id(), "A07");

        let r = TrialRecord::parse_line("U9 bonafide").unwrap();
        assert_eq!((r.speaker_id.as_str(), r.utt_id.as_str()), ("-", "U9"));

        assert!(TrialRecord::parse_line("X U1 - - genuine").is_none());
        assert!(TrialRecord::parse_line("bonafide").is_none());
    }

    #[test]
    fn protocol_errors_carry_line_numbers() {
        let p = Path::new("proto.txt");
        let err = parse_protocol_str(p, "A U1 - - bonafide\n\nB U2 - - genuine\n").unwrap_err();
        assert!(matches!(err, AudioError::MalformedLine { line: 3, .. }));
        let err = parse_protocol_str(p, "A U1 bonafide\nB U1 spoof\n").unwrap_err();
        assert!(matches!(err, AudioError::DuplicateUttId { line: 2, .. }));
    }

    #[test]
    fn score_file_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.txt");
        write_scores(&[ScoreLine::new("U1", 0.91)], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "U1 0.910000\n");

        fs::write(&p, "U1 0.5\nU2 abc\n").unwrap();
        assert!(matches!(
            read_scores(&p),
            Err(AudioError::MalformedLine { line: 2, .. })
        ));
    }

    #[test]
    fn score_round_trip_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let scores: Vec<ScoreLine> = (0..100)
            .map(|i| ScoreLine::new(format!("U{i}"), rng.random_range(-50.0..50.0)))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.txt");
        write_scores(&scores, &p).unwrap();
        let back = read_scores(&p).unwrap();
        assert_eq!(back.len(), scores.len());
        for (a, b) in scores.iter().zip(&back) {
            assert_eq!(a.utt_id, b.utt_id);
            assert!((a.score - b.score).abs() <= 1e-6);
        }
    }

    fn token() -> impl Strategy<Value = String> {
        "[A-Za-z0-9_]{1,10}".prop_filter("not a key token", |s| s != "bonafide" && s != "spoof")
    }

    proptest! {
        #[test]
        fn protocol_serialize_parse_identity(
            rows in proptest::collection::vec(
                (token(), token(), proptest::collection::vec(token(), 0..4), any::<bool>()),
                1..20,
            )
        ) {
            let mut records = Vec::new();
            let mut seen = std::collections::HashSet::new();
            for (spk, utt, middle, bona) in rows {
                if !seen.insert(utt.clone()) {
                    continue;
                }
                records.push(TrialRecord {
                    speaker_id: spk,
                    utt_id: utt,
                    middle,
                    key: if bona { Key::BonaFide } else { Key::Spoof },
                });
            }
            let text: String = records.iter().map(|r| format!("{r}\n")).collect();
            let back = parse_protocol_str(Path::new("p"), &text).unwrap();
            prop_assert_eq!(back, records);
        }

        #[test]
        fn decoded_pcm_stays_in_unit_range(v in any::<i16>()) {
            let s = pcm_to_unit(v);
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
