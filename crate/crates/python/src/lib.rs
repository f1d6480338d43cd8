use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use hybridspoof::audio::{self, AudioClip, Label};
use hybridspoof::dsp;
use hybridspoof::metrics;
use hybridspoof::model::{self, ModelConfig, ScaleMode};
use hybridspoof::pipeline::{self, PipelineError, RunConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pipeline_err(e: PipelineError) -> PyErr {
    match e {
        PipelineError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn run_config(settings: Option<HashMap<String, String>>) -> PyResult<RunConfig> {
    let settings = settings.unwrap_or_default();
    let mut keys: Vec<_> = settings.iter().collect();
    // Stable order so `seed` and friends apply the same way every call.
    keys.sort();
    RunConfig::load(None, keys.into_iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .map_err(pipeline_err)
}

/// Front-end settings; every field is readable and writable.
#[pyclass(name = "DspConfig", from_py_object)]
#[derive(Clone)]
struct PyDspConfig {
    inner: dsp::DspConfig,
}

#[pymethods]
impl PyDspConfig {
    #[new]
    #[pyo3(signature = (frame_ms=32.0, hop_ms=16.0, n_mels=128, alpha=0.97, preemphasis_sign=1.0, clip_seconds=2.0))]
    fn new(
        frame_ms: f64,
        hop_ms: f64,
        n_mels: usize,
        alpha: f64,
        preemphasis_sign: f64,
        clip_seconds: f64,
    ) -> PyResult<Self> {
        let inner = dsp::DspConfig {
            frame_ms,
            hop_ms,
            n_mels,
            alpha,
            preemphasis_sign,
            clip_seconds,
            ..dsp::DspConfig::default()
        };
        inner.validate().map_err(value_err)?;
        Ok(PyDspConfig { inner })
    }

    #[getter]
    fn frame_len(&self) -> PyResult<usize> {
        self.inner.frame_len().map_err(value_err)
    }

    #[getter]
    fn hop_len(&self) -> PyResult<usize> {
        self.inner.hop_len().map_err(value_err)
    }

    #[getter]
    fn n_frames(&self) -> PyResult<usize> {
        self.inner.n_frames().map_err(value_err)
    }

    #[getter]
    fn n_mels(&self) -> usize {
        self.inner.n_mels
    }

    fn __repr__(&self) -> String {
        format!(
            "DspConfig(frame_ms={}, hop_ms={}, n_mels={}, alpha={}, preemphasis_sign={})",
            self.inner.frame_ms,
            self.inner.hop_ms,
            self.inner.n_mels,
            self.inner.alpha,
            self.inner.preemphasis_sign
        )
    }
}

fn clip_from(samples: Vec<f64>) -> PyResult<AudioClip> {
    AudioClip::new("py", samples, Label::Unknown).map_err(value_err)
}

fn rows(data: &[f64], n_rows: usize, n_cols: usize) -> Vec<Vec<f64>> {
    (0..n_rows)
        .map(|r| data[r * n_cols..(r + 1) * n_cols].to_vec())
        .collect()
}

/// Log-mel spectrogram as `n_mels` rows of `n_frames` values.
#[pyfunction]
#[pyo3(signature = (samples, config=None))]
fn mel_spectrogram(samples: Vec<f64>, config: Option<PyDspConfig>) -> PyResult<Vec<Vec<f64>>> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let mel = dsp::mel_spectrogram(&clip_from(samples)?, &cfg).map_err(value_err)?;
    Ok(rows(&mel.data, mel.n_mels, mel.n_frames))
}

/// Raw frames as `frame_len` rows of `n_frames` values.
#[pyfunction]
#[pyo3(signature = (samples, config=None))]
fn raw_frames(samples: Vec<f64>, config: Option<PyDspConfig>) -> PyResult<Vec<Vec<f64>>> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let f = dsp::raw_frames(&clip_from(samples)?, &cfg).map_err(value_err)?;
    Ok(rows(&f.data, f.frame_len, f.n_frames))
}

#[pyfunction]
#[pyo3(signature = (samples, alpha=0.97, sign=1.0))]
fn preemphasize(samples: Vec<f64>, alpha: f64, sign: f64) -> Vec<f64> {
    dsp::preemphasize(&samples, alpha, sign)
}

#[pyfunction]
#[pyo3(signature = (n, frame_len, hop, center=true))]
fn frame_count(n: usize, frame_len: usize, hop: usize, center: bool) -> PyResult<usize> {
    dsp::frame_count(n, frame_len, hop, center).map_err(value_err)
}

/// `(eer, threshold)`.
#[pyfunction]
fn compute_eer(bona_fide: Vec<f64>, spoof: Vec<f64>) -> PyResult<(f64, f64)> {
    let e = metrics::compute_eer(&bona_fide, &spoof).map_err(value_err)?;
    Ok((e.eer, e.threshold))
}

/// `(min_tdcf, threshold)`.
#[pyfunction]
#[pyo3(signature = (bona_fide, spoof, beta=1.0))]
fn compute_min_tdcf(bona_fide: Vec<f64>, spoof: Vec<f64>, beta: f64) -> PyResult<(f64, f64)> {
    let t = metrics::compute_min_tdcf(&bona_fide, &spoof, beta).map_err(value_err)?;
    Ok((t.value, t.threshold))
}

/// `(threshold, frr, far)` triples in increasing threshold order.
#[pyfunction]
fn det_curve(bona_fide: Vec<f64>, spoof: Vec<f64>) -> PyResult<Vec<(f64, f64, f64)>> {
    Ok(metrics::det_curve(&bona_fide, &spoof)
        .map_err(value_err)?
        .into_iter()
        .map(|p| (p.threshold, p.frr, p.far))
        .collect())
}

/// Samples of a 16 kHz mono WAV or FLAC file.
#[pyfunction]
fn read_audio(path: PathBuf) -> PyResult<Vec<f64>> {
    Ok(audio::decode_audio(&path).map_err(value_err)?.samples)
}

/// The detection network with freshly initialised or loaded weights.
#[pyclass(name = "Network")]
struct PyNetwork {
    inner: model::Network,
}

fn model_config(settings: Option<HashMap<String, String>>) -> PyResult<ModelConfig> {
    let cfg = run_config(settings)?;
    cfg.model.validate().map_err(value_err)?;
    Ok(cfg.model)
}

#[pymethods]
impl PyNetwork {
    /// `settings` takes the same keys as the command-line config.
    #[new]
    #[pyo3(signature = (settings=None))]
    fn new(settings: Option<HashMap<String, String>>) -> PyResult<Self> {
        let inner = model::Network::new(model_config(settings)?).map_err(value_err)?;
        Ok(PyNetwork { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, settings=None))]
    fn load(path: PathBuf, settings: Option<HashMap<String, String>>) -> PyResult<Self> {
        let inner = model::Network::load(model_config(settings)?, &path).map_err(value_err)?;
        Ok(PyNetwork { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(value_err)
    }

    /// Bona fide probability of one clip (eval mode).
    fn score(&self, samples: Vec<f64>) -> PyResult<f64> {
        self.inner.score_clip(&clip_from(samples)?).map_err(value_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().num_scalars()
    }

    /// `(stage, rows, cols)` for every classifier stage.
    fn shape_trace(&self) -> Vec<(String, usize, usize)> {
        self.inner
            .trace()
            .rows()
            .into_iter()
            .map(|(s, r, c)| (s.to_string(), r, c))
            .collect()
    }

    #[getter]
    fn scale_mode(&self) -> &'static str {
        match self.inner.config().scale_mode {
            ScaleMode::SqrtT => "sqrt_t",
            ScaleMode::SqrtD => "sqrt_d",
        }
    }
}

/// Writes a synthetic corpus; returns the number of clips.
#[pyfunction]
#[pyo3(signature = (settings=None))]
fn simulate(settings: Option<HashMap<String, String>>) -> PyResult<usize> {
    let m = pipeline::simulate(&run_config(settings)?).map_err(pipeline_err)?;
    Ok(m.records.len())
}

/// Trains and returns `(epoch, l_att, l_fin, total, dev_eer)` rows.
#[pyfunction]
#[pyo3(signature = (settings=None))]
fn train(
    py: Python<'_>,
    settings: Option<HashMap<String, String>>,
) -> PyResult<Vec<(usize, f64, f64, f64, f64)>> {
    let cfg = run_config(settings)?;
    let out = py.detach(|| pipeline::train(&cfg)).map_err(pipeline_err)?;
    Ok(out
        .history
        .iter()
        .map(|r| (r.epoch, r.l_att, r.l_fin, r.total, r.dev_eer))
        .collect())
}

/// Scores a protocol; returns `(utt_id, score)` pairs in protocol order.
#[pyfunction]
#[pyo3(signature = (settings=None))]
fn score(py: Python<'_>, settings: Option<HashMap<String, String>>) -> PyResult<Vec<(String, f64)>> {
    let cfg = run_config(settings)?;
    let lines = py.detach(|| pipeline::score(&cfg)).map_err(pipeline_err)?;
    Ok(lines.into_iter().map(|l| (l.utt_id, l.score)).collect())
}

/// `{"eer", "eer_threshold", "min_tdcf", "tdcf_threshold"}` for a score file.
#[pyfunction]
#[pyo3(signature = (settings=None))]
fn evaluate(settings: Option<HashMap<String, String>>) -> PyResult<HashMap<String, f64>> {
    let r = pipeline::eval(&run_config(settings)?).map_err(pipeline_err)?;
    Ok(HashMap::from([
        ("eer".to_string(), r.eer.eer),
        ("eer_threshold".to_string(), r.eer.threshold),
        ("min_tdcf".to_string(), r.min_tdcf.value),
        ("tdcf_threshold".to_string(), r.min_tdcf.threshold),
    ]))
}

#[pymodule]
pub fn hybridspoof_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDspConfig>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(mel_spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(raw_frames, m)?)?;
    m.add_function(wrap_pyfunction!(preemphasize, m)?)?;
    m.add_function(wrap_pyfunction!(frame_count, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eer, m)?)?;
    m.add_function(wrap_pyfunction!(compute_min_tdcf, m)?)?;
    m.add_function(wrap_pyfunction!(det_curve, m)?)?;
    m.add_function(wrap_pyfunction!(read_audio, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("SAMPLE_RATE", audio::SAMPLE_RATE)?;
    Ok(())
}
