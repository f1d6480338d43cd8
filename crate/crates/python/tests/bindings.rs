use pyo3::prelude::*;

use hybridspoof_py::hybridspoof_py;

/// Runs `code` against the module in an embedded interpreter.
fn run(code: &std::ffi::CStr) {
    pyo3::append_to_inittab!(hybridspoof_py);
    Python::initialize();
    Python::attach(|py| {
        if let Err(e) = py.run(code, None, None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn module_round_trip() {
    run(cr#"
import math, tempfile
import hybridspoof_py as hs

cfg = hs.DspConfig()
assert (cfg.frame_len, cfg.hop_len, cfg.n_frames, cfg.n_mels) == (512, 256, 126, 128)
assert hs.frame_count(32000, 512, 256, True) == 126
assert hs.frame_count(32000, 512, 256, False) == 124

tone = [0.5 * math.sin(2 * math.pi * 440 * t / hs.SAMPLE_RATE) for t in range(32000)]
mel = hs.mel_spectrogram(tone, cfg)
assert len(mel) == 128 and all(len(r) == 126 for r in mel)
assert hs.preemphasize([1.0, 0.0], 0.97, -1.0) == [1.0, -0.97]

eer, thr = hs.compute_eer([0.3, 0.6, 0.9], [0.1, 0.4, 0.7])
assert abs(eer - 1 / 3) < 1e-12

try:
    hs.compute_eer([], [0.1])
    raise AssertionError("empty population accepted")
except ValueError:
    pass

small = {"clip_seconds": "0.25", "frame_ms": "4", "hop_ms": "2", "n_mels": "16",
         "deep_channels": "2", "base_channels": "2"}
net = hs.Network(small)
s = net.score([0.1 * math.sin(t) for t in range(4000)])
assert 0.0 < s < 1.0
with tempfile.TemporaryDirectory() as d:
    net.save(d + "/n.ck")
    assert hs.Network.load(d + "/n.ck", small).score([0.1 * math.sin(t) for t in range(4000)]) == s
    try:
        hs.Network({"n_mels": "abc"})
        raise AssertionError("bad setting accepted")
    except ValueError:
        pass
"#);
}
