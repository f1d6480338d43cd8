"""Smoke test for the hybridspoof_py extension module.

Build the module first (see README), then run:  python python/smoke_test.py
"""

import math
import random
import tempfile

import hybridspoof_py as hs


def main():
    cfg = hs.DspConfig()
    assert (cfg.frame_len, cfg.hop_len, cfg.n_frames) == (512, 256, 126)
    assert hs.frame_count(32000, 512, 256) == 126

    rng = random.Random(0)
    tone = [0.5 * math.sin(2 * math.pi * 440 * t / hs.SAMPLE_RATE) for t in range(32000)]
    mel = hs.mel_spectrogram(tone, cfg)
    raw = hs.raw_frames(tone, cfg)
    assert len(mel) == 128 and len(mel[0]) == 126
    assert len(raw) == 512 and len(raw[0]) == 126

    assert hs.preemphasize([1.0, 0.0], 0.97, 1.0) == [1.0, 0.97]

    eer, thr = hs.compute_eer([0.3, 0.6, 0.9], [0.1, 0.4, 0.7])
    assert abs(eer - 1 / 3) < 1e-12 and abs(thr - 0.5) < 1e-12
    tdcf, _ = hs.compute_min_tdcf([0.9, 0.8], [0.1, 0.2], beta=1.0)
    assert tdcf == 0.0
    assert len(hs.det_curve([0.9], [0.1])) == 3

    small = {
        "clip_seconds": "0.25",
        "frame_ms": "4",
        "hop_ms": "2",
        "n_mels": "16",
        "deep_channels": "2",
        "base_channels": "2",
    }
    net = hs.Network(small)
    noise = [rng.uniform(-0.5, 0.5) for _ in range(4000)]
    s = net.score(noise)
    assert 0.0 < s < 1.0
    assert net.shape_trace()[0][1:] == (80, 126)
    assert net.shape_trace()[1][1:] == (40, 63)
    assert net.shape_trace()[-1][1:] == (1, 1)
    with tempfile.TemporaryDirectory() as d:
        path = d + "/net.ck"
        net.save(path)
        again = hs.Network.load(path, small)
        assert again.score(noise) == s

    with tempfile.TemporaryDirectory() as d:
        n = hs.simulate(dict(small, out_dir=d, n_bona_fide="2", n_replay="2"))
        assert n == 4
        samples = hs.read_audio(d + "/wav/SIM_B_00000.wav")
        assert len(samples) == 4000

    print("smoke test passed: %d parameters in the default network" % hs.Network().num_parameters)


if __name__ == "__main__":
    main()
