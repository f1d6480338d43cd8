//! Acceptance checks. Each check prints one PASS/FAIL line and the target
//! exits non-zero if any check fails. This target has its own `main` so the
//! lines are always shown, and the checks run one after another so the timed
//! ones do not compete for cores.

use std::fs;
use std::io::Read;
use std::path::Path;
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hybridspoof::audio::{parse_protocol, AudioClip, Label};
use hybridspoof::corpus::{
    random_ir, synth_genuine, synth_replay, synth_source, ImpulseResponse, IrKind, ReplayChain,
    SourceKind,
};
use hybridspoof::dsp::{frame_count, frame_signal, mel_spectrogram, raw_frames, DspConfig};
use hybridspoof::metrics::{compute_eer, compute_min_tdcf};
use hybridspoof::model::{
    check_model_gradients, composite_loss, self_attention, Batch, Features, ModelConfig, Network,
    ShapeTrace,
};
use hybridspoof::pipeline::{self, RunConfig};
use hybridspoof::tensor::{BnMode, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(t: Duration, limit_s: f64) -> bool {
    t.as_secs_f64() < limit_s
}

fn clip(id: &str, samples: Vec<f64>) -> AudioClip {
    AudioClip::new(id, samples, Label::Unknown).unwrap()
}

fn shape_fidelity() -> Outcome {
    let t0 = Instant::now();
    let cfg = ModelConfig::default();
    let trace = ShapeTrace::for_config(&cfg).unwrap();
    let mut got = vec![trace.hybrid];
    got.extend(trace.rows().into_iter().map(|(_, r, c)| (r, c)));
    let want = vec![
        (640, 126),
        (320, 63),
        (320, 63),
        (160, 31),
        (80, 15),
        (40, 7),
        (1, 1),
    ];
    // The stem keeps the hybrid size; the expected trace lists that size once.
    let mut dedup = got.clone();
    dedup.remove(1);
    let src = synth_source(SourceKind::FormantLike, 2.0, 1).unwrap();
    let c = clip("a", src.samples);
    let mel = mel_spectrogram(&c, &cfg.dsp).unwrap();
    let raw = raw_frames(&c, &cfg.dsp).unwrap();
    let net = Network::new(cfg.clone()).unwrap();
    let f = Features::from_parts(raw.clone(), mel.clone()).unwrap();
    let hybrid = net.hybrid_features(&Batch::new(&[&f]).unwrap(), BnMode::Eval).unwrap();
    let elapsed = t0.elapsed();
    let pass = got.len() == 8
        && dedup == want
        && mel.shape() == (128, 126)
        && raw.shape() == (512, 126)
        && hybrid.shape() == [1, 640, 126]
        && within(elapsed, 1.0);
    outcome(
        pass,
        format!(
            "trace {dedup:?}, mel {:?}, raw {:?}, hybrid {:?}, {:.2} s (limit 1 s)",
            mel.shape(),
            raw.shape(),
            &hybrid.shape()[1..],
            elapsed.as_secs_f64()
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let cfg = ModelConfig::default();
    let net = Network::new(cfg.clone()).unwrap();
    let src_a = synth_source(SourceKind::FormantLike, 2.0, 11).unwrap();
    let src_b = synth_source(SourceKind::Chirp, 2.0, 12).unwrap();
    let a = synth_genuine(
        "a",
        &src_a,
        &random_ir(IrKind::Room, 1),
        &random_ir(IrKind::Microphone, 1),
    )
    .unwrap();
    let chain = ReplayChain {
        record_env: None,
        mic: random_ir(IrKind::Microphone, 2),
        speaker: random_ir(IrKind::Speaker, 2),
        env: random_ir(IrKind::Room, 2),
        mic2: random_ir(IrKind::Microphone, 3),
    };
    let b = synth_replay("b", &src_b, &chain).unwrap();
    let fa = net.features(&a).unwrap();
    let fb = net.features(&b).unwrap();
    let batch = Batch::new(&[&fa, &fb]).unwrap();
    let report = check_model_gradients(&net, &batch, &[1.0, 0.0], 1e-4, 3, 7).unwrap();
    let elapsed = t0.elapsed();
    let coords: usize = report.tensors.iter().map(|t| t.coords).sum();
    outcome(
        report.max_rel_error < 1e-4 && within(elapsed, 300.0),
        format!(
            "{} tensors, {coords} coordinates, max rel error {:.2e} at {}[{}] (limit 1e-4), {:.0} s (limit 300 s)",
            report.tensors.len(),
            report.max_rel_error,
            report.worst.0,
            report.worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

/// Every threshold from `-inf`, each pooled score, and `+inf`; FRR counts
/// bona fide at or below, FAR counts spoof above.
fn brute_force(bona: &[f64], spoof: &[f64], beta: f64) -> (f64, f64) {
    let mut pooled: Vec<f64> = bona.iter().chain(spoof).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut thresholds = vec![f64::NEG_INFINITY];
    for w in pooled.windows(2) {
        thresholds.push(w[0] + (w[1] - w[0]) / 2.0);
    }
    thresholds.push(f64::INFINITY);
    let mut best_gap = f64::INFINITY;
    let mut eer = f64::NAN;
    let mut tdcf = f64::INFINITY;
    for &t in &thresholds {
        let frr = bona.iter().filter(|&&s| s <= t).count() as f64 / bona.len() as f64;
        let far = spoof.iter().filter(|&&s| s > t).count() as f64 / spoof.len() as f64;
        if (frr - far).abs() < best_gap {
            best_gap = (frr - far).abs();
            eer = (frr + far) / 2.0;
        }
        tdcf = tdcf.min(beta * frr + far);
    }
    (eer, tdcf)
}

fn metric_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for i in 0..500 {
        let nb = rng.random_range(1..=50);
        let ns = rng.random_range(1..=50);
        // Every fourth set is coarsely quantised to force ties.
        let q = |v: f64| if i % 4 == 0 { (v * 8.0).round() / 8.0 } else { v };
        let bona: Vec<f64> = (0..nb).map(|_| q(rng.random_range(0.2..1.0))).collect();
        let spoof: Vec<f64> = (0..ns).map(|_| q(rng.random_range(0.0..0.8))).collect();
        let beta = [0.5, 1.0, 10.0][i % 3];
        let (eer, tdcf) = brute_force(&bona, &spoof, beta);
        let got_eer = compute_eer(&bona, &spoof).unwrap().eer;
        let got_tdcf = compute_min_tdcf(&bona, &spoof, beta).unwrap().value;
        if got_eer != eer || got_tdcf != tdcf {
            mismatches += 1;
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        mismatches == 0 && within(elapsed, 30.0),
        format!(
            "500 random score sets, {mismatches} mismatches (exact), {:.2} s (limit 30 s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn attention_algebra() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut row_err, mut perm_err, mut uniform_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let d = rng.random_range(2..=48);
        let t = rng.random_range(2..=40);
        let h = random_tensor(&mut rng, &[1, d, t], 1.0);
        let wq = random_tensor(&mut rng, &[d, d], 0.5);
        let wk = random_tensor(&mut rng, &[d, d], 0.5);
        let wv = random_tensor(&mut rng, &[d, d], 0.5);
        let scale = (t as f64).sqrt();
        let out = self_attention(&h, &wq, &wk, &wv, scale).unwrap();
        for row in out.weights.data().chunks(d) {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        // Shuffle the time axis.
        let mut perm: Vec<usize> = (0..t).collect();
        for i in (1..t).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let hp = Tensor::from_fn(&[1, d, t], |i| h.data()[(i / t) * t + perm[i % t]]);
        let outp = self_attention(&hp, &wq, &wk, &wv, scale).unwrap();
        for (i, v) in outp.output.data().iter().enumerate() {
            let expect = out.output.data()[(i / t) * t + perm[i % t]];
            perm_err = perm_err.max((v - expect).abs());
        }
        // Zero queries and keys: every row of A is 1/d, so O averages V's rows.
        let zero = Tensor::zeros(&[d, d]);
        let flat = self_attention(&h, &zero, &zero, &wv, scale).unwrap();
        let mut v = vec![0.0; d * t];
        for r in 0..d {
            for c in 0..d {
                for j in 0..t {
                    v[r * t + j] += wv.data()[r * d + c] * h.data()[c * t + j];
                }
            }
        }
        for j in 0..t {
            let mean = (0..d).map(|r| v[r * t + j]).sum::<f64>() / d as f64;
            for r in 0..d {
                uniform_err = uniform_err.max((flat.output.data()[r * t + j] - mean).abs());
            }
        }
        for w in flat.weights.data() {
            uniform_err = uniform_err.max((w - 1.0 / d as f64).abs());
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        row_err <= 1e-9 && perm_err <= 1e-9 && uniform_err <= 1e-12 && within(elapsed, 30.0),
        format!(
            "100 random maps: row-sum err {row_err:.1e} (limit 1e-9), permutation err {perm_err:.1e} \
             (limit 1e-9), uniform err {uniform_err:.1e} (limit 1e-12), {:.2} s (limit 30 s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn degenerate_simulator() -> Outcome {
    let mut identical = 0;
    let kinds = [
        SourceKind::Tone,
        SourceKind::Chirp,
        SourceKind::NoiseBurst,
        SourceKind::FormantLike,
    ];
    for (i, kind) in kinds.iter().enumerate() {
        let src = synth_source(*kind, 2.0, i as u64).unwrap();
        let genuine = synth_genuine(
            "g",
            &src,
            &ImpulseResponse::delta(IrKind::Room),
            &ImpulseResponse::delta(IrKind::Microphone),
        )
        .unwrap();
        let replay = synth_replay("g", &src, &ReplayChain::identity()).unwrap();
        let same = genuine
            .samples
            .iter()
            .zip(&replay.samples)
            .all(|(a, b)| a.to_bits() == b.to_bits())
            && genuine.samples.len() == replay.samples.len();
        identical += usize::from(same);
    }
    outcome(
        identical == kinds.len(),
        format!("{identical}/{} sources bit-identical through all-delta chains", kinds.len()),
    )
}

/// Runs `hybridspoof <sub> --key value ...` (an empty value passes a bare
/// flag) and returns stdout, failing the check on a non-zero exit.
fn cli(sub: &str, args: &[(&str, String)]) -> Result<String, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hybridspoof"));
    cmd.arg(sub);
    for (k, v) in args {
        cmd.arg(format!("--{k}"));
        if !v.is_empty() {
            cmd.arg(v);
        }
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{sub}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn end_to_end(root: &Path) -> Outcome {
    match end_to_end_run(root) {
        Ok(o) => o,
        Err(e) => outcome(false, e),
    }
}

/// The command-line pipeline on the default simulated corpus with the default
/// config, timed from simulation to the last training epoch.
fn end_to_end_run(root: &Path) -> Result<Outcome, String> {
    const BUDGET_S: f64 = 900.0;
    let p = |path: &Path| path.display().to_string();
    let corpus = root.join("corpus");
    let feats = root.join("features");
    let ck = root.join("run/model.ck");
    let scores = root.join("run/dev_scores.txt");
    let t0 = Instant::now();
    cli("simulate", &[("out_dir", p(&corpus))])?;
    let simulated = t0.elapsed();
    let common = [
        ("audio_dir", p(&corpus.join("wav"))),
        ("feature_dir", p(&feats)),
    ];
    let mut args = common.to_vec();
    args.push(("protocol", p(&corpus.join("protocol.txt"))));
    cli("featurize", &args)?;

    let mut train = Command::new(env!("CARGO_BIN_EXE_hybridspoof"));
    train.arg("train");
    let mut args = common.to_vec();
    args.extend([
        ("train_protocol", p(&corpus.join("protocol_train.txt"))),
        ("dev_protocol", p(&corpus.join("protocol_dev.txt"))),
        ("checkpoint", p(&ck)),
        ("target_dev_eer", "0.05".to_string()),
    ]);
    for (k, v) in &args {
        train.arg(format!("--{k}")).arg(v);
    }
    let mut child = train
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    // Past the budget the check has failed whatever happens next.
    let finished = loop {
        if let Some(status) = child.try_wait().map_err(|e| e.to_string())? {
            if !status.success() {
                let mut err = String::new();
                if let Some(mut s) = child.stderr.take() {
                    let _ = s.read_to_string(&mut err);
                }
                return Err(format!("train: {}", err.trim()));
            }
            break true;
        }
        if !within(t0.elapsed(), BUDGET_S) {
            let _ = child.kill();
            let _ = child.wait();
            break false;
        }
        std::thread::sleep(Duration::from_millis(200));
    };
    let trained = t0.elapsed();

    // epoch,l_att,l_fin,total,dev_eer
    let log = fs::read_to_string(root.join("run/model.ck.log.csv")).unwrap_or_default();
    let dev: Vec<f64> = log
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(4)?.parse().ok())
        .collect();
    let (best_epoch, best) = dev
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &e)| if e < acc.1 { (i + 1, e) } else { acc });

    let scored = if finished {
        let mut args = common.to_vec();
        args.extend([
            ("protocol", p(&corpus.join("protocol_dev.txt"))),
            ("checkpoint", p(&ck)),
            ("score_out", p(&scores)),
            ("scores", p(&scores)),
        ]);
        cli("score", &args)?;
        let csv = cli("eval", &args.iter().cloned().chain([("csv", String::new())]).collect::<Vec<_>>());
        csv.ok()
            .and_then(|c| c.lines().nth(1)?.split(',').next()?.parse::<f64>().ok())
            .map_or("scoring failed".to_string(), |e| format!("{:.2}%", 100.0 * e))
    } else {
        "not scored".to_string()
    };

    let train_n = parse_protocol(corpus.join("protocol_train.txt")).map_err(|e| e.to_string())?.len();
    let dev_n = parse_protocol(corpus.join("protocol_dev.txt")).map_err(|e| e.to_string())?.len();
    let pass = finished && best <= 0.05 && dev.len() <= 30 && within(trained, BUDGET_S);
    let stop = if finished { "" } else { ", stopped at the time limit" };
    Ok(outcome(
        pass,
        format!(
            "{train_n} train / {dev_n} dev clips, best dev EER {:.2}% at epoch {best_epoch} of {}{stop} \
             (limit 5.00% within 30), dev EER from score+eval {scored}, {:.0} s simulate + {:.0} s \
             featurize and train (limit {BUDGET_S:.0} s in total)",
            100.0 * best,
            dev.len(),
            simulated.as_secs_f64(),
            (trained - simulated).as_secs_f64()
        ),
    ))
}

fn loss_composition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut zero_exact = true;
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let t = rng.random_range(1..=130);
        let frames = Tensor::from_fn(&[n, t], |_| rng.random_range(0.0..1.0));
        let clips: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        for lambda in [0.0, 0.5, 1.0, 2.0] {
            let p = composite_loss(&frames, &clips, &y, lambda).unwrap();
            let expect = p.l_att + lambda * p.l_fin;
            worst = worst.max((p.total - expect).abs() / expect.abs().max(1.0));
            if lambda == 0.0 && p.total != p.l_att {
                zero_exact = false;
            }
        }
    }
    // Same identity through the network's own loss graph.
    let mut cfg = ModelConfig::default();
    cfg.dsp.clip_seconds = 0.25;
    cfg.dsp.frame_ms = 4.0;
    cfg.dsp.hop_ms = 2.0;
    cfg.dsp.n_mels = 16;
    cfg.deep_channels = 2;
    cfg.base_channels = 2;
    for lambda in [0.0, 0.5, 1.0, 2.0] {
        cfg.lambda = lambda;
        let net = Network::new(cfg.clone()).unwrap();
        let feats: Vec<Features> = (0..3)
            .map(|i| {
                let s = synth_source(SourceKind::NoiseBurst, 0.25, i).unwrap();
                net.features(&clip("x", s.samples)).unwrap()
            })
            .collect();
        let refs: Vec<&Features> = feats.iter().collect();
        let out = net
            .forward(&Batch::new(&refs).unwrap(), Some(&[1.0, 0.0, 1.0]), BnMode::Train)
            .unwrap();
        let p = out.loss.unwrap();
        let expect = p.l_att + lambda * p.l_fin;
        worst = worst.max((p.total - expect).abs() / expect.abs().max(1.0));
        if lambda == 0.0 && p.total != p.l_att {
            zero_exact = false;
        }
    }
    outcome(
        worst <= f64::EPSILON && zero_exact,
        format!(
            "800 random cases + network graph, max rel deviation {worst:.1e} (limit {:.1e}), \
             lambda=0 exact: {zero_exact}",
            f64::EPSILON
        ),
    )
}

fn small_run_config(root: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("clip_seconds", "0.25"),
        ("frame_ms", "4"),
        ("hop_ms", "2"),
        ("n_mels", "16"),
        ("deep_channels", "2"),
        ("base_channels", "2"),
        ("epochs", "2"),
        ("batch_size", "4"),
        ("lr", "0.001"),
    ] {
        c.set(k, v).unwrap();
    }
    let corpus = root.join("corpus");
    c.paths.audio_dir = Some(corpus.join("wav"));
    c.paths.train_protocol = Some(corpus.join("protocol_train.txt"));
    c.paths.dev_protocol = Some(corpus.join("protocol_dev.txt"));
    c.paths.protocol = Some(corpus.join("protocol.txt"));
    c
}

fn run_once(root: &Path) -> (Vec<Vec<u8>>, Vec<u8>, Vec<u8>) {
    let mut c = small_run_config(root);
    c.paths.out_dir = Some(root.join("corpus"));
    c.corpus.bona_fide = 10;
    c.corpus.replay = 10;
    c.corpus.df_surrogate = 10;
    pipeline::simulate(&c).unwrap();
    let records = parse_protocol(root.join("corpus/protocol.txt")).unwrap();
    let cache = root.join("features");
    pipeline::featurize(&records, &root.join("corpus/wav"), &cache, &c.model.dsp).unwrap();
    let mut files: Vec<_> = fs::read_dir(&cache)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    let feats = files.iter().map(|p| fs::read(p).unwrap()).collect();
    c.paths.checkpoint = Some(root.join("run/model.ck"));
    c.paths.score_out = Some(root.join("run/scores.txt"));
    let out = pipeline::train(&c).unwrap();
    pipeline::score(&c).unwrap();
    (
        feats,
        fs::read(out.log).unwrap(),
        fs::read(root.join("run/scores.txt")).unwrap(),
    )
}

fn determinism(root: &Path) -> Outcome {
    let a = run_once(&root.join("a"));
    let b = run_once(&root.join("b"));
    outcome(
        a.0 == b.0 && a.1 == b.1 && a.2 == b.2 && !a.0.is_empty(),
        format!(
            "{} feature/index files identical: {}, training log identical: {}, score file identical: {}",
            a.0.len(),
            a.0 == b.0,
            a.1 == b.1,
            a.2 == b.2
        ),
    )
}

/// Frame starts in the padded signal: `s = t * hop` while `s + frame <= n + frame`.
fn enumerate_starts(n: usize, frame: usize, hop: usize) -> usize {
    let padded = n + frame;
    (0..).map(|t| t * hop).take_while(|s| s + frame <= padded).count()
}

fn framing_arithmetic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut bad = 0;
    for _ in 0..50 {
        let frame = rng.random_range(2..=1024);
        let hop = rng.random_range(1..=frame);
        let n = rng.random_range(1..=40_000);
        let enumerated = enumerate_starts(n, frame, hop);
        let formula = 1 + n / hop;
        let counted = frame_count(n, frame, hop, true).unwrap();
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let framed = frame_signal(&x, frame, hop, false, true).unwrap().n_frames;
        if enumerated != formula || counted != formula || framed != formula {
            bad += 1;
        }
    }
    let default_t = DspConfig::default().n_frames().unwrap();
    outcome(
        bad == 0 && default_t == 126 && enumerate_starts(32000, 512, 256) == 126,
        format!("50 random (N, frame, hop): {bad} disagreements; default T = {default_t} (expect 126)"),
    )
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    println!("SKIP  full-scale challenge results: need the complete challenge corpora and GPU-scale training; replaced by the checks below");
    let checks: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("shape fidelity", Box::new(shape_fidelity)),
        ("gradient correctness", Box::new(gradient_correctness)),
        ("metric oracle equivalence", Box::new(metric_oracle)),
        ("attention algebra", Box::new(attention_algebra)),
        ("degenerate simulator identity", Box::new(degenerate_simulator)),
        ("end-to-end learning", Box::new(|| end_to_end(&tmp.path().join("e2e")))),
        ("loss composition", Box::new(loss_composition)),
        ("determinism", Box::new(|| determinism(&tmp.path().join("det")))),
        ("framing arithmetic", Box::new(framing_arithmetic)),
    ];
    let mut failed = Vec::new();
    for (name, check) in checks {
        let o = check();
        println!("{}  {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all checks passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed checks: {failed:?}");
        ExitCode::FAILURE
    }
}
