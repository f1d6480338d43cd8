use std::path::Path;

use super::loss::{frame_targets, validate_targets, LossParts};
use super::{check_shape, ModelConfig, ModelError, ParamStore, Result, ShapeTrace, DOWNSAMPLE_PADDING};
use crate::audio::AudioClip;
use crate::dsp::{mel_spectrogram, raw_frames, FrameMatrix, MelFeature};
use crate::tensor::{
    load_checkpoint, save_checkpoint, BnMode, Conv2dSpec, Graph, KinkPattern, PoolSpec,
    RunningStats, Tensor, Var,
};

/// Both input views of one clip, each `(rows, n_frames)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub raw: Vec<f64>,
    pub mel: Vec<f64>,
    pub frame_len: usize,
    pub n_mels: usize,
    pub n_frames: usize,
}

impl Features {
    pub fn from_parts(raw: FrameMatrix, mel: MelFeature) -> Result<Self> {
        if raw.n_frames != mel.n_frames {
            return Err(ModelError::TimeAxisMismatch {
                deep: raw.n_frames,
                mel: mel.n_frames,
            });
        }
        Ok(Features {
            frame_len: raw.frame_len,
            n_mels: mel.n_mels,
            n_frames: mel.n_frames,
            raw: raw.data,
            mel: mel.data,
        })
    }

    pub fn from_clip(clip: &AudioClip, cfg: &ModelConfig) -> Result<Self> {
        Features::from_parts(raw_frames(clip, &cfg.dsp)?, mel_spectrogram(clip, &cfg.dsp)?)
    }
}

/// A stack of clips: raw frames `[N, 1, L, T]` and log-mel `[N, n_mels, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub raw: Tensor,
    pub mel: Tensor,
}

impl Batch {
    pub fn new(items: &[&Features]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| ModelError::Config("empty batch".into()))?;
        let (l, m, t) = (first.frame_len, first.n_mels, first.n_frames);
        let mut raw = Vec::with_capacity(items.len() * l * t);
        let mut mel = Vec::with_capacity(items.len() * m * t);
        for f in items {
            if (f.frame_len, f.n_mels, f.n_frames) != (l, m, t)
                || f.raw.len() != l * t
                || f.mel.len() != m * t
            {
                return Err(ModelError::StageShape {
                    stage: "batch",
                    expected: vec![l, m, t],
                    actual: vec![f.frame_len, f.n_mels, f.n_frames],
                });
            }
            raw.extend_from_slice(&f.raw);
            mel.extend_from_slice(&f.mel);
        }
        let n = items.len();
        Ok(Batch {
            raw: Tensor::new(&[n, 1, l, t], raw)?,
            mel: Tensor::new(&[n, m, t], mel)?,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Attended map `[N, d, T]` and row-stochastic weights `[N, d, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub output: Tensor,
    pub weights: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    /// Bona fide probability per clip.
    pub scores: Vec<f64>,
    /// `[N, T]` per-frame bona fide probabilities.
    pub frame_scores: Tensor,
    pub loss: Option<LossParts>,
}

/// Loss, per-parameter gradients (in [`ParamStore`] order) and the running
/// statistics the forward pass would leave behind.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: LossParts,
    pub grads: Vec<Vec<f64>>,
    pub stats: Vec<RunningStats>,
}

struct Vars {
    logit: Var,
    clip_prob: Var,
    frame_prob: Var,
    loss: Option<(Var, Var, Var)>,
}

/// Graph handles for every parameter plus a mutable copy of the running stats.
struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
    stats: Vec<RunningStats>,
    mode: BnMode,
}

impl Bound<'_> {
    fn p(&self, name: &str) -> Var {
        self.vars[self.store.position(name).expect("parameter registered at init")]
    }

    fn bn(&mut self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        let i = self.store.stats_position(name).expect("stats registered at init");
        Ok(g.batch_norm(x, gamma, beta, &mut self.stats[i], self.mode)?)
    }
}

/// Single-head self-attention of `h` (`[N, d, T]` or `[d, T]`) with
/// `A = softmax(Q Kᵀ / scale)` row-wise and output `A V`.
pub fn self_attention(
    h: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    scale: f64,
) -> Result<AttentionOutput> {
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let (q, k, v) = (g.constant(wq.clone()), g.constant(wk.clone()), g.constant(wv.clone()));
    let (o, a) = attention_graph(&mut g, hv, q, k, v, scale)?;
    Ok(AttentionOutput {
        output: g.value(o).clone(),
        weights: g.value(a).clone(),
    })
}

fn attention_graph(
    g: &mut Graph,
    h: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    scale: f64,
) -> Result<(Var, Var)> {
    let q = g.matmul(wq, h, false, false)?;
    let k = g.matmul(wk, h, false, false)?;
    let v = g.matmul(wv, h, false, false)?;
    let logits = g.matmul(q, k, false, true)?;
    let a = g.row_softmax(logits, scale)?;
    let o = g.matmul(a, v, false, false)?;
    Ok((o, a))
}

/// Concatenates the learned map `[N, L, T]` above the mel map `[N, M, T]`.
pub fn fuse(deep: &Tensor, mel: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(deep.clone()), g.constant(mel.clone()));
    let h = fuse_graph(&mut g, a, b)?;
    Ok(g.value(h).clone())
}

fn fuse_graph(g: &mut Graph, deep: Var, mel: Var) -> Result<Var> {
    let (ds, ms) = (g.shape(deep).to_vec(), g.shape(mel).to_vec());
    if ds.len() != 3 || ms.len() != 3 || ds[0] != ms[0] {
        return Err(ModelError::StageShape {
            stage: "fuse",
            expected: ds,
            actual: ms,
        });
    }
    if ds[2] != ms[2] {
        return Err(ModelError::TimeAxisMismatch {
            deep: ds[2],
            mel: ms[2],
        });
    }
    Ok(g.concat(&[deep, mel], 1)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    cfg: ModelConfig,
    trace: ShapeTrace,
    params: ParamStore,
}

impl Network {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let params = ParamStore::init(&cfg)?;
        Network::from_params(cfg, params)
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let trace = ShapeTrace::for_config(&cfg)?;
        let reference = ParamStore::init(&cfg)?;
        if reference.names() != params.names()
            || reference
                .values()
                .iter()
                .zip(params.values())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(ModelError::Param(
                "<store>".into(),
                "layout does not match the config".into(),
            ));
        }
        Ok(Network { cfg, trace, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn trace(&self) -> &ShapeTrace {
        &self.trace
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn features(&self, clip: &AudioClip) -> Result<Features> {
        Features::from_clip(clip, &self.cfg)
    }

    fn bind(&self, g: &mut Graph, trainable: bool, mode: BnMode) -> Bound<'_> {
        let vars = self
            .params
            .values()
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound {
            store: &self.params,
            vars,
            stats: self.params.stats().to_vec(),
            mode,
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<usize> {
        let n = batch.len();
        let l = self.cfg.d_cnn()?;
        let (_, t) = self.trace.hybrid;
        check_shape("raw input", batch.raw.shape(), &[n, 1, l, t])?;
        check_shape("mel input", batch.mel.shape(), &[n, self.cfg.dsp.n_mels, t])?;
        Ok(n)
    }

    fn deep_graph(&self, g: &mut Graph, b: &mut Bound, raw: Var) -> Result<Var> {
        let cd = self.cfg.deep_channels;
        let n = g.shape(raw)[0];
        let (l, t) = (g.shape(raw)[2], g.shape(raw)[3]);
        let x = g.conv2d(raw, b.p("deep.conv1.w"), None, Conv2dSpec::new(1, cd, (7, 7)))?;
        let x = b.bn(g, x, "deep.bn1")?;
        let x = g.relu(x)?;
        let x = g.conv2d(x, b.p("deep.conv2.w"), None, Conv2dSpec::new(cd, cd, (5, 5)))?;
        let x = b.bn(g, x, "deep.bn2")?;
        let x = g.relu(x)?;
        let x = g.conv2d(x, b.p("deep.conv3.w"), None, Conv2dSpec::new(cd, 1, (3, 3)))?;
        let x = b.bn(g, x, "deep.bn3")?;
        Ok(g.reshape(x, &[n, l, t])?)
    }

    fn unit(
        &self,
        g: &mut Graph,
        b: &mut Bound,
        x: Var,
        prefix: &str,
        c_out: usize,
        downsample: bool,
    ) -> Result<Var> {
        let c_in = g.shape(x)[1];
        let a = b.bn(g, x, &format!("{prefix}.bn1"))?;
        let a = g.relu(a)?;
        let mut spec = Conv2dSpec::new(c_in, c_out, (3, 3));
        if downsample {
            spec = spec.stride((2, 2)).padding(DOWNSAMPLE_PADDING);
        }
        let y = g.conv2d(a, b.p(&format!("{prefix}.conv1.w")), None, spec)?;
        let y = b.bn(g, y, &format!("{prefix}.bn2"))?;
        let y = g.relu(y)?;
        let y = g.conv2d(
            y,
            b.p(&format!("{prefix}.conv2.w")),
            Some(b.p(&format!("{prefix}.conv2.b"))),
            Conv2dSpec::new(c_out, c_out, (3, 3)),
        )?;
        let skip = if downsample {
            // Sample the input at the centres of the strided 3x3 windows.
            let out_hw = (g.shape(y)[2], g.shape(y)[3]);
            let offset = (1 - DOWNSAMPLE_PADDING.0, 1 - DOWNSAMPLE_PADDING.1);
            let s = g.subsample(x, (2, 2), offset, out_hw)?;
            g.conv2d(
                s,
                b.p(&format!("{prefix}.proj.w")),
                None,
                Conv2dSpec::new(c_in, c_out, (1, 1)),
            )?
        } else {
            x
        };
        Ok(g.add(y, skip)?)
    }

    /// Residual classifier over the attended map; returns `(logit [N,1],
    /// frame probabilities [N,1,T])`.
    fn classify_graph(&self, g: &mut Graph, b: &mut Bound, o_att: Var) -> Result<(Var, Var)> {
        let shape = g.shape(o_att).to_vec();
        let (n, d, t) = (shape[0], shape[1], shape[2]);

        let u = g.matmul(b.p("frame_head.u"), o_att, false, false)?;
        let u = g.add_bias(u, b.p("frame_head.b"), 1)?;
        let frame_prob = g.sigmoid(u)?;

        let c0 = self.cfg.base_channels;
        let img = g.reshape(o_att, &[n, 1, d, t])?;
        let x = g.conv2d(
            img,
            b.p("stem.w"),
            Some(b.p("stem.b")),
            Conv2dSpec::new(1, c0, (7, 7)),
        )?;
        check_shape("stem", g.shape(x), &[n, c0, self.trace.stem.0, self.trace.stem.1])?;
        let mut x = g.max_pool2d(
            x,
            PoolSpec {
                kernel: (3, 3),
                stride: (2, 2),
                padding: (1, 1),
            },
        )?;
        check_shape("max pool", g.shape(x), &[n, c0, self.trace.pool.0, self.trace.pool.1])?;

        for (s, &c_out) in self.cfg.stage_channels().iter().enumerate() {
            for u in 0..2 {
                let prefix = format!("block{}.{}", s + 1, u);
                x = self.unit(g, b, x, &prefix, c_out, u == 0 && s > 0)?;
            }
            let (h, w) = self.trace.blocks[s];
            check_shape("resnet block", g.shape(x), &[n, c_out, h, w])?;
        }
        let pooled = g.global_avg_pool(x)?;
        let logit = g.matmul(pooled, b.p("head.w"), false, false)?;
        let logit = g.add_bias(logit, b.p("head.b"), 1)?;
        Ok((logit, frame_prob))
    }

    fn forward_graph(
        &self,
        g: &mut Graph,
        b: &mut Bound,
        batch: &Batch,
        targets: Option<&[f64]>,
    ) -> Result<Vars> {
        let n = self.check_batch(batch)?;
        let raw = g.constant(batch.raw.clone());
        let mel = g.constant(batch.mel.clone());
        let deep = self.deep_graph(g, b, raw)?;
        let mel = b.bn(g, mel, "mel.bn")?;
        let h = fuse_graph(g, deep, mel)?;
        let (d, t) = self.trace.hybrid;
        check_shape("hybrid feature", g.shape(h), &[n, d, t])?;
        let (o_att, _) = attention_graph(
            g,
            h,
            b.p("att.wq"),
            b.p("att.wk"),
            b.p("att.wv"),
            self.cfg.attention_scale()?,
        )?;
        let (logit, frame_prob) = self.classify_graph(g, b, o_att)?;
        let clip_prob = g.sigmoid(logit)?;
        let loss = match targets {
            Some(y) => {
                validate_targets(y)?;
                if y.len() != n {
                    return Err(ModelError::Config(format!(
                        "{} targets for a batch of {n}",
                        y.len()
                    )));
                }
                let l_att = g.bce(frame_prob, &frame_targets(y, t))?;
                let l_fin = g.bce(clip_prob, y)?;
                let weighted = g.scale(l_fin, self.cfg.lambda)?;
                let total = g.add(l_att, weighted)?;
                Some((l_att, l_fin, total))
            }
            None => None,
        };
        Ok(Vars {
            logit,
            clip_prob,
            frame_prob,
            loss,
        })
    }

    fn output(&self, g: &Graph, vars: &Vars, n: usize) -> Result<ForwardOutput> {
        let t = self.trace.hybrid.1;
        Ok(ForwardOutput {
            logits: g.value(vars.logit).data().to_vec(),
            scores: g.value(vars.clip_prob).data().to_vec(),
            frame_scores: g.value(vars.frame_prob).clone().reshape(&[n, t])?,
            loss: vars.loss.map(|(a, f, tot)| LossParts {
                l_att: g.value(a).item(),
                l_fin: g.value(f).item(),
                total: g.value(tot).item(),
            }),
        })
    }

    /// Forward pass without touching the stored statistics. Loss parts are
    /// filled in when `targets` (1 = bona fide) are given.
    pub fn forward(
        &self,
        batch: &Batch,
        targets: Option<&[f64]>,
        mode: BnMode,
    ) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let mut b = self.bind(&mut g, false, mode);
        let vars = self.forward_graph(&mut g, &mut b, batch, targets)?;
        self.output(&g, &vars, batch.len())
    }

    /// ReLU masks and max-pool winners of a forward pass at the current
    /// parameters.
    pub fn kink_pattern(&self, batch: &Batch, mode: BnMode) -> Result<KinkPattern> {
        let mut g = Graph::new();
        g.record_pattern();
        let mut b = self.bind(&mut g, false, mode);
        self.forward_graph(&mut g, &mut b, batch, None)?;
        Ok(g.take_pattern().expect("recording was on"))
    }

    /// Loss with every ReLU and max pool forced to follow `pattern`.
    pub fn loss_with_pattern(
        &self,
        batch: &Batch,
        targets: &[f64],
        mode: BnMode,
        pattern: &KinkPattern,
    ) -> Result<LossParts> {
        let mut g = Graph::new();
        g.replay_pattern(pattern.clone());
        let mut b = self.bind(&mut g, false, mode);
        let vars = self.forward_graph(&mut g, &mut b, batch, Some(targets))?;
        Ok(self.output(&g, &vars, batch.len())?.loss.expect("targets given"))
    }

    /// Loss and gradient of the total loss with respect to every parameter.
    pub fn gradients(&self, batch: &Batch, targets: &[f64], mode: BnMode) -> Result<Gradients> {
        let mut g = Graph::new();
        let mut b = self.bind(&mut g, true, mode);
        let vars = self.forward_graph(&mut g, &mut b, batch, Some(targets))?;
        let total = vars.loss.expect("targets given").2;
        g.backward(total)?;
        let out = self.output(&g, &vars, batch.len())?;
        let grads = b
            .vars
            .iter()
            .zip(self.params.values())
            .map(|(&v, t)| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        Ok(Gradients {
            loss: out.loss.expect("targets given"),
            grads,
            stats: b.stats,
        })
    }

    /// Learned raw-frame map `[N, L, T]`.
    pub fn deep_features(&self, batch: &Batch, mode: BnMode) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let mut b = self.bind(&mut g, false, mode);
        let raw = g.constant(batch.raw.clone());
        let out = self.deep_graph(&mut g, &mut b, raw)?;
        Ok(g.value(out).clone())
    }

    /// Normalised mel map concatenated under the learned map, `[N, d, T]`.
    pub fn hybrid_features(&self, batch: &Batch, mode: BnMode) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let mut b = self.bind(&mut g, false, mode);
        let raw = g.constant(batch.raw.clone());
        let mel = g.constant(batch.mel.clone());
        let deep = self.deep_graph(&mut g, &mut b, raw)?;
        let mel = b.bn(&mut g, mel, "mel.bn")?;
        let h = fuse_graph(&mut g, deep, mel)?;
        Ok(g.value(h).clone())
    }

    /// Self-attention with this network's projections.
    pub fn attend(&self, h: &Tensor) -> Result<AttentionOutput> {
        let p = |n: &str| self.params.get(n).expect("registered");
        self_attention(
            h,
            p("att.wq"),
            p("att.wk"),
            p("att.wv"),
            self.cfg.attention_scale()?,
        )
    }

    /// Logits `[N]` and frame probabilities `[N, T]` for an attended map.
    pub fn classify(&self, o_att: &Tensor, mode: BnMode) -> Result<(Vec<f64>, Tensor)> {
        let (d, t) = self.trace.hybrid;
        let n = o_att.shape().first().copied().unwrap_or(0);
        check_shape("classifier input", o_att.shape(), &[n, d, t])?;
        let mut g = Graph::new();
        let mut b = self.bind(&mut g, false, mode);
        let o = g.constant(o_att.clone());
        let (logit, frame) = self.classify_graph(&mut g, &mut b, o)?;
        Ok((
            g.value(logit).data().to_vec(),
            g.value(frame).clone().reshape(&[n, t])?,
        ))
    }

    /// Eval-mode bona fide probability for each clip, in chunks of `batch_size`.
    pub fn score(&self, features: &[Features], batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(features.len());
        for chunk in features.chunks(batch_size.max(1)) {
            let refs: Vec<&Features> = chunk.iter().collect();
            out.extend(self.forward(&Batch::new(&refs)?, None, BnMode::Eval)?.scores);
        }
        Ok(out)
    }

    pub fn score_clip(&self, clip: &AudioClip) -> Result<f64> {
        let f = self.features(clip)?;
        Ok(self.score(std::slice::from_ref(&f), 1)?[0])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.params.named_tensors();
        save_checkpoint(path, named.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(())
    }

    /// Loads a checkpoint written by [`Network::save`] for the same config.
    pub fn load(cfg: ModelConfig, path: &Path) -> Result<Self> {
        let mut net = Network::new(cfg)?;
        net.params.load_named(&load_checkpoint(path)?)?;
        Ok(net)
    }
}

#[cfg(test)]
#[path = "network_tests.rs"]
mod tests;
