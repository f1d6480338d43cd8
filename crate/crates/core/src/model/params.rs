use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, Result};
use crate::tensor::{RunningStats, Tensor};

/// Ordered, named parameter tensors plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
    stats_names: Vec<String>,
    stats: Vec<RunningStats>,
    stats_index: HashMap<String, usize>,
}

impl ParamStore {
    fn empty() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            stats_names: Vec::new(),
            stats: Vec::new(),
            stats_index: HashMap::new(),
        }
    }

    fn add(&mut self, name: String, value: Tensor) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    fn add_bn(&mut self, name: &str, channels: usize) {
        self.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        self.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.stats_index.insert(name.to_string(), self.stats.len());
        self.stats_names.push(name.to_string());
        self.stats.push(RunningStats::new(channels));
    }

    /// Fresh parameters: weights uniform in `±1/sqrt(fan_in)`, batch-norm
    /// scale 1 and shift 0.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
        };
        let mut p = ParamStore::empty();
        let cd = cfg.deep_channels;
        let d = cfg.d_model()?;
        let n_mels = cfg.dsp.n_mels;

        p.add("deep.conv1.w".into(), uniform(&[cd, 1, 7, 7], 49));
        p.add_bn("deep.bn1", cd);
        p.add("deep.conv2.w".into(), uniform(&[cd, cd, 5, 5], cd * 25));
        p.add_bn("deep.bn2", cd);
        p.add("deep.conv3.w".into(), uniform(&[1, cd, 3, 3], cd * 9));
        p.add_bn("deep.bn3", 1);
        p.add_bn("mel.bn", n_mels);

        for name in ["att.wq", "att.wk", "att.wv"] {
            p.add(name.into(), uniform(&[d, d], d));
        }
        p.add("frame_head.u".into(), uniform(&[1, d], d));
        p.add("frame_head.b".into(), uniform(&[1], d));

        let c0 = cfg.base_channels;
        p.add("stem.w".into(), uniform(&[c0, 1, 7, 7], 49));
        p.add("stem.b".into(), uniform(&[c0], 49));

        let widths = cfg.stage_channels();
        let mut c_in = c0;
        for (s, &c_out) in widths.iter().enumerate() {
            for u in 0..2 {
                let pre = format!("block{}.{}", s + 1, u);
                let cin = if u == 0 { c_in } else { c_out };
                p.add_bn(&format!("{pre}.bn1"), cin);
                p.add(format!("{pre}.conv1.w"), uniform(&[c_out, cin, 3, 3], cin * 9));
                p.add_bn(&format!("{pre}.bn2"), c_out);
                p.add(format!("{pre}.conv2.w"), uniform(&[c_out, c_out, 3, 3], c_out * 9));
                p.add(format!("{pre}.conv2.b"), uniform(&[c_out], c_out * 9));
                if u == 0 && s > 0 {
                    p.add(format!("{pre}.proj.w"), uniform(&[c_out, cin, 1, 1], cin));
                }
            }
            c_in = c_out;
        }
        p.add("head.w".into(), uniform(&[c_in, 1], c_in));
        p.add("head.b".into(), uniform(&[1], c_in));
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    pub fn stats_position(&self, name: &str) -> Option<usize> {
        self.stats_index.get(name).copied()
    }

    pub fn stats_names(&self) -> &[String] {
        &self.stats_names
    }

    /// Every tensor to persist: parameters, then running statistics as
    /// `<bn>.running_mean` / `<bn>.running_var`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect();
        for (name, s) in self.stats_names.iter().zip(&self.stats) {
            let c = s.mean.len();
            out.push((
                format!("{name}.running_mean"),
                Tensor::new(&[c], s.mean.clone()).expect("length matches"),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::new(&[c], s.var.clone()).expect("length matches"),
            ));
        }
        out
    }

    /// Overwrites every parameter and statistic from `tensors`; names and
    /// shapes must match exactly.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = lookup
                .get(name)
                .ok_or_else(|| ModelError::Param(name.into(), "missing from checkpoint".into()))?;
            if t.shape() != shape {
                return Err(ModelError::Param(
                    name.into(),
                    format!("shape {:?}, model expects {:?}", t.shape(), shape),
                ));
            }
            Ok((*t).clone())
        };
        let mut values = Vec::with_capacity(self.values.len());
        for (name, v) in self.names.iter().zip(&self.values) {
            values.push(fetch(name, v.shape())?);
        }
        let mut stats = self.stats.clone();
        for (name, s) in self.stats_names.iter().zip(stats.iter_mut()) {
            let c = [s.mean.len()];
            s.mean = fetch(&format!("{name}.running_mean"), &c)?.into_data();
            s.var = fetch(&format!("{name}.running_var"), &c)?.into_data();
        }
        let expected = self.names.len() + 2 * self.stats_names.len();
        if tensors.len() != expected {
            return Err(ModelError::Param(
                "<checkpoint>".into(),
                format!("{} tensors, model has {expected}", tensors.len()),
            ));
        }
        self.values = values;
        self.stats = stats;
        Ok(())
    }
}
