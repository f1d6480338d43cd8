use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Batch, Network, Result};
use crate::tensor::BnMode;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradCheck {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    /// `(tensor, flat index)` of the largest error.
    pub worst: (String, usize),
}

impl ModelGradCheck {
    pub fn coords_checked(&self) -> usize {
        self.tensors.iter().map(|t| t.coords).sum()
    }
}

/// Central differences of the total loss against backpropagation for
/// `per_tensor` random coordinates of every parameter tensor (all of them for
/// tensors that small).
///
/// ReLU masks and max-pool winners are held at their values for the
/// unperturbed parameters, so both evaluations stay on the same smooth piece.
/// The error of a coordinate is `|numeric - analytic| / max(1, |numeric|)`.
pub fn check_model_gradients(
    net: &Network,
    batch: &Batch,
    targets: &[f64],
    h: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<ModelGradCheck> {
    let mode = BnMode::Train;
    let analytic = net.gradients(batch, targets, mode)?;
    let pattern = net.kink_pattern(batch, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = net.clone();
    let mut tensors = Vec::new();
    let mut worst = (String::new(), 0);
    let mut max_rel_error: f64 = 0.0;
    for (p, name) in net.params().names().iter().enumerate() {
        let len = net.params().values()[p].numel();
        let coords: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        let mut tensor_max: f64 = 0.0;
        for &i in &coords {
            let original = net.params().values()[p].data()[i];
            let mut eval = |x: f64| -> Result<f64> {
                probe.params_mut().values_mut()[p].data_mut()[i] = x;
                Ok(probe.loss_with_pattern(batch, targets, mode, &pattern)?.total)
            };
            let numeric = (eval(original + h)? - eval(original - h)?) / (2.0 * h);
            eval(original)?;
            let err = (numeric - analytic.grads[p][i]).abs() / numeric.abs().max(1.0);
            if err > max_rel_error {
                max_rel_error = err;
                worst = (name.clone(), i);
            }
            tensor_max = tensor_max.max(err);
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            coords: coords.len(),
            max_rel_error: tensor_max,
        });
    }
    Ok(ModelGradCheck {
        tensors,
        max_rel_error,
        worst,
    })
}
