//! Minibatch SGD with momentum and L2 weight decay, stopping once the
//! eval-mode training accuracy reaches the target.

use crate::data::Dataset;
use crate::measures::accuracy;
use crate::model::{Conv2d, Dense, Layer, ModelSpec, Padding};
use crate::nn::grad_wrt_weights;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ZooError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    GlobalAvgPool,
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub kernel: usize,
    /// Max-pool window and stride after the conv stack.
    pub pool: usize,
    pub head: Head,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            kernel: 3,
            pool: 2,
            head: Head::GlobalAvgPool,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epoch_cap: usize,
    pub target_accuracy: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            epoch_cap: 200,
            target_accuracy: 0.99,
        }
    }
}

/// `(conv k x k, relu) x depth`, max-pool, optional dropout, head, dense.
/// Weights are He-normal, biases zero.
pub fn build_model(
    arch: &ArchSpec,
    input_shape: &[usize],
    classes: usize,
    width: usize,
    depth: usize,
    dropout: f64,
    seed: u64,
) -> Result<ModelSpec, ZooError> {
    let mut layers = Vec::new();
    let mut cin = input_shape[2];
    for _ in 0..depth {
        layers.push(Layer::Conv2d(Conv2d {
            kernel: Tensor::zeros(vec![arch.kernel, arch.kernel, cin, width]),
            bias: Tensor::zeros(vec![width]),
            stride: 1,
            padding: Padding::Same,
        }));
        layers.push(Layer::Relu);
        cin = width;
    }
    layers.push(Layer::MaxPool {
        window: arch.pool,
        stride: arch.pool,
    });
    if dropout > 0.0 {
        layers.push(Layer::Dropout { rate: dropout as f32 });
    }
    let (h, w) = (input_shape[0] / arch.pool, input_shape[1] / arch.pool);
    let features = match arch.head {
        Head::GlobalAvgPool => {
            layers.push(Layer::GlobalAvgPool);
            cin
        }
        Head::Flatten => {
            layers.push(Layer::Flatten);
            h * w * cin
        }
    };
    layers.push(Layer::Dense(Dense {
        weight: Tensor::zeros(vec![classes, features]),
        bias: Tensor::zeros(vec![classes]),
    }));
    let mut model = ModelSpec::new(input_shape.to_vec(), classes, layers)?;
    for (k, weight, _) in model.param_tensors_mut() {
        let s = weight.shape();
        let fan_in = if s.len() == 4 { s[0] * s[1] * s[2] } else { s[1] };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive fan-in");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        for v in weight.data_mut() {
            *v = normal.sample(&mut rng) as f32;
        }
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub train_accuracy: f64,
    pub diverged: bool,
}

const SHUFFLE_STREAM: u64 = 1 << 32;

/// Trains in place. On divergence the weights of the last finished epoch
/// are restored.
pub fn train(
    model: &mut ModelSpec,
    data: &Dataset,
    spec: &TrainSpec,
    batch_size: usize,
    weight_decay: f64,
    seed: u64,
) -> Result<TrainOutcome, ZooError> {
    let n = data.len();
    let mut velocity: Vec<(Vec<f64>, Vec<f64>)> = model
        .param_tensors_mut()
        .map(|(_, w, b)| (vec![0.0; w.len()], vec![0.0; b.len()]))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    let mut last_loss = None;
    let mut acc = accuracy(model, data)?;
    let mut epochs = 0;
    while epochs < spec.epoch_cap && acc < spec.target_accuracy {
        let snapshot = model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SHUFFLE_STREAM + epochs as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut diverged = false;
        for chunk in order.chunks(batch_size) {
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            let batch = data.batch(&idx);
            let step_seed = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            step += 1;
            let grads = match grad_wrt_weights(model, &batch, step_seed) {
                Ok(g) if g.loss.is_finite() => g,
                _ => {
                    diverged = true;
                    break;
                }
            };
            loss_sum += grads.loss * idx.len() as f64;
            for ((_, w, b), (g, (vw, vb))) in model
                .param_tensors_mut()
                .zip(grads.layers.iter().zip(velocity.iter_mut()))
            {
                for ((x, &gx), v) in w.data_mut().iter_mut().zip(g.weight.data()).zip(vw.iter_mut()) {
                    *v = spec.momentum * *v + gx as f64 + weight_decay * *x as f64;
                    *x = (*x as f64 - spec.learning_rate * *v) as f32;
                }
                for ((x, &gx), v) in b.data_mut().iter_mut().zip(g.bias.data()).zip(vb.iter_mut()) {
                    *v = spec.momentum * *v + gx as f64;
                    *x = (*x as f64 - spec.learning_rate * *v) as f32;
                }
            }
        }
        if diverged || !model.weights().all(Tensor::is_finite) {
            *model = snapshot;
            return Ok(TrainOutcome {
                epochs,
                final_loss: last_loss,
                train_accuracy: accuracy(model, data)?,
                diverged: true,
            });
        }
        epochs += 1;
        last_loss = Some(loss_sum / n as f64);
        acc = accuracy(model, data)?;
    }
    Ok(TrainOutcome {
        epochs,
        final_loss: last_loss,
        train_accuracy: acc,
        diverged: false,
    })
}
