//! Small fully connected scorer: ReLU hidden layers, sigmoid outputs, trained
//! with plain minibatch SGD on mean per-item binary cross-entropy.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
}

impl Layer {
    fn forward(&self, x: &[f32], out: &mut Vec<f32>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let z: f32 = row.iter().zip(x).map(|(w, x)| w * x).sum::<f32>() + self.biases[o];
            out.push(z);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    /// `sizes` lists every layer width including input and output, e.g. `[39, 90, 550, 90, 84, 18]`.
    pub fn new(sizes: &[usize], seed: u64) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output widths");
        let mut rng = rng::seeded(seed);
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, pair)| {
                let (inputs, outputs) = (pair[0], pair[1]);
                // He-uniform for ReLU layers, Glorot-uniform for the sigmoid head.
                let bound = if k == last {
                    (6.0 / (inputs + outputs) as f32).sqrt()
                } else {
                    (6.0 / inputs as f32).sqrt()
                };
                let weights = (0..inputs * outputs)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Layer {
                    inputs,
                    outputs,
                    weights,
                    biases: vec![0.0; outputs],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Option<Self> {
        let ok = !layers.is_empty()
            && layers.windows(2).all(|p| p[0].outputs == p[1].inputs)
            && layers.iter().all(|l| {
                l.weights.len() == l.inputs * l.outputs && l.biases.len() == l.outputs
            });
        ok.then_some(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_len(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// All weights then biases, layer by layer.
    pub fn flat_parameters(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    /// Output logits (pre-sigmoid).
    pub fn logits(&self, x: &[f32]) -> Vec<f32> {
        let mut a = x.to_vec();
        let mut z = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            layer.forward(&a, &mut z);
            if k + 1 < self.layers.len() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut a, &mut z);
        }
        a
    }

    pub fn predict(&self, x: &[f32]) -> Vec<f32> {
        self.logits(x).into_iter().map(sigmoid).collect()
    }

    /// Runs SGD over `(features, labels)` pairs and returns the mean training
    /// loss of each epoch (accumulated during that epoch's updates).
    pub fn train(
        &mut self,
        data: &[(Vec<f32>, Vec<f32>)],
        epochs: usize,
        learning_rate: f32,
        batch_size: usize,
        seed: u64,
    ) -> Vec<f64> {
        let mut rng = rng::seeded(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut grads: Vec<Layer> = self.layers.iter().map(zeroed_like).collect();
        let mut scratch = Scratch::new(&self.layers);
        let batch_size = batch_size.max(1);
        let mut losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0f64;
            for batch in order.chunks(batch_size) {
                grads.iter_mut().for_each(clear);
                for &i in batch {
                    let (x, y) = &data[i];
                    epoch_loss += self.accumulate(x, y, &mut grads, &mut scratch);
                }
                let step = learning_rate / batch.len() as f32;
                for (layer, g) in self.layers.iter_mut().zip(&grads) {
                    layer.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= step * d);
                    layer.biases.iter_mut().zip(&g.biases).for_each(|(b, d)| *b -= step * d);
                }
            }
            let denom = (data.len() * self.output_len()).max(1) as f64;
            losses.push(epoch_loss / denom);
        }
        losses
    }

    /// Mean per-item BCE over a dataset without updating parameters.
    pub fn mean_loss(&self, data: &[(Vec<f32>, Vec<f32>)]) -> f64 {
        let total: f64 = data
            .iter()
            .map(|(x, y)| {
                self.logits(x)
                    .iter()
                    .zip(y)
                    .map(|(&z, &t)| f64::from(bce_with_logit(z, t)))
                    .sum::<f64>()
            })
            .sum();
        total / (data.len() * self.output_len()).max(1) as f64
    }

    /// Forward + backward for one sample; adds gradients, returns summed loss.
    fn accumulate(&self, x: &[f32], y: &[f32], grads: &mut [Layer], s: &mut Scratch) -> f64 {
        let depth = self.layers.len();
        s.acts[0].clear();
        s.acts[0].extend_from_slice(x);
        for k in 0..depth {
            let (before, after) = s.acts.split_at_mut(k + 1);
            self.layers[k].forward(&before[k], &mut after[0]);
            if k + 1 < depth {
                after[0].iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        let out = &s.acts[depth];
        let mut loss = 0.0f64;
        s.delta.clear();
        for (&z, &t) in out.iter().zip(y) {
            loss += f64::from(bce_with_logit(z, t));
            s.delta.push(sigmoid(z) - t);
        }
        for k in (0..depth).rev() {
            let layer = &self.layers[k];
            let input = &s.acts[k];
            let g = &mut grads[k];
            for o in 0..layer.outputs {
                let d = s.delta[o];
                if d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(gw, a)| *gw += d * a);
            }
            if k == 0 {
                break;
            }
            s.next_delta.clear();
            s.next_delta.resize(layer.inputs, 0.0);
            for o in 0..layer.outputs {
                let d = s.delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                s.next_delta.iter_mut().zip(row).for_each(|(nd, w)| *nd += d * w);
            }
            // ReLU derivative on the hidden activation feeding this layer.
            for (nd, a) in s.next_delta.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *nd = 0.0;
                }
            }
            std::mem::swap(&mut s.delta, &mut s.next_delta);
        }
        loss
    }
}

struct Scratch {
    acts: Vec<Vec<f32>>,
    delta: Vec<f32>,
    next_delta: Vec<f32>,
}

impl Scratch {
    fn new(layers: &[Layer]) -> Self {
        Self {
            acts: vec![Vec::new(); layers.len() + 1],
            delta: Vec::new(),
            next_delta: Vec::new(),
        }
    }
}

fn zeroed_like(l: &Layer) -> Layer {
    Layer {
        inputs: l.inputs,
        outputs: l.outputs,
        weights: vec![0.0; l.weights.len()],
        biases: vec![0.0; l.biases.len()],
    }
}

fn clear(l: &mut Layer) {
    l.weights.iter_mut().for_each(|w| *w = 0.0);
    l.biases.iter_mut().for_each(|b| *b = 0.0);
}

pub fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// `-[t ln σ(z) + (1-t) ln(1-σ(z))]`, evaluated without overflow.
pub fn bce_with_logit(z: f32, t: f32) -> f32 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}
