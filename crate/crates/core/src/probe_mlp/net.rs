//! Feed-forward probe networks, the decoupled-decay Adam optimizer and the
//! training loop.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Metrics, MlpError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// 1 (N1) or 2 (N2)
    pub layers: u8,
    /// ignored when `layers == 1`
    pub hidden_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            layers: 2,
            hidden_size: 100,
            batch_size: 32,
            learning_rate: 0.01,
            weight_decay: 0.01,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<(), MlpError> {
        let bad = |what: &str| Err(MlpError::Config(what.to_string()));
        if !(1..=2).contains(&self.layers) {
            return bad("layers must be 1 or 2");
        }
        if self.layers == 2 && self.hidden_size == 0 {
            return bad("hidden_size must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        if self.layers == 1 {
            format!("N1(batch={}, lr={})", self.batch_size, self.learning_rate)
        } else {
            format!("N2(batch={}, lr={}, hidden={})", self.batch_size, self.learning_rate, self.hidden_size)
        }
    }
}

/// Affine layer, `weight` is out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn xavier(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (n_in + n_out) as f64).sqrt();
        Dense {
            weight: Array2::from_shape_fn((n_out, n_in), |_| rng.random_range(-bound..=bound)),
            bias: Array1::zeros(n_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Dense { weight: Array2::zeros(self.weight.raw_dim()), bias: Array1::zeros(self.bias.len()) }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy computed from a logit.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Sigmoid after every layer; the final sigmoid gives P(class 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(n_inputs: usize, config: &MlpConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = if config.layers == 1 {
            vec![Dense::xavier(n_inputs, 1, &mut rng)]
        } else {
            vec![
                Dense::xavier(n_inputs, config.hidden_size, &mut rng),
                Dense::xavier(config.hidden_size, 1, &mut rng),
            ]
        };
        Mlp { layers }
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Layer inputs (the batch, then each hidden activation) and output logits.
    fn forward_cached(&self, x: ArrayView2<f64>) -> (Vec<Array2<f64>>, Array1<f64>) {
        let mut inputs = vec![x.to_owned()];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = inputs[i].dot(&layer.weight.t());
            z += &layer.bias;
            if i == last {
                return (inputs, z.column(0).to_owned());
            }
            z.mapv_inplace(sigmoid);
            inputs.push(z);
        }
        unreachable!("network has at least one layer")
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.forward_cached(x).1
    }

    /// P(class 1) per row.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.logits(x).mapv(sigmoid)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<u8> {
        self.logits(x).iter().map(|z| u8::from(*z >= 0.0)).collect()
    }

    pub fn loss(&self, x: ArrayView2<f64>, y: &[f64]) -> f64 {
        let z = self.logits(x);
        z.iter().zip(y).map(|(z, y)| bce_with_logit(*z, *y)).sum::<f64>() / y.len() as f64
    }

    /// Mean loss over the batch and its gradient.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>, y: &[f64]) -> (f64, Vec<Dense>) {
        let (inputs, z) = self.forward_cached(x);
        let n = y.len() as f64;
        let loss = z.iter().zip(y).map(|(z, y)| bce_with_logit(*z, *y)).sum::<f64>() / n;
        let mut delta: Array2<f64> = Array2::from_shape_fn((y.len(), 1), |(i, _)| (sigmoid(z[i]) - y[i]) / n);
        let mut grads: Vec<Dense> = self.layers.iter().map(Dense::zeros_like).collect();
        for i in (0..self.layers.len()).rev() {
            grads[i].weight = delta.t().dot(&inputs[i]);
            grads[i].bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weight);
                back.zip_mut_with(&inputs[i], |d, h| *d *= h * (1.0 - h));
                delta = back;
            }
        }
        (loss, grads)
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }
}

pub(crate) fn tensors(layers: &[Dense]) -> Vec<&[f64]> {
    layers
        .iter()
        .flat_map(|l| [l.weight.as_slice().expect("standard layout"), l.bias.as_slice().expect("standard layout")])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWParams {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamWParams { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// Adam with weight decay applied to the parameters directly, not through
/// the gradient.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub params: AdamWParams,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: AdamWParams, sizes: &[usize]) -> Self {
        AdamW {
            params,
            step: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn step(&mut self, weights: &mut [&mut [f64]], grads: &[&[f64]]) {
        let p = self.params;
        self.step += 1;
        let bc1 = 1.0 - p.beta1.powi(self.step);
        let bc2 = 1.0 - p.beta2.powi(self.step);
        for (k, (w, g)) in weights.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..w.len() {
                w[i] *= 1.0 - p.learning_rate * p.weight_decay;
                m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
                v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= p.learning_rate * m_hat / (v_hat.sqrt() + p.eps);
            }
        }
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: MlpConfig,
    /// 1-based
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub dev_f1_class1: f64,
    pub loss_curve: Vec<f64>,
    pub dev_f1_curve: Vec<f64>,
    pub test: Option<Metrics>,
}

/// Trains from scratch, keeping the parameters of the epoch with the best
/// dev F1 of class 1.
pub fn train(config: &MlpConfig, train: &Dataset, dev: &Dataset) -> Result<(Mlp, TrainReport), MlpError> {
    config.validate()?;
    for class in [0u8, 1] {
        if !train.y.contains(&class) {
            return Err(MlpError::MissingClass { split: "train", class });
        }
    }
    if dev.is_empty() {
        return Err(MlpError::EmptySplit("dev"));
    }
    if train.width() != dev.width() {
        return Err(MlpError::Width { expected: train.width(), got: dev.width() });
    }

    let mut model = Mlp::new(train.width(), config);
    let sizes: Vec<usize> = tensors(&model.layers).iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(AdamWParams::new(config.learning_rate, config.weight_decay), &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let y: Vec<f64> = train.y.iter().map(|&l| f64::from(l)).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = (f64::NEG_INFINITY, 0usize, model.clone());
    let mut report = TrainReport {
        config: config.clone(),
        best_epoch: 0,
        epochs_run: 0,
        dev_f1_class1: 0.0,
        loss_curve: Vec::new(),
        dev_f1_curve: Vec::new(),
        test: None,
    };
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xb = train.x.select(Axis(0), batch);
            let yb: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            let (loss, grads) = model.loss_and_grad(xb.view(), &yb);
            if !loss.is_finite() {
                return Err(MlpError::Diverged { epoch, config: config.name() });
            }
            total += loss * batch.len() as f64;
            opt.step(&mut model.tensors_mut(), &tensors(&grads));
        }
        report.loss_curve.push(total / train.len() as f64);
        report.epochs_run = epoch;

        let f1 = super::confusion(&model.predict(dev.x.view()), &dev.y)?.f1(1);
        report.dev_f1_curve.push(f1);
        if f1 > best.0 {
            best = (f1, epoch, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    report.best_epoch = best.1;
    report.dev_f1_class1 = best.0;
    Ok((best.2, report))
}
