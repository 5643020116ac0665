//! Tiny time-conditioned denoiser and classifier for desk-scale experiments,
//! with weight persistence in the DBPT container.
//!
//! The denoiser is a dense stack with a sinusoidal time embedding feeding the
//! first hidden layer through its own weight matrix — algebraically the same
//! as appending the embedding to the flattened image and widening the first
//! weight matrix. The classifier is a plain ReLU stack ending in logits.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::io;
use crate::rngtape::RngKey;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

#[derive(Clone, Debug)]
pub struct DenseLayer<T> {
    /// `[in, out]`
    pub weight: Tensor<T>,
    /// `[1, out]`
    pub bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> DenseLayer<T> {
    fn init(key: RngKey, in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = Tensor::from_fn(&[in_dim, out_dim], |i| {
            T::from_f64(std * key.normal_at(i as u64))
        });
        DenseLayer {
            weight,
            bias: Tensor::zeros(&[1, out_dim]),
            activation,
        }
    }

    fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        DenseLayer {
            weight: Tensor::zeros(&[in_dim, out_dim]),
            bias: Tensor::zeros(&[1, out_dim]),
            activation,
        }
    }

    fn apply(&self, g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
        let lin = g.matmul(x, w)?;
        let pre = g.add(lin, b)?;
        activate(g, pre, self.activation)
    }
}

fn activate<T: Scalar>(g: &mut Graph<T>, v: Var, a: Activation) -> Result<Var> {
    match a {
        Activation::Tanh => g.tanh(v),
        Activation::Relu => g.relu(v),
        Activation::Identity => Ok(v),
    }
}

/// Sinusoidal timestep embedding of even dimension `dim`.
pub fn time_embedding<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[1, dim], |i| {
        let pair = i / 2;
        let freq = (10_000f64).powf(-(pair as f64) / half as f64);
        let angle = t as f64 * freq;
        T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Something that predicts the noise content of `x_t` at timestep `t`.
/// Implemented by [`DenoiserNet`] and by test oracles.
pub trait Denoiser<T: Scalar> {
    fn predict(&self, g: &mut Graph<T>, xt: Var, t: usize) -> Result<Var>;
}

/// What the dense stack outputs before the noise prediction is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionKind {
    /// The stack outputs the noise estimate directly.
    Epsilon,
    /// The stack outputs a clean-image estimate; the noise prediction is
    /// formed analytically as `(x_t - sqrt(ab) x0_hat) / sqrt(1 - ab)`.
    /// Keeps the noise estimate full-rank when the hidden width is below the
    /// image dimension.
    X0,
}

/// Dense noise-prediction network with sinusoidal time conditioning.
#[derive(Clone, Debug)]
pub struct DenoiserNet<T> {
    pub input_dim: usize,
    pub hidden: usize,
    pub time_embed_dim: usize,
    pub t_max: usize,
    pub prediction: PredictionKind,
    /// `alpha_bar` table (`t_max + 1` entries) for the X0 parametrization.
    pub alpha_bar: Vec<f64>,
    /// `[time_embed_dim, hidden]`, added into the first pre-activation.
    pub time_weight: Tensor<T>,
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Scalar> DenoiserNet<T> {
    /// Three tanh hidden layers of `hidden` units and a linear output back to
    /// the image dimension.
    pub fn new(input_dim: usize, hidden: usize, time_embed_dim: usize, t_max: usize, seed: u64) -> Self {
        let key = RngKey::new(seed);
        let std = 1.0 / (time_embed_dim as f64).sqrt();
        DenoiserNet {
            input_dim,
            hidden,
            time_embed_dim,
            t_max,
            prediction: PredictionKind::Epsilon,
            alpha_bar: Vec::new(),
            time_weight: Tensor::from_fn(&[time_embed_dim, hidden], |i| {
                T::from_f64(std * key.child(100).normal_at(i as u64))
            }),
            layers: vec![
                DenseLayer::init(key.child(0), input_dim, hidden, Activation::Tanh),
                DenseLayer::init(key.child(1), hidden, hidden, Activation::Tanh),
                DenseLayer::init(key.child(2), hidden, hidden, Activation::Tanh),
                DenseLayer::init(key.child(3), hidden, input_dim, Activation::Identity),
            ],
        }
    }

    /// Same stack, parametrized to predict the clean image.
    pub fn new_x0(
        input_dim: usize,
        hidden: usize,
        time_embed_dim: usize,
        schedule: &crate::diffusion::Schedule<T>,
        seed: u64,
    ) -> Self {
        let mut net = Self::new(input_dim, hidden, time_embed_dim, schedule.t_max(), seed);
        net.prediction = PredictionKind::X0;
        net.alpha_bar = (0..=schedule.t_max())
            .map(|t| schedule.alpha_bar(t).to_f64())
            .collect();
        net
    }

    pub fn zeros(input_dim: usize, hidden: usize, time_embed_dim: usize, t_max: usize) -> Self {
        DenoiserNet {
            input_dim,
            hidden,
            time_embed_dim,
            t_max,
            prediction: PredictionKind::Epsilon,
            alpha_bar: Vec::new(),
            time_weight: Tensor::zeros(&[time_embed_dim, hidden]),
            layers: vec![
                DenseLayer::zeros(input_dim, hidden, Activation::Tanh),
                DenseLayer::zeros(hidden, hidden, Activation::Tanh),
                DenseLayer::zeros(hidden, hidden, Activation::Tanh),
                DenseLayer::zeros(hidden, input_dim, Activation::Identity),
            ],
        }
    }

    /// Parameters in a fixed order: time weight, then each layer's weight and
    /// bias. Persistence, optimizers, and graph registration share it.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.time_weight];
        for l in &self.layers {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.time_weight];
        for l in &mut self.layers {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v
    }

    /// Register every parameter on the graph (in `params()` order).
    pub fn insert_params(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| g.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Forward pass with explicit parameter vars; rows of `xt` may sit at
    /// per-sample timesteps given by `ts` (broadcast when `ts.len() == 1`).
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        xt: Var,
        ts: &[usize],
    ) -> Result<Var> {
        for &t in ts {
            if t < 1 || t > self.t_max {
                return Err(Error::config(format!(
                    "timestep {} outside [1, {}]",
                    t, self.t_max
                )));
            }
        }
        let x2 = ensure_2d(g, xt, self.input_dim)?;
        let emb = if ts.len() == 1 {
            time_embedding::<T>(ts[0], self.time_embed_dim)
        } else {
            let rows: Vec<Tensor<T>> = ts
                .iter()
                .map(|&t| time_embedding::<T>(t, self.time_embed_dim))
                .collect();
            Tensor::stack_rows(&rows)?
        };
        let emb_v = g.constant(emb);
        let (tw, layers) = (params[0], &params[1..]);
        let t_feat = g.matmul(emb_v, tw)?;

        // first layer mixes image and time features before the activation
        let l0 = &self.layers[0];
        let lin = g.matmul(x2, layers[0])?;
        let lin_b = g.add(lin, layers[1])?;
        let pre = g.add(lin_b, t_feat)?;
        let mut h = activate(g, pre, l0.activation)?;
        for (i, l) in self.layers.iter().enumerate().skip(1) {
            h = l.apply(g, h, layers[2 * i], layers[2 * i + 1])?;
        }
        if self.prediction == PredictionKind::X0 {
            // eps_hat = (x_t - sqrt(ab) x0_hat) / sqrt(1 - ab), per row
            let b = g.value(x2).shape()[0];
            let rows = |f: &dyn Fn(f64) -> f64| -> Tensor<T> {
                Tensor::from_fn(&[b, 1], |i| {
                    let t = if ts.len() == 1 { ts[0] } else { ts[i] };
                    T::from_f64(f(self.alpha_bar[t]))
                })
            };
            let sa = g.constant(rows(&|ab| ab.sqrt()));
            let inv_sb = g.constant(rows(&|ab| 1.0 / (1.0 - ab).sqrt()));
            let scaled = g.mul(h, sa)?;
            let num = g.sub(x2, scaled)?;
            h = g.mul(num, inv_sb)?;
        }
        // restore the caller's shape
        let want = g.value(xt).shape().to_vec();
        if g.value(h).shape() != want.as_slice() {
            h = g.reshape(h, &want)?;
        }
        Ok(h)
    }

    /// Batched forward with per-sample timesteps, parameters as constants.
    pub fn forward_batch(&self, g: &mut Graph<T>, xt: Var, ts: &[usize]) -> Result<Var> {
        let params = self.insert_params(g, false);
        self.forward_with(g, &params, xt, ts)
    }
}

impl<T: Scalar> Denoiser<T> for DenoiserNet<T> {
    fn predict(&self, g: &mut Graph<T>, xt: Var, t: usize) -> Result<Var> {
        self.forward_batch(g, xt, &[t])
    }
}

fn ensure_2d<T: Scalar>(g: &mut Graph<T>, v: Var, dim: usize) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    match shape.len() {
        1 => {
            if shape[0] != dim {
                return Err(Error::shape(format!(
                    "input dim {} does not match net dim {}",
                    shape[0], dim
                )));
            }
            g.reshape(v, &[1, dim])
        }
        2 => {
            if shape[1] != dim {
                return Err(Error::shape(format!(
                    "input dim {} does not match net dim {}",
                    shape[1], dim
                )));
            }
            Ok(v)
        }
        _ => Err(Error::shape(format!("expected 1-D or 2-D input, got {:?}", shape))),
    }
}

/// Dense classifier ending in class logits.
#[derive(Clone, Debug)]
pub struct ClassifierNet<T> {
    pub input_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Scalar> ClassifierNet<T> {
    /// Two ReLU hidden layers of `hidden` units.
    pub fn new(input_dim: usize, hidden: usize, num_classes: usize, seed: u64) -> Self {
        let key = RngKey::new(seed);
        ClassifierNet {
            input_dim,
            hidden,
            num_classes,
            layers: vec![
                DenseLayer::init(key.child(0), input_dim, hidden, Activation::Relu),
                DenseLayer::init(key.child(1), hidden, hidden, Activation::Relu),
                DenseLayer::init(key.child(2), hidden, num_classes, Activation::Identity),
            ],
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize, num_classes: usize) -> Self {
        ClassifierNet {
            input_dim,
            hidden,
            num_classes,
            layers: vec![
                DenseLayer::zeros(input_dim, hidden, Activation::Relu),
                DenseLayer::zeros(hidden, hidden, Activation::Relu),
                DenseLayer::zeros(hidden, num_classes, Activation::Identity),
            ],
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v
    }

    pub fn insert_params(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| g.leaf(p.clone(), requires_grad))
            .collect()
    }

    pub fn forward_with(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        let mut h = ensure_2d(g, x, self.input_dim)?;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(g, h, params[2 * i], params[2 * i + 1])?;
        }
        Ok(h)
    }

    /// Logits `[batch, classes]` with parameters as constants.
    pub fn logits(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let params = self.insert_params(g, false);
        self.forward_with(g, &params, x)
    }
}

// ---- persistence ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct WeightManifest {
    kind: String,
    dtype: String,
    input_dim: usize,
    hidden: usize,
    num_classes: usize,
    time_embed_dim: usize,
    t_max: usize,
    #[serde(default = "default_prediction")]
    prediction: PredictionKind,
    #[serde(default)]
    alpha_bar: Vec<f64>,
    activations: Vec<Activation>,
    tensors: Vec<String>,
}

fn default_prediction() -> PredictionKind {
    PredictionKind::Epsilon
}

fn dtype_name(code: u8) -> &'static str {
    if code == 0 {
        "f32"
    } else {
        "f64"
    }
}

fn save_net<T: Scalar>(path: &Path, manifest: &WeightManifest, tensors: &[&Tensor<T>]) -> Result<()> {
    let header = serde_json::to_string(manifest).map_err(|e| Error::format(e.to_string()))?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    io::write_container(&mut w, &header, tensors)?;
    w.flush()?;
    Ok(())
}

fn load_manifest(r: &mut impl std::io::Read) -> Result<WeightManifest> {
    serde_json::from_str(&io::read_container_header(r)?)
        .map_err(|e| Error::format(format!("bad weight manifest: {e}")))
}

fn read_params<T: Scalar>(
    r: &mut impl std::io::Read,
    n: usize,
    stored_dtype: &str,
    allow_cast: bool,
) -> Result<Vec<Tensor<T>>> {
    let want = dtype_name(T::DTYPE);
    if stored_dtype != want && !allow_cast {
        return Err(Error::format(format!(
            "weights stored as {stored_dtype} but {want} requested; pass allow_cast to convert"
        )));
    }
    (0..n)
        .map(|_| io::read_tensor_any_as::<T, _>(r).map(|(_, t)| t))
        .collect()
}

pub fn save_denoiser<T: Scalar>(net: &DenoiserNet<T>, path: &Path) -> Result<()> {
    let manifest = WeightManifest {
        kind: "denoiser".into(),
        dtype: dtype_name(T::DTYPE).into(),
        input_dim: net.input_dim,
        hidden: net.hidden,
        num_classes: 0,
        time_embed_dim: net.time_embed_dim,
        t_max: net.t_max,
        prediction: net.prediction,
        alpha_bar: net.alpha_bar.clone(),
        activations: net.layers.iter().map(|l| l.activation).collect(),
        tensors: std::iter::once("time_weight".to_string())
            .chain((0..net.layers.len()).flat_map(|i| {
                [format!("layer{i}.weight"), format!("layer{i}.bias")]
            }))
            .collect(),
    };
    save_net(path, &manifest, &net.params())
}

pub fn load_denoiser<T: Scalar>(path: &Path, allow_cast: bool) -> Result<DenoiserNet<T>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let m = load_manifest(&mut r)?;
    if m.kind != "denoiser" {
        return Err(Error::format(format!("expected denoiser weights, got {}", m.kind)));
    }
    let tensors = read_params::<T>(&mut r, m.tensors.len(), &m.dtype, allow_cast)?;
    let mut net = DenoiserNet::zeros(m.input_dim, m.hidden, m.time_embed_dim, m.t_max);
    net.prediction = m.prediction;
    net.alpha_bar = m.alpha_bar;
    assign_params(net.params_mut(), tensors)?;
    for (l, a) in net.layers.iter_mut().zip(m.activations) {
        l.activation = a;
    }
    Ok(net)
}

pub fn save_classifier<T: Scalar>(net: &ClassifierNet<T>, path: &Path) -> Result<()> {
    let manifest = WeightManifest {
        kind: "classifier".into(),
        dtype: dtype_name(T::DTYPE).into(),
        input_dim: net.input_dim,
        hidden: net.hidden,
        num_classes: net.num_classes,
        time_embed_dim: 0,
        t_max: 0,
        prediction: PredictionKind::Epsilon,
        alpha_bar: Vec::new(),
        activations: net.layers.iter().map(|l| l.activation).collect(),
        tensors: (0..net.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect(),
    };
    save_net(path, &manifest, &net.params())
}

pub fn load_classifier<T: Scalar>(path: &Path, allow_cast: bool) -> Result<ClassifierNet<T>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let m = load_manifest(&mut r)?;
    if m.kind != "classifier" {
        return Err(Error::format(format!(
            "expected classifier weights, got {}",
            m.kind
        )));
    }
    let tensors = read_params::<T>(&mut r, m.tensors.len(), &m.dtype, allow_cast)?;
    let mut net = ClassifierNet::zeros(m.input_dim, m.hidden, m.num_classes);
    assign_params(net.params_mut(), tensors)?;
    for (l, a) in net.layers.iter_mut().zip(m.activations) {
        l.activation = a;
    }
    Ok(net)
}

fn assign_params<T: Scalar>(slots: Vec<&mut Tensor<T>>, values: Vec<Tensor<T>>) -> Result<()> {
    if slots.len() != values.len() {
        return Err(Error::format(format!(
            "weight file holds {} tensors, net needs {}",
            values.len(),
            slots.len()
        )));
    }
    for (slot, value) in slots.into_iter().zip(values) {
        if slot.shape() != value.shape() {
            return Err(Error::format(format!(
                "weight shape {:?} does not match net shape {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
    }
    Ok(())
}
