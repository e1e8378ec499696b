use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::graph::BatchStats;
use super::{Float, Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors of one network. Non-trainable entries hold
/// running statistics.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
}

impl<T: Float> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), trainable: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), tensor, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), tensor, false)
    }

    fn push(&mut self, name: String, tensor: Tensor<T>, trainable: bool) -> ParamId {
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Count of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(t, _)| t.len())
            .sum()
    }

    /// Sum of squares of all trainable values.
    pub fn l2_norm_sq(&self) -> f64 {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(t, _)| t.sum_sq().as_f64())
            .sum()
    }

    /// Place every entry on the graph. Trainable entries become variables
    /// when `trainable` is set; everything else is a constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .zip(&self.trainable)
                .map(|(t, &tr)| {
                    if trainable && tr {
                        g.variable(t.clone())
                    } else {
                        g.input(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// Gradients of the trainable entries after `g.backward`, zero-filled
    /// where nothing flowed.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .zip(&bound.0)
            .map(|((t, &tr), &id)| {
                tr.then(|| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            })
            .collect()
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            trainable: self.trainable.clone(),
        }
    }

    /// Replace tensor values by name. Every name must exist with the same
    /// shape.
    pub fn load_named(&mut self, entries: &[(String, Tensor<T>)]) -> Result<(), String> {
        if entries.len() != self.len() {
            return Err(format!("expected {} tensors, found {}", self.len(), entries.len()));
        }
        for (name, t) in entries {
            let id = self.find(name).ok_or_else(|| format!("unknown tensor `{name}`"))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[id.0].shape()
                ));
            }
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<NodeId>);

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.0[id.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` scaled by `sqrt(6)/sqrt(2)`, i.e. the
    /// usual default for convolutions followed by ReLU-like activations.
    KaimingUniform,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Xavier normal scaled by `gain`.
    XavierNormal(f64),
}

fn init_tensor<T: Float>(shape: &[usize], fan_in: usize, fan_out: usize, init: Init, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::KaimingUniform => {
            let bound = 1.0 / (fan_in as f64).sqrt() * 3f64.sqrt();
            let u = Uniform::new_inclusive(-bound, bound);
            (0..n).map(|_| T::of(u.sample(rng))).collect()
        }
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| T::of(d.sample(rng))).collect()
        }
        Init::XavierNormal(gain) => {
            let std = gain * (2.0 / (fan_in + fan_out) as f64).sqrt();
            let d = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| T::of(d.sample(rng))).collect()
        }
    };
    Tensor::from_vec(shape, data)
}

/// Square-kernel convolution with "same"-style padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = ps.add(
            format!("{name}.weight"),
            init_tensor(&[cout, cin, k, k], fan_in, cout * k * k, init, rng),
        );
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, stride, pad: k / 2 }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> NodeId {
        g.conv2d(x, p.node(self.weight), self.bias.map(|b| p.node(b)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Float>(ps: &mut ParamSet<T>, name: &str, din: usize, dout: usize, init: Init, rng: &mut impl Rng) -> Self {
        let weight = ps.add(format!("{name}.weight"), init_tensor(&[dout, din], din, dout, init, rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { weight, bias }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> NodeId {
        g.linear(x, p.node(self.weight), p.node(self.bias))
    }
}

/// Instance normalisation without affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct InstanceNorm;

impl InstanceNorm {
    pub const EPS: f64 = 1e-5;

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: NodeId) -> NodeId {
        g.normalize(x, None, None, true, Self::EPS, None)
    }
}

/// Batch normalisation with learnable affine and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new<T: Float>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: ps.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: ps.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, ps: &ParamSet<T>, x: NodeId, mode: Mode) -> NodeId {
        match mode {
            Mode::Train => g.normalize(
                x,
                Some(p.node(self.gamma)),
                Some(p.node(self.beta)),
                false,
                Self::EPS,
                Some(self.running_mean.index()),
            ),
            Mode::Eval => {
                let gamma = ps.get(self.gamma).data();
                let beta = ps.get(self.beta).data();
                let mean = ps.get(self.running_mean).data();
                let var = ps.get(self.running_var).data();
                let scale: Vec<T> = gamma
                    .iter()
                    .zip(var)
                    .map(|(&gm, &v)| gm / (v + T::of(Self::EPS)).sqrt())
                    .collect();
                let shift: Vec<T> = beta
                    .iter()
                    .zip(mean)
                    .zip(&scale)
                    .map(|((&b, &m), &s)| b - m * s)
                    .collect();
                g.channel_affine(x, scale, &shift)
            }
        }
    }
}

/// Fold batch statistics recorded by train-mode [`BatchNorm`] layers into
/// their running estimates (unbiased variance, exponential averaging).
pub fn update_running_stats<T: Float>(ps: &mut ParamSet<T>, g: &mut Graph<T>) {
    let m = T::of(BatchNorm::MOMENTUM);
    for BatchStats { tag, mean, var, count } in g.take_batch_stats() {
        let mean_id = ParamId(tag);
        // running_var is registered right after running_mean
        let var_id = ParamId(tag + 1);
        let count = count as f64;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for (r, &b) in ps.get_mut(mean_id).data_mut().iter_mut().zip(&mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in ps.get_mut(var_id).data_mut().iter_mut().zip(&var) {
            *r = (T::one() - m) * *r + m * b * T::of(unbias);
        }
    }
}
