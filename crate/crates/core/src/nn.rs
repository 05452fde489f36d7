//! Small dense networks with hand-written backpropagation and Adam.
//!
//! Parameters live in one flat buffer so optimizers and checkpoints can treat
//! a network as a plain `&[f64]`. Each layer stores its weights input-major
//! (`w[i * out + o]`), which lets sparse one-hot inputs touch only the rows
//! of the active inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Self::Relu),
            "leaky_relu" => Ok(Self::LeakyRelu),
            "tanh" => Ok(Self::Tanh),
            "softplus" => Ok(Self::Softplus),
            other => Err(Error::Invalid(format!("unknown activation {other:?}"))),
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Relu => x.max(0.0),
            Self::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    0.01 * x
                }
            }
            Self::Tanh => x.tanh(),
            Self::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Self::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::LeakyRelu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.01
                }
            }
            Self::Tanh => 1.0 - post * post,
            Self::Softplus => 1.0 / (1.0 + (-pre).exp()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    dims: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    #[serde(skip)]
    generation: u64,
}

#[derive(Clone, Debug)]
enum TapeInput {
    Dense(Vec<f64>),
    OneHot(Vec<usize>),
}

/// Everything a backward pass needs from the matching forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    input: TapeInput,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Post-activations of each hidden layer.
    post: Vec<Vec<f64>>,
    generation: u64,
}

impl DenseNet {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims, activation)?;
        let mut offset = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out + fan_out] {
                *p = rng.gen_range(-bound..bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Invalid(format!("bad layer dims {dims:?}")));
        }
        let n: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self { dims: dims.to_vec(), activation, params: vec![0.0; n], generation: 0 })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    /// `(weights, biases)` of layer `l`.
    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let offset: usize = self.dims.windows(2).take(l).map(|w| w[0] * w[1] + w[1]).sum();
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let w = &self.params[offset..offset + i * o];
        let b = &self.params[offset + i * o..offset + i * o + o];
        (w, b)
    }

    fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim(), got: input.len() });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let (w, b) = self.layer(0);
        let mut z = b.to_vec();
        let out = self.dims[1];
        for (i, &x) in input.iter().enumerate() {
            if x != 0.0 {
                axpy(x, &w[i * out..(i + 1) * out], &mut z);
            }
        }
        Ok(self.finish(z, TapeInput::Dense(input.to_vec())))
    }

    /// Forward pass for a binary input given by the indices of its ones.
    pub fn forward_onehot(&self, active: &[usize]) -> Result<(Vec<f64>, Tape)> {
        let out = self.dims[1];
        let (w, b) = self.layer(0);
        let mut z = b.to_vec();
        for &i in active {
            if i >= self.input_dim() {
                return Err(Error::Dimension { expected: self.input_dim(), got: i + 1 });
            }
            axpy(1.0, &w[i * out..(i + 1) * out], &mut z);
        }
        Ok(self.finish(z, TapeInput::OneHot(active.to_vec())))
    }

    /// First output of [`DenseNet::forward_onehot`] without recording a tape.
    pub fn value_onehot(&self, active: &[usize]) -> Result<f64> {
        let out = self.dims[1];
        let (w, b) = self.layer(0);
        let mut z = b.to_vec();
        for &i in active {
            if i >= self.input_dim() {
                return Err(Error::Dimension { expected: self.input_dim(), got: i + 1 });
            }
            axpy(1.0, &w[i * out..(i + 1) * out], &mut z);
        }
        for l in 1..self.n_layers() {
            z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            let (w, b) = self.layer(l);
            z = affine(&z, w, b, self.dims[l + 1]);
        }
        Ok(z[0])
    }

    fn finish(&self, mut z: Vec<f64>, input: TapeInput) -> (Vec<f64>, Tape) {
        let mut pre = Vec::with_capacity(self.n_layers() - 1);
        let mut post = Vec::with_capacity(self.n_layers() - 1);
        for l in 1..self.n_layers() {
            let h: Vec<f64> = z.iter().map(|&v| self.activation.apply(v)).collect();
            let (w, b) = self.layer(l);
            let next = affine(&h, w, b, self.dims[l + 1]);
            pre.push(z);
            post.push(h);
            z = next;
        }
        (z, Tape { input, pre, post, generation: self.generation })
    }

    /// Accumulates into `grads` the gradient of `output . out_grad` with
    /// respect to every parameter.
    pub fn backward(&self, tape: &Tape, out_grad: &[f64], grads: &mut [f64]) -> Result<()> {
        if tape.generation != self.generation {
            return Err(Error::StaleTape);
        }
        if out_grad.len() != self.output_dim() {
            return Err(Error::Dimension { expected: self.output_dim(), got: out_grad.len() });
        }
        if grads.len() != self.params.len() {
            return Err(Error::Dimension { expected: self.params.len(), got: grads.len() });
        }
        let offsets: Vec<usize> = std::iter::once(0)
            .chain(self.dims.windows(2).scan(0, |acc, w| {
                *acc += w[0] * w[1] + w[1];
                Some(*acc)
            }))
            .collect();
        let mut delta = out_grad.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (i_dim, o_dim) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            let (gw, rest) = grads[off..off + i_dim * o_dim + o_dim].split_at_mut(i_dim * o_dim);
            for (g, d) in rest.iter_mut().zip(&delta) {
                *g += d;
            }
            if l == 0 {
                match &tape.input {
                    TapeInput::Dense(x) => {
                        for (i, &xi) in x.iter().enumerate() {
                            if xi != 0.0 {
                                axpy(xi, &delta, &mut gw[i * o_dim..(i + 1) * o_dim]);
                            }
                        }
                    }
                    TapeInput::OneHot(active) => {
                        for &i in active {
                            axpy(1.0, &delta, &mut gw[i * o_dim..(i + 1) * o_dim]);
                        }
                    }
                }
                break;
            }
            let h = &tape.post[l - 1];
            let z = &tape.pre[l - 1];
            let (w, _) = self.layer(l);
            let mut prev = vec![0.0; i_dim];
            if o_dim == 1 {
                let d = delta[0];
                for i in 0..i_dim {
                    gw[i] += h[i] * d;
                    prev[i] = w[i] * d * self.activation.derivative(z[i], h[i]);
                }
                delta = prev;
                continue;
            }
            for i in 0..i_dim {
                let row = &w[i * o_dim..(i + 1) * o_dim];
                if h[i] != 0.0 {
                    axpy(h[i], &delta, &mut gw[i * o_dim..(i + 1) * o_dim]);
                }
                let back: f64 = row.iter().zip(&delta).map(|(a, b)| a * b).sum();
                prev[i] = back * self.activation.derivative(z[i], h[i]);
            }
            delta = prev;
        }
        Ok(())
    }
}

/// `b + h W` for input-major `W`.
fn affine(h: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    if out == 1 {
        return vec![b[0] + h.iter().zip(w).map(|(x, wi)| x * wi).sum::<f64>()];
    }
    let mut next = b.to_vec();
    for (i, &x) in h.iter().enumerate() {
        if x != 0.0 {
            axpy(x, &w[i * out..(i + 1) * out], &mut next);
        }
    }
    next
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected Adam update without clipping.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension { expected: self.m.len(), got: grads.len().min(params.len()) });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Rescales all gradient groups together so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(groups: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = groups
        .iter()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for g in groups.iter_mut().flat_map(|g| g.iter_mut()) {
            *g *= scale;
        }
    }
    norm
}

/// Clip to `grad_clip` then apply one Adam update.
pub fn adam_step(params: &mut [f64], grads: &mut [f64], state: &mut AdamState, grad_clip: f64) -> Result<()> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    clip_grad_norm(&mut [grads], grad_clip);
    state.update(params, grads)
}
