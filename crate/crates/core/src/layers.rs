//! Differentiable building blocks of the descriptor network.
//!
//! Each layer owns the indices of its tensors in a [`ParamStore`] and records
//! its computation on a [`Tape`] through a [`Binder`], which turns stored
//! parameters into tape variables once per forward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, ParamKind, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Lowest value the GeM power is clamped to after an optimizer step.
pub const GEM_MIN_P: f64 = 0.1;

/// Binds stored parameters to tape variables for one forward pass and
/// collects the batch-norm running-stat updates it produces.
pub struct Binder<'a, T: Real> {
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    track_grads: bool,
    mode: Mode,
    stat_updates: Vec<(usize, Tensor<T>)>,
}

impl<'a, T: Real> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, track_grads: bool) -> Self {
        Binder {
            store,
            vars: vec![None; store.len()],
            track_grads,
            mode,
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, tape: &mut Tape<T>, idx: usize) -> Var {
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let value = self.store.get(idx).clone();
        let trainable = self.store.entries()[idx].kind == ParamKind::Trainable;
        let v = if self.track_grads && trainable {
            tape.variable(value)
        } else {
            tape.constant(value)
        };
        self.vars[idx] = Some(v);
        v
    }

    /// Tape variables of the parameters used so far, indexed like the store.
    pub fn bound_vars(&self) -> &[Option<Var>] {
        &self.vars
    }

    /// Running-stat replacements produced by training-mode batch norms.
    pub fn into_stat_updates(self) -> Vec<(usize, Tensor<T>)> {
        self.stat_updates
    }
}

fn kaiming<T: Real, R: Rng>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    let std = (gain / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::cst(normal.sample(rng)))
}

/// 2-d convolution over polar images: circular padding along the angular
/// axis (H), zero padding along the radial axis (W).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub geometry: ConvGeometry,
    weight: usize,
    bias: usize,
}

impl Conv2d {
    /// Stride 1 with an odd kernel ("same" output size), or stride `s` with an
    /// `s x s` kernel tiling the input exactly.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let geometry = if stride == 1 {
            ensure!(
                kernel.0 % 2 == 1 && kernel.1 % 2 == 1,
                "{name}: stride-1 kernels must have odd extents, got {kernel:?}"
            );
            ConvGeometry::same(kernel.0, kernel.1)
        } else {
            ensure!(
                kernel == (stride, stride),
                "{name}: strided kernels must equal the stride, got {kernel:?} / {stride}"
            );
            ConvGeometry::tiled(stride)
        };
        let fan_in = in_channels * kernel.0 * kernel.1;
        let w = kaiming(&[out_channels, in_channels, kernel.0, kernel.1], fan_in, gain, rng);
        let weight = store.insert(format!("{name}.weight"), ParamKind::Trainable, w);
        let bias = store.insert(
            format!("{name}.bias"),
            ParamKind::Trainable,
            Tensor::zeros(&[out_channels]),
        );
        Ok(Conv2d {
            in_channels,
            out_channels,
            kernel,
            geometry,
            weight,
            bias,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Binder<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = ctx.param(tape, self.weight);
        let b = ctx.param(tape, self.bias);
        tape.conv2d(x, w, Some(b), self.geometry)
    }
}

/// Transposed 2x2 stride-2 convolution doubling both spatial extents.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    weight: usize,
    bias: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = kaiming(&[in_channels, out_channels, 2, 2], in_channels, gain, rng);
        let weight = store.insert(format!("{name}.weight"), ParamKind::Trainable, w);
        let bias = store.insert(
            format!("{name}.bias"),
            ParamKind::Trainable,
            Tensor::zeros(&[out_channels]),
        );
        ConvTranspose2d {
            in_channels,
            out_channels,
            weight,
            bias,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Binder<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = ctx.param(tape, self.weight);
        let b = ctx.param(tape, self.bias);
        tape.conv_transpose2x2(x, w, Some(b))
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.insert(format!("{name}.gamma"), ParamKind::Trainable, Tensor::full(&[channels], T::one()));
        let beta = store.insert(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&[channels]));
        let running_mean = store.insert(
            format!("{name}.running_mean"),
            ParamKind::Buffer,
            Tensor::zeros(&[channels]),
        );
        let running_var = store.insert(
            format!("{name}.running_var"),
            ParamKind::Buffer,
            Tensor::full(&[channels], T::one()),
        );
        BatchNorm2d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Binder<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(tape, self.gamma);
        let beta = ctx.param(tape, self.beta);
        let eps = T::cst(self.eps);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, eps)?;
                let mom = T::cst(self.momentum);
                let blend = |old: &Tensor<T>, new: &[T]| {
                    Tensor::from_fn(old.shape(), |i| (T::one() - mom) * old.data()[i] + mom * new[i])
                };
                let mean = blend(ctx.store.get(self.running_mean), &stats.mean);
                let var = blend(ctx.store.get(self.running_var), &stats.var_unbiased);
                ctx.stat_updates.push((self.running_mean, mean));
                ctx.stat_updates.push((self.running_var, var));
                Ok(y)
            }
            Mode::Eval => tape.batch_norm_eval(
                x,
                gamma,
                beta,
                ctx.store.get(self.running_mean).data(),
                ctx.store.get(self.running_var).data(),
                eps,
            ),
        }
    }
}

/// Efficient channel attention: global average pool, circular 1-d conv
/// across channels, sigmoid, multiplicative gate.
#[derive(Clone, Debug)]
pub struct Eca {
    pub kernel_size: usize,
    weight: usize,
}

impl Eca {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, kernel_size: usize, rng: &mut R) -> Result<Self> {
        ensure!(kernel_size % 2 == 1, "{name}: ECA kernel size must be odd");
        let bound = 1.0 / (kernel_size as f64).sqrt();
        let w = Tensor::from_fn(&[kernel_size], |_| T::cst(rng.random_range(-bound..bound)));
        let weight = store.insert(format!("{name}.weight"), ParamKind::Trainable, w);
        Ok(Eca { kernel_size, weight })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Binder<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = ctx.param(tape, self.weight);
        let pooled = tape.mean_hw(x)?;
        let mixed = tape.channel_conv1d(pooled, w)?;
        let gate = tape.sigmoid(mixed)?;
        tape.scale_channels(x, gate)
    }
}

/// Generalized-mean pooling with a single learnable power shared by all channels.
#[derive(Clone, Debug)]
pub struct Gem {
    pub eps: f64,
    p: usize,
}

impl Gem {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, p_init: f64, eps: f64) -> Self {
        let p = store.insert(format!("{name}.p"), ParamKind::Trainable, Tensor::scalar(T::cst(p_init)));
        Gem { eps, p }
    }

    pub fn param_index(&self) -> usize {
        self.p
    }

    pub fn forward<T: Real>(&self, ctx: &mut Binder<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let p = ctx.param(tape, self.p);
        tape.gem(x, p, T::cst(self.eps))
    }
}

/// Convolution followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, &format!("{name}.conv"), in_channels, out_channels, (kernel, kernel), stride, 2.0, rng)?;
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_channels);
        Ok(ConvBnRelu { conv, bn })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Binder<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, tape, x)?;
        let y = self.bn.forward(ctx, tape, y)?;
        tape.relu(y)
    }
}
