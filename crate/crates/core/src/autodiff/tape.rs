//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. Nodes are only ever appended, so the list is
//! already in topological order and `backward` is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Stride and padding of a 2-d convolution over NCHW input, where H is the
/// angular (periodic) axis and W the radial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    /// Padding per side: `.0` wraps around the angular axis, `.1` is zero padding.
    pub pad: (usize, usize),
}

impl ConvGeometry {
    /// Stride 1, "same" output size for an odd `kh x kw` kernel.
    pub fn same(kh: usize, kw: usize) -> Self {
        ConvGeometry {
            stride: (1, 1),
            pad: (kh / 2, kw / 2),
        }
    }

    /// Non-overlapping `s x s` tiling (kernel == stride), no padding.
    pub fn tiled(s: usize) -> Self {
        ConvGeometry {
            stride: (s, s),
            pad: (0, 0),
        }
    }
}

/// Per-channel statistics of a training-mode batch norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance, the estimate blended into running stats.
    pub var_unbiased: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
    },
    ConvTranspose2x2 {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MeanHw(usize),
    ChannelConv1d {
        x: usize,
        w: usize,
    },
    ScaleChannels {
        x: usize,
        g: usize,
    },
    Gem {
        x: usize,
        p: usize,
        eps: T,
    },
    ConcatChannels(usize, usize),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    RowDistance(usize, usize),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a forward computation for later differentiation. Confined to one thread.
pub struct Tape<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or `None` if `v` does not require grad or the loss
    /// does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Records a leaf that receives a gradient in [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.idx].value
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        ensure!(
            v.tape == self.id && v.idx < self.nodes.len(),
            "variable is not recorded on this tape"
        );
        Ok(v.idx)
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn rg(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str) -> Result<(usize, usize)> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        ensure!(
            self.val(a).shape() == self.val(b).shape(),
            "{name}: shape {:?} vs {:?}",
            self.val(a).shape(),
            self.val(b).shape()
        );
        Ok((a, b))
    }

    fn map_binary(&mut self, a: usize, b: usize, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = self.val(a);
        let data = va
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape(), data).expect("shape preserved");
        let rg = self.rg(&[a, b]);
        self.push(value, rg, op)
    }

    fn map_unary(&mut self, a: usize, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let va = self.val(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape(), data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(value, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.binary(a, b, "add")?;
        Ok(self.map_binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.binary(a, b, "sub")?;
        Ok(self.map_binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.binary(a, b, "mul")?;
        Ok(self.map_binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let a = self.idx(a)?;
        Ok(self.map_unary(a, Op::Scale(a, c), |x| x * c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let a = self.idx(a)?;
        Ok(self.map_unary(a, Op::AddScalar(a), |x| x + c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        Ok(self.map_unary(a, Op::Relu(a), |x| x.max(T::zero())))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        Ok(self.map_unary(a, Op::Sigmoid(a), sigmoid))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let s = self.val(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.val(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::cst(v.len() as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(m), rg, Op::Mean(a)))
    }

    /// Cross-correlation of NCHW `x` with OIHW `w`, circular padding on the
    /// angular axis (H) and zero padding on the radial axis (W).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let (n, c, h, wd) = self.val(xi).dims4()?;
        let (o, ci, kh, kw) = self.val(wi).dims4()?;
        ensure!(ci == c, "conv2d: input has {c} channels, kernel expects {ci}");
        let (sh, sw) = geom.stride;
        ensure!(sh >= 1 && sw >= 1, "conv2d: zero stride");
        ensure!(
            h % sh == 0 && wd % sw == 0,
            "conv2d: spatial extent {h}x{wd} not divisible by stride {sh}x{sw}"
        );
        let (ph, pw) = geom.pad;
        ensure!(
            h + 2 * ph >= kh && wd + 2 * pw >= kw,
            "conv2d: kernel {kh}x{kw} larger than padded input"
        );
        ensure!(
            (h + 2 * ph - kh) % sh == 0 && (wd + 2 * pw - kw) % sw == 0,
            "conv2d: kernel/stride/padding do not tile the input"
        );
        if let Some(bi) = bi {
            ensure!(self.val(bi).shape() == [o], "conv2d: bias must have shape [{o}]");
        }
        let g = ConvDims::new(c, h, wd, kh, kw, geom);
        let p = g.ho * g.wo;
        let mut out = vec![T::zero(); n * o * p];
        let mut cols = vec![T::zero(); g.rows() * p];
        let xd = self.val(xi).data();
        let wdat = self.val(wi).data();
        for s in 0..n {
            im2col(&xd[s * c * h * wd..(s + 1) * c * h * wd], &g, &mut cols);
            let ys = &mut out[s * o * p..(s + 1) * o * p];
            T::gemm(false, false, o, p, g.rows(), T::one(), wdat, &cols, T::zero(), ys);
            if let Some(bi) = bi {
                let bd = self.val(bi).data();
                for (oc, chunk) in ys.chunks_mut(p).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[oc]);
                }
            }
        }
        let value = Tensor::new(&[n, o, g.ho, g.wo], out)?;
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        let rg = self.rg(&inputs);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                geom,
            },
        ))
    }

    /// Transposed 2x2 stride-2 convolution; `w` has shape (in, out, 2, 2).
    /// With shared weights this is the adjoint of a 2x2 stride-2 [`Tape::conv2d`].
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let (n, c, h, wd) = self.val(xi).dims4()?;
        let (ci, o, kh, kw) = self.val(wi).dims4()?;
        ensure!(ci == c, "conv_transpose: input has {c} channels, kernel expects {ci}");
        ensure!(kh == 2 && kw == 2, "conv_transpose: only 2x2 stride-2 kernels supported");
        if let Some(bi) = bi {
            ensure!(self.val(bi).shape() == [o], "conv_transpose: bias must have shape [{o}]");
        }
        let hw = h * wd;
        let (ho, wo) = (2 * h, 2 * wd);
        let mut out = vec![T::zero(); n * o * ho * wo];
        let mut cols = vec![T::zero(); o * 4 * hw];
        let xd = self.val(xi).data();
        let wdat = self.val(wi).data();
        for s in 0..n {
            T::gemm(true, false, o * 4, hw, c, T::one(), wdat, &xd[s * c * hw..(s + 1) * c * hw], T::zero(), &mut cols);
            let ys = &mut out[s * o * ho * wo..(s + 1) * o * ho * wo];
            for oc in 0..o {
                let bias = bi.map_or(T::zero(), |bi| self.val(bi).data()[oc]);
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &cols[((oc * 2 + a) * 2 + bb) * hw..][..hw];
                        for i in 0..h {
                            let dst = &mut ys[oc * ho * wo + (2 * i + a) * wo..][..wo];
                            for j in 0..wd {
                                dst[2 * j + bb] = row[i * wd + j] + bias;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[n, o, ho, wo], out)?;
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        let rg = self.rg(&inputs);
        Ok(self.push(value, rg, Op::ConvTranspose2x2 { x: xi, w: wi, b: bi }))
    }

    /// Batch norm with statistics of the current batch over (N, H, W).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (n, c, h, w) = self.val(xi).dims4()?;
        self.check_affine(gi, bi, c)?;
        let hw = h * w;
        let count = n * hw;
        if count < 2 {
            return Err(Error::contract(
                "batch_norm: training mode needs at least two values per channel",
            ));
        }
        let xd = self.val(xi).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let inv_count = T::cst(1.0 / count as f64);
        for ch in 0..c {
            let mut s = T::zero();
            for smp in 0..n {
                s += xd[(smp * c + ch) * hw..][..hw].iter().copied().sum::<T>();
            }
            let m = s * inv_count;
            let mut q = T::zero();
            for smp in 0..n {
                q += xd[(smp * c + ch) * hw..][..hw]
                    .iter()
                    .map(|&v| (v - m) * (v - m))
                    .sum::<T>();
            }
            mean[ch] = m;
            var[ch] = q * inv_count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let var_unbiased = var
            .iter()
            .map(|&v| v * T::cst(count as f64 / (count - 1) as f64))
            .collect();
        let out = self.normalize(xi, gi, bi, &mean, &inv_std, true);
        Ok((out, BatchStats { mean, var_unbiased }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (_, c, _, _) = self.val(xi).dims4()?;
        self.check_affine(gi, bi, c)?;
        ensure!(
            mean.len() == c && var.len() == c,
            "batch_norm: running stats must have {c} entries"
        );
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        Ok(self.normalize(xi, gi, bi, mean, &inv_std, false))
    }

    fn check_affine(&self, gi: usize, bi: usize, c: usize) -> Result<()> {
        ensure!(
            self.val(gi).shape() == [c] && self.val(bi).shape() == [c],
            "batch_norm: gamma/beta must have shape [{c}]"
        );
        Ok(())
    }

    fn normalize(
        &mut self,
        xi: usize,
        gi: usize,
        bi: usize,
        mean: &[T],
        inv_std: &[T],
        batch_stats: bool,
    ) -> Var {
        let xv = self.val(xi);
        let (n, c, h, w) = xv.dims4().expect("checked");
        let hw = h * w;
        let (gd, bd) = (self.val(gi).data(), self.val(bi).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for smp in 0..n {
            for ch in 0..c {
                let off = (smp * c + ch) * hw;
                for k in off..off + hw {
                    let z = (xv.data()[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = z;
                    out[k] = gd[ch] * z + bd[ch];
                }
            }
        }
        let value = Tensor::new(xv.shape(), out).expect("shape preserved");
        let rg = self.rg(&[xi, gi, bi]);
        self.push(
            value,
            rg,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std: inv_std.to_vec(),
                batch_stats,
            },
        )
    }

    /// Global average over H and W: NCHW -> NC.
    pub fn mean_hw(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (n, c, h, w) = self.val(xi).dims4()?;
        let hw = h * w;
        let inv = T::cst(1.0 / hw as f64);
        let data = self
            .val(xi)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(value, rg, Op::MeanHw(xi)))
    }

    /// 1-d cross-correlation along the channel axis of an NC tensor with
    /// circular padding; `w` has odd length.
    pub fn channel_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let (n, c) = self.val(xi).dims2()?;
        let k = self.val(wi).len();
        ensure!(
            self.val(wi).rank() == 1 && k % 2 == 1,
            "channel_conv1d: kernel must be 1-d with odd length"
        );
        let r = k / 2;
        let (xd, wd) = (self.val(xi).data(), self.val(wi).data());
        let mut out = vec![T::zero(); n * c];
        for s in 0..n {
            for ch in 0..c {
                let mut acc = T::zero();
                for (j, &wj) in wd.iter().enumerate() {
                    let src = (ch + c * k + j - r) % c;
                    acc += wj * xd[s * c + src];
                }
                out[s * c + ch] = acc;
            }
        }
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.rg(&[xi, wi]);
        Ok(self.push(value, rg, Op::ChannelConv1d { x: xi, w: wi }))
    }

    /// Multiplies every (n, c) plane of NCHW `x` by `g[n, c]`.
    pub fn scale_channels(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xi, gi) = (self.idx(x)?, self.idx(g)?);
        let (n, c, h, w) = self.val(xi).dims4()?;
        ensure!(
            self.val(gi).shape() == [n, c],
            "scale_channels: gate must have shape [{n}, {c}]"
        );
        let hw = h * w;
        let gd = self.val(gi).data();
        let mut out = self.val(xi).data().to_vec();
        for (plane, &gv) in out.chunks_mut(hw).zip(gd) {
            plane.iter_mut().for_each(|v| *v *= gv);
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.rg(&[xi, gi]);
        Ok(self.push(value, rg, Op::ScaleChannels { x: xi, g: gi }))
    }

    /// Generalized-mean pooling over H and W with a learnable scalar power:
    /// `(mean(max(x, eps)^p))^(1/p)` per channel, NCHW -> NC.
    pub fn gem(&mut self, x: Var, p: Var, eps: T) -> Result<Var> {
        let (xi, pi) = (self.idx(x)?, self.idx(p)?);
        let (n, c, h, w) = self.val(xi).dims4()?;
        let pv = self.val(pi).item()?;
        ensure!(pv > T::zero(), "gem: power must be positive, got {pv}");
        let hw = h * w;
        let inv = T::cst(1.0 / hw as f64);
        let data = self
            .val(xi)
            .data()
            .chunks(hw)
            .map(|plane| {
                let m = plane.iter().map(|&v| v.max(eps).powf(pv)).sum::<T>() * inv;
                m.powf(T::one() / pv)
            })
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        let rg = self.rg(&[xi, pi]);
        Ok(self.push(value, rg, Op::Gem { x: xi, p: pi, eps }))
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (n, ca, h, w) = self.val(ai).dims4()?;
        let (nb, cb, hb, wb) = self.val(bi).dims4()?;
        ensure!(
            n == nb && h == hb && w == wb,
            "concat_channels: {:?} vs {:?}",
            self.val(ai).shape(),
            self.val(bi).shape()
        );
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&self.val(ai).data()[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&self.val(bi).data()[s * cb * hw..(s + 1) * cb * hw]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, rg, Op::ConcatChannels(ai, bi)))
    }

    /// Selects rows of an N x D tensor (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let (n, d) = self.val(xi).dims2()?;
        ensure!(!idx.is_empty(), "gather_rows: empty index list");
        ensure!(idx.iter().all(|&i| i < n), "gather_rows: index out of range");
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(self.val(xi).row(i));
        }
        let value = Tensor::new(&[idx.len(), d], out)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(
            value,
            rg,
            Op::GatherRows {
                x: xi,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Euclidean distance between matching rows of two K x D tensors -> K.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary(a, b, "row_distance")?;
        let (k, d) = self.val(ai).dims2()?;
        let (ad, bd) = (self.val(ai).data(), self.val(bi).data());
        let data = (0..k)
            .map(|r| {
                ad[r * d..(r + 1) * d]
                    .iter()
                    .zip(&bd[r * d..(r + 1) * d])
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum::<T>()
                    .sqrt()
            })
            .collect();
        let value = Tensor::new(&[k], data)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, rg, Op::RowDistance(ai, bi)))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of values consumed by
    /// several operations are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        ensure!(
            self.val(li).is_scalar(),
            "backward: loss must be scalar, got shape {:?}",
            self.val(li).shape()
        );
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape(), g).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                self.acc(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                self.acc(grads, *b, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c));
            }
            Op::AddScalar(a) => self.acc(grads, *a, |d| add_into(d, g)),
            Op::Relu(a) => {
                let va = self.val(*a).data();
                self.acc(grads, *a, |d| {
                    for k in 0..d.len() {
                        if va[k] > T::zero() {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.acc(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k] * (T::one() - y[k]);
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let s = g[0] / T::cst(self.val(*a).len() as f64);
                self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += s));
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, *geom, g, grads),
            Op::ConvTranspose2x2 { x, w, b } => self.conv_t_backward(*x, *w, *b, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = out.dims4().expect("NCHW");
                let hw = h * w;
                let count = T::cst((n * hw) as f64);
                let gd = self.val(*gamma).data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for k in off..off + hw {
                            sum_dy[ch] += g[k];
                            sum_dy_xhat[ch] += g[k] * xhat[k];
                        }
                    }
                }
                self.acc(grads, *gamma, |d| add_into(d, &sum_dy_xhat));
                self.acc(grads, *beta, |d| add_into(d, &sum_dy));
                self.acc(grads, *x, |d| {
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            let scale = gd[ch] * inv_std[ch];
                            if *batch_stats {
                                let (m1, m2) = (sum_dy[ch] / count, sum_dy_xhat[ch] / count);
                                for k in off..off + hw {
                                    d[k] += scale * (g[k] - m1 - xhat[k] * m2);
                                }
                            } else {
                                for k in off..off + hw {
                                    d[k] += scale * g[k];
                                }
                            }
                        }
                    }
                });
            }
            Op::MeanHw(x) => {
                let (_, _, h, w) = self.val(*x).dims4().expect("NCHW");
                let hw = h * w;
                let inv = T::cst(1.0 / hw as f64);
                self.acc(grads, *x, |d| {
                    for (plane, &gv) in d.chunks_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|v| *v += gv * inv);
                    }
                });
            }
            Op::ChannelConv1d { x, w } => {
                let (n, c) = self.val(*x).dims2().expect("NC");
                let (xd, wd) = (self.val(*x).data(), self.val(*w).data());
                let k = wd.len();
                let r = k / 2;
                self.acc(grads, *x, |d| {
                    for s in 0..n {
                        for ch in 0..c {
                            for (j, &wj) in wd.iter().enumerate() {
                                d[s * c + (ch + c * k + j - r) % c] += wj * g[s * c + ch];
                            }
                        }
                    }
                });
                self.acc(grads, *w, |d| {
                    for s in 0..n {
                        for ch in 0..c {
                            for (j, dj) in d.iter_mut().enumerate() {
                                *dj += g[s * c + ch] * xd[s * c + (ch + c * k + j - r) % c];
                            }
                        }
                    }
                });
            }
            Op::ScaleChannels { x, g: gate } => {
                let (_, _, h, w) = self.val(*x).dims4().expect("NCHW");
                let hw = h * w;
                let (xd, gd) = (self.val(*x).data(), self.val(*gate).data());
                self.acc(grads, *x, |d| {
                    for (pi, plane) in d.chunks_mut(hw).enumerate() {
                        for (k, v) in plane.iter_mut().enumerate() {
                            *v += g[pi * hw + k] * gd[pi];
                        }
                    }
                });
                self.acc(grads, *gate, |d| {
                    for (pi, dv) in d.iter_mut().enumerate() {
                        let off = pi * hw;
                        *dv += (off..off + hw).map(|k| g[k] * xd[k]).sum::<T>();
                    }
                });
            }
            Op::Gem { x, p, eps } => {
                let (_, _, h, w) = self.val(*x).dims4().expect("NCHW");
                let hw = h * w;
                let nf = T::cst(hw as f64);
                let xd = self.val(*x).data();
                let pv = self.val(*p).data()[0];
                let y = out.data();
                let mut dp = T::zero();
                let mut dx = vec![T::zero(); xd.len()];
                for (pi, plane) in xd.chunks(hw).enumerate() {
                    let mut sum_zp = T::zero();
                    let mut sum_zp_ln = T::zero();
                    for &v in plane {
                        let z = v.max(*eps);
                        let zp = z.powf(pv);
                        sum_zp += zp;
                        sum_zp_ln += zp * z.ln();
                    }
                    let m = sum_zp / nf;
                    // dy/dz_k = m^(1/p - 1) z_k^(p - 1) / n
                    let coef = m.powf(T::one() / pv - T::one()) / nf;
                    for (k, &v) in plane.iter().enumerate() {
                        if v > *eps {
                            dx[pi * hw + k] = g[pi] * coef * v.powf(pv - T::one());
                        }
                    }
                    let dy_dp = y[pi] * (-m.ln() / (pv * pv) + sum_zp_ln / (nf * pv * m));
                    dp += g[pi] * dy_dp;
                }
                self.acc(grads, *x, |d| add_into(d, &dx));
                self.acc(grads, *p, |d| d[0] += dp);
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.val(*a).dims4().expect("NCHW");
                let cb = self.val(*b).shape()[1];
                let hw = h * w;
                let c = ca + cb;
                self.acc(grads, *a, |d| {
                    for s in 0..n {
                        add_into(&mut d[s * ca * hw..(s + 1) * ca * hw], &g[s * c * hw..][..ca * hw]);
                    }
                });
                self.acc(grads, *b, |d| {
                    for s in 0..n {
                        add_into(
                            &mut d[s * cb * hw..(s + 1) * cb * hw],
                            &g[(s * c + ca) * hw..][..cb * hw],
                        );
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d_cols = self.val(*x).shape()[1];
                self.acc(grads, *x, |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut d[src * d_cols..(src + 1) * d_cols], &g[r * d_cols..(r + 1) * d_cols]);
                    }
                });
            }
            Op::RowDistance(a, b) => {
                let (k, dcols) = self.val(*a).dims2().expect("2-d");
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                let dist = out.data();
                // d|a-b| / da = (a-b)/|a-b|, taken as 0 at a == b.
                let mut da = vec![T::zero(); ad.len()];
                for r in 0..k {
                    if dist[r] > T::zero() {
                        let s = g[r] / dist[r];
                        for j in r * dcols..(r + 1) * dcols {
                            da[j] = s * (ad[j] - bd[j]);
                        }
                    }
                }
                self.acc(grads, *a, |d| add_into(d, &da));
                self.acc(grads, *b, |d| d.iter_mut().zip(&da).for_each(|(d, &v)| *d -= v));
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (n, c, h, wd) = self.val(x).dims4().expect("NCHW");
        let (o, _, kh, kw) = self.val(w).dims4().expect("OIHW");
        let dims = ConvDims::new(c, h, wd, kh, kw, geom);
        let p = dims.ho * dims.wo;
        let sample = c * h * wd;
        let xd = self.val(x).data();
        let wdat = self.val(w).data();
        let need_x = self.nodes[x].requires_grad;
        let need_w = self.nodes[w].requires_grad;
        if let Some(b) = b {
            self.acc(grads, b, |d| {
                for s in 0..n {
                    for (oc, dv) in d.iter_mut().enumerate() {
                        *dv += g[(s * o + oc) * p..][..p].iter().copied().sum::<T>();
                    }
                }
            });
        }
        let mut cols = vec![T::zero(); dims.rows() * p];
        if need_w {
            let mut dw = vec![T::zero(); wdat.len()];
            for s in 0..n {
                im2col(&xd[s * sample..(s + 1) * sample], &dims, &mut cols);
                T::gemm(false, true, o, dims.rows(), p, T::one(), &g[s * o * p..(s + 1) * o * p], &cols, T::one(), &mut dw);
            }
            self.acc(grads, w, |d| add_into(d, &dw));
        }
        if need_x {
            self.acc(grads, x, |d| {
                for s in 0..n {
                    T::gemm(true, false, dims.rows(), p, o, T::one(), wdat, &g[s * o * p..(s + 1) * o * p], T::zero(), &mut cols);
                    col2im_add(&cols, &dims, &mut d[s * sample..(s + 1) * sample]);
                }
            });
        }
    }

    fn conv_t_backward(
        &self,
        x: usize,
        w: usize,
        b: Option<usize>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (n, c, h, wd) = self.val(x).dims4().expect("NCHW");
        let o = self.val(w).shape()[1];
        let hw = h * wd;
        let (ho, wo) = (2 * h, 2 * wd);
        let xd = self.val(x).data();
        let wdat = self.val(w).data();
        if let Some(b) = b {
            self.acc(grads, b, |d| {
                for s in 0..n {
                    for (oc, dv) in d.iter_mut().enumerate() {
                        *dv += g[(s * o + oc) * ho * wo..][..ho * wo].iter().copied().sum::<T>();
                    }
                }
            });
        }
        let mut dcols = vec![T::zero(); o * 4 * hw];
        let mut dw = vec![T::zero(); wdat.len()];
        let mut dx = vec![T::zero(); xd.len()];
        for s in 0..n {
            let gs = &g[s * o * ho * wo..(s + 1) * o * ho * wo];
            for oc in 0..o {
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &mut dcols[((oc * 2 + a) * 2 + bb) * hw..][..hw];
                        for i in 0..h {
                            let src = &gs[oc * ho * wo + (2 * i + a) * wo..][..wo];
                            for j in 0..wd {
                                row[i * wd + j] = src[2 * j + bb];
                            }
                        }
                    }
                }
            }
            let xs = &xd[s * c * hw..(s + 1) * c * hw];
            T::gemm(false, true, c, o * 4, hw, T::one(), xs, &dcols, T::one(), &mut dw);
            T::gemm(false, false, c, hw, o * 4, T::one(), wdat, &dcols, T::zero(), &mut dx[s * c * hw..(s + 1) * c * hw]);
        }
        self.acc(grads, w, |d| add_into(d, &dw));
        self.acc(grads, x, |d| add_into(d, &dx));
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], i: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[i].requires_grad {
            return;
        }
        let slot = grads[i].get_or_insert_with(|| vec![T::zero(); self.nodes[i].value.len()]);
        f(slot);
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
}

struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, geom: ConvGeometry) -> Self {
        let (sh, sw) = geom.stride;
        let (ph, pw) = geom.pad;
        ConvDims {
            c,
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            ho: (h + 2 * ph - kh) / sh + 1,
            wo: (w + 2 * pw - kw) / sw + 1,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Source angular row for output row `oh`, kernel row `i` (wraps).
    fn src_row(&self, oh: usize, i: usize) -> usize {
        (oh * self.sh + i + self.h * self.kh - self.ph) % self.h
    }

    /// Source radial column, or `None` inside the zero padding.
    fn src_col(&self, ow: usize, j: usize) -> Option<usize> {
        let pos = ow * self.sw + j;
        (pos >= self.pw && pos - self.pw < self.w).then(|| pos - self.pw)
    }
}

fn im2col<T: Real>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let p = d.ho * d.wo;
    for ci in 0..d.c {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = &mut cols[((ci * d.kh + i) * d.kw + j) * p..][..p];
                for oh in 0..d.ho {
                    let src = &plane[d.src_row(oh, i) * d.w..][..d.w];
                    let dst = &mut row[oh * d.wo..(oh + 1) * d.wo];
                    for (ow, v) in dst.iter_mut().enumerate() {
                        *v = d.src_col(ow, j).map_or(T::zero(), |c| src[c]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], d: &ConvDims, dx: &mut [T]) {
    let p = d.ho * d.wo;
    for ci in 0..d.c {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = &cols[((ci * d.kh + i) * d.kw + j) * p..][..p];
                for oh in 0..d.ho {
                    let base = d.src_row(oh, i) * d.w;
                    for ow in 0..d.wo {
                        if let Some(c) = d.src_col(ow, j) {
                            plane[base + c] += row[oh * d.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_identity_has_unit_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn multi_consumer_gradients_are_summed() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_foreign_variable() {
        let mut other = Tape::<f64>::new();
        let foreign = other.variable(Tensor::scalar(1.0));
        let tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(foreign), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_and_bad_stride() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 6, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(tape.conv2d(x, w, None, ConvGeometry::same(3, 3)).is_err());
        let x = tape.constant(Tensor::zeros(&[1, 1, 5, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(tape.conv2d(x, w, None, ConvGeometry::tiled(2)).is_err());
    }
}
