//! The radar scan descriptor network.
//!
//! A five-block encoder (`conv0` plus four stride-2 residual blocks with
//! channel attention) feeds an FPN-style merge: the deepest map goes through
//! a 1x1 lateral conv and a transposed conv back to 1/8 resolution, where it
//! is concatenated with a 1x1 projection of block 3. GeM pooling of that
//! map yields the descriptor.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{read_checkpoint, write_checkpoint, ParamGrads, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::layers::{Binder, Conv2d, ConvBnRelu, ConvTranspose2d, Eca, Gem, Mode, GEM_MIN_P};

/// Total downsampling of the encoder (four stride-2 blocks).
pub const TOTAL_STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub angular_bins: usize,
    pub radial_bins: usize,
    /// Output channels of conv0 and blocks 1..4.
    pub block_channels: Vec<usize>,
    pub lateral_channels: usize,
    pub descriptor_dim: usize,
    pub eca_kernel: usize,
    pub gem_p_init: f64,
    pub gem_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            angular_bins: 384,
            radial_bins: 128,
            block_channels: vec![32, 32, 64, 64, 128],
            lateral_channels: 128,
            descriptor_dim: 256,
            eca_kernel: 3,
            gem_p_init: 3.0,
            gem_eps: 1e-6,
        }
    }
}

impl NetworkConfig {
    pub fn with_input(angular_bins: usize, radial_bins: usize) -> Self {
        NetworkConfig {
            angular_bins,
            radial_bins,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.angular_bins == 0 || self.angular_bins % TOTAL_STRIDE != 0 {
            return bad(format!("angular bins {} not a positive multiple of {TOTAL_STRIDE}", self.angular_bins));
        }
        if self.radial_bins == 0 || self.radial_bins % TOTAL_STRIDE != 0 {
            return bad(format!("radial bins {} not a positive multiple of {TOTAL_STRIDE}", self.radial_bins));
        }
        if self.block_channels.len() != 5 || self.block_channels.contains(&0) {
            return bad(format!("need five positive block widths, got {:?}", self.block_channels));
        }
        if self.lateral_channels == 0 || self.descriptor_dim != 2 * self.lateral_channels {
            return bad(format!(
                "descriptor_dim {} must be twice lateral_channels {}",
                self.descriptor_dim, self.lateral_channels
            ));
        }
        if self.eca_kernel % 2 == 0 {
            return bad("ECA kernel must be odd".into());
        }
        if !(self.gem_p_init > 0.0 && self.gem_eps > 0.0) {
            return bad("GeM p and eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DownBlock {
    down: ConvBnRelu,
    first: ConvBnRelu,
    second: ConvBnRelu,
    eca: Eca,
}

impl DownBlock {
    fn forward<T: Real>(&self, ctx: &mut Binder<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let skip = self.down.forward(ctx, tape, x)?;
        let y = self.first.forward(ctx, tape, skip)?;
        let y = self.second.forward(ctx, tape, y)?;
        let y = tape.add(skip, y)?;
        self.eca.forward(ctx, tape, y)
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass<T: Real> {
    pub descriptor: Var,
    pub feature_map: Var,
    /// Tape variable of every parameter, indexed like the model's store.
    pub param_vars: Vec<Option<Var>>,
    stat_updates: Vec<(usize, Tensor<T>)>,
}

#[derive(Clone, Debug)]
pub struct RadarLocModel<T: Real = f32> {
    config: NetworkConfig,
    params: ParamStore<T>,
    conv0: ConvBnRelu,
    blocks: Vec<DownBlock>,
    lateral_mid: Conv2d,
    lateral_deep: Conv2d,
    upsample: ConvTranspose2d,
    gem: Gem,
}

impl<T: Real> RadarLocModel<T> {
    /// Builds the network with parameters drawn deterministically from `seed`.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = &config.block_channels;
        let conv0 = ConvBnRelu::new(&mut store, "conv0", 1, ch[0], 5, 1, &mut rng)?;
        let mut blocks = Vec::with_capacity(4);
        for k in 1..5 {
            let name = format!("block{k}");
            let (cin, c) = (ch[k - 1], ch[k]);
            blocks.push(DownBlock {
                down: ConvBnRelu::new(&mut store, &format!("{name}.down"), cin, c, 2, 2, &mut rng)?,
                first: ConvBnRelu::new(&mut store, &format!("{name}.res1"), c, c, 3, 1, &mut rng)?,
                second: ConvBnRelu::new(&mut store, &format!("{name}.res2"), c, c, 3, 1, &mut rng)?,
                eca: Eca::new(&mut store, &format!("{name}.eca"), config.eca_kernel, &mut rng)?,
            });
        }
        let lat = config.lateral_channels;
        let lateral_mid = Conv2d::new(&mut store, "lateral3", ch[3], lat, (1, 1), 1, 1.0, &mut rng)?;
        let lateral_deep = Conv2d::new(&mut store, "lateral4", ch[4], lat, (1, 1), 1, 1.0, &mut rng)?;
        let upsample = ConvTranspose2d::new(&mut store, "upsample", lat, lat, 1.0, &mut rng);
        let gem = Gem::new(&mut store, "gem", config.gem_p_init, config.gem_eps);
        Ok(RadarLocModel {
            config,
            params: store,
            conv0,
            blocks,
            lateral_mid,
            lateral_deep,
            upsample,
            gem,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn gem_p(&self) -> T {
        self.params.get(self.gem.param_index()).data()[0]
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> RadarLocModel<U> {
        RadarLocModel {
            config: self.config.clone(),
            params: self.params.cast(),
            conv0: self.conv0.clone(),
            blocks: self.blocks.clone(),
            lateral_mid: self.lateral_mid.clone(),
            lateral_deep: self.lateral_deep.clone(),
            upsample: self.upsample.clone(),
            gem: self.gem.clone(),
        }
    }

    /// Records the network on `tape` for an N x 1 x A x R batch.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode, track_grads: bool) -> Result<ForwardPass<T>> {
        let (_, c, a, r) = tape.value(x).dims4()?;
        ensure!(
            c == 1 && a == self.config.angular_bins && r == self.config.radial_bins,
            "network expects N x 1 x {} x {} input, got {:?}",
            self.config.angular_bins,
            self.config.radial_bins,
            tape.value(x).shape()
        );
        let mut ctx = Binder::new(&self.params, mode, track_grads);
        let mut y = self.conv0.forward(&mut ctx, tape, x)?;
        let mut mid = None;
        for (k, block) in self.blocks.iter().enumerate() {
            y = block.forward(&mut ctx, tape, y)?;
            if k == 2 {
                mid = Some(y);
            }
        }
        let mid = self.lateral_mid.forward(&mut ctx, tape, mid.expect("four blocks"))?;
        let deep = self.lateral_deep.forward(&mut ctx, tape, y)?;
        let up = self.upsample.forward(&mut ctx, tape, deep)?;
        let feature_map = tape.concat_channels(up, mid)?;
        let descriptor = self.gem.forward(&mut ctx, tape, feature_map)?;
        if !tape.value(descriptor).all_finite() {
            return Err(Error::NonFinite("network produced non-finite descriptors".into()));
        }
        let param_vars = ctx.bound_vars().to_vec();
        Ok(ForwardPass {
            descriptor,
            feature_map,
            param_vars,
            stat_updates: ctx.into_stat_updates(),
        })
    }

    /// Commits the batch-norm running statistics of a training-mode pass.
    pub fn commit_stats(&mut self, pass: &mut ForwardPass<T>) {
        for (idx, value) in pass.stat_updates.drain(..) {
            *self.params.get_mut(idx) = value;
        }
    }

    /// Collects parameter gradients of a pass after [`Tape::backward`].
    pub fn param_grads(&self, pass: &ForwardPass<T>, grads: &crate::autodiff::Gradients<T>) -> ParamGrads<T> {
        self.params
            .entries()
            .iter()
            .zip(&pass.param_vars)
            .map(|(e, v)| match e.kind {
                crate::autodiff::ParamKind::Trainable => Some(
                    v.and_then(|v| grads.get(v).cloned())
                        .unwrap_or_else(|| Tensor::zeros(e.value.shape())),
                ),
                crate::autodiff::ParamKind::Buffer => None,
            })
            .collect()
    }

    /// Keeps the GeM power positive after an optimizer step.
    pub fn clamp_gem(&mut self) {
        let p = self.params.get_mut(self.gem.param_index());
        let v = &mut p.data_mut()[0];
        *v = v.max(T::cst(GEM_MIN_P));
    }

    /// Eval-mode descriptors for an N x 1 x A x R batch, processed in chunks.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, a, r) = images.dims4()?;
        let per = c * a * r;
        let chunk = 8;
        let mut out = Vec::with_capacity(n * self.config.descriptor_dim);
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let part = Tensor::new(&[end - start, c, a, r], images.data()[start * per..end * per].to_vec())?;
            let mut tape = Tape::new();
            let x = tape.constant(part);
            let pass = self.forward(&mut tape, x, Mode::Eval, false)?;
            out.extend_from_slice(tape.value(pass.descriptor).data());
        }
        Tensor::new(&[n, self.config.descriptor_dim], out)
    }
}

impl RadarLocModel<f32> {
    /// Writes the checkpoint and a `<path>.json` sidecar holding the config.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::from(e).in_file(path))?;
        write_checkpoint(BufWriter::new(f), &self.params.named())?;
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_string_pretty(&self.config)? + "\n")
            .map_err(|e| Error::from(e).in_file(side))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::from(e).in_file(&side))?;
        let config: NetworkConfig = serde_json::from_str(&text)?;
        let mut model = Self::build(config, 0)?;
        let f = File::open(path).map_err(|e| Error::from(e).in_file(path))?;
        let named = read_checkpoint(BufReader::new(f)).map_err(|e| e.in_file(path))?;
        model.params.load_named(named)?;
        Ok(model)
    }
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_input() {
        assert!(RadarLocModel::<f32>::build(NetworkConfig::with_input(40, 16), 0).is_err());
        assert!(RadarLocModel::<f32>::build(NetworkConfig::with_input(32, 24), 0).is_err());
        let mut cfg = NetworkConfig::default();
        cfg.descriptor_dim = 128;
        assert!(RadarLocModel::<f32>::build(cfg, 0).is_err());
    }

    #[test]
    fn equal_seeds_give_identical_parameters() {
        let a = RadarLocModel::<f32>::build(NetworkConfig::with_input(32, 16), 11).unwrap();
        let b = RadarLocModel::<f32>::build(NetworkConfig::with_input(32, 16), 11).unwrap();
        let c = RadarLocModel::<f32>::build(NetworkConfig::with_input(32, 16), 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn minimum_input_yields_descriptor_per_sample() {
        let model = RadarLocModel::<f32>::build(NetworkConfig::with_input(32, 16), 3).unwrap();
        let x = Tensor::from_fn(&[2, 1, 32, 16], |i| ((i * 7) % 13) as f32 / 13.0);
        let d = model.embed(&x).unwrap();
        assert_eq!(d.shape(), &[2, 256]);
    }

    #[test]
    fn parameter_count_is_pinned() {
        // conv0 896, blocks 22819 + 82499 + 90691 + 328835, laterals 8320 + 16512,
        // upsample 65664, GeM p 1.
        let model = RadarLocModel::<f32>::build(NetworkConfig::default(), 0).unwrap();
        assert_eq!(model.params().trainable_count(), 616_237);
        let small = RadarLocModel::<f32>::build(NetworkConfig::with_input(32, 16), 0).unwrap();
        assert_eq!(small.params().trainable_count(), 616_237);
    }

    #[test]
    fn wrong_input_extent_is_rejected() {
        let model = RadarLocModel::<f32>::build(NetworkConfig::with_input(32, 16), 3).unwrap();
        assert!(model.embed(&Tensor::zeros(&[1, 1, 48, 16])).is_err());
    }
}
