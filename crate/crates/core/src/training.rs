//! Triplet-margin metric learning with in-batch hardest-negative mining.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Tape, Tensor, Var};
use crate::data::{PairLabel, PlaceThresholds, PolarImage, Pose, SimilarityRelation};
use crate::error::{ensure, Error, Result};
use crate::layers::Mode;
use crate::net::RadarLocModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletLossSpec {
    pub margin: f64,
}

impl Default for TripletLossSpec {
    fn default() -> Self {
        TripletLossSpec { margin: 0.2 }
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// `max(d(a, p) - d(a, n) + margin, 0)` with Euclidean `d`.
pub fn triplet_loss(anchor: &[f32], positive: &[f32], negative: &[f32], spec: &TripletLossSpec) -> Result<f64> {
    ensure!(
        anchor.len() == positive.len() && anchor.len() == negative.len(),
        "triplet_loss: descriptor lengths {} / {} / {}",
        anchor.len(),
        positive.len(),
        negative.len()
    );
    Ok((euclidean(anchor, positive) - euclidean(anchor, negative) + spec.margin).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triple {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiningOutcome {
    pub triples: Vec<Triple>,
    /// Anchors without an in-batch positive or negative.
    pub skipped: usize,
}

/// For every anchor with an in-batch positive and negative, pairs it with
/// its positive and with the dissimilar element whose descriptor is closest.
///
/// The positive is `designated[i]` when given (and similar), otherwise the
/// lowest-index similar element. Ties between negatives go to the lowest index.
pub fn batch_hard_mine(
    descriptors: &Tensor<f32>,
    labels: &SimilarityRelation,
    designated: Option<&[Option<usize>]>,
) -> Result<MiningOutcome> {
    let (n, _) = descriptors.dims2()?;
    ensure!(
        labels.rows() == n && labels.cols() == n,
        "batch_hard_mine: relation is {}x{}, batch has {n} descriptors",
        labels.rows(),
        labels.cols()
    );
    if let Some(d) = designated {
        ensure!(d.len() == n, "batch_hard_mine: {} designated positives for {n} anchors", d.len());
    }
    let mut triples = Vec::new();
    let mut skipped = 0;
    for i in 0..n {
        let designated_pos = designated
            .and_then(|d| d[i])
            .filter(|&j| j != i && j < n && labels.get(i, j) == PairLabel::Similar);
        let positive = designated_pos.or_else(|| (0..n).find(|&j| j != i && labels.get(i, j) == PairLabel::Similar));
        let mut hardest: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == i || labels.get(i, j) != PairLabel::Dissimilar {
                continue;
            }
            let d = euclidean(descriptors.row(i), descriptors.row(j));
            if hardest.is_none_or(|(_, best)| d < best) {
                hardest = Some((j, d));
            }
        }
        match (positive, hardest) {
            (Some(p), Some((neg, _))) => triples.push(Triple {
                anchor: i,
                positive: p,
                negative: neg,
            }),
            _ => skipped += 1,
        }
    }
    Ok(MiningOutcome { triples, skipped })
}

/// Records the mean triplet loss over `triples` on the tape.
pub fn triplet_loss_on_tape(tape: &mut Tape<f32>, descriptors: Var, triples: &[Triple], spec: &TripletLossSpec) -> Result<Var> {
    ensure!(!triples.is_empty(), "triplet loss over zero triples");
    let a: Vec<usize> = triples.iter().map(|t| t.anchor).collect();
    let p: Vec<usize> = triples.iter().map(|t| t.positive).collect();
    let n: Vec<usize> = triples.iter().map(|t| t.negative).collect();
    let av = tape.gather_rows(descriptors, &a)?;
    let pv = tape.gather_rows(descriptors, &p)?;
    let nv = tape.gather_rows(descriptors, &n)?;
    let dp = tape.row_distance(av, pv)?;
    let dn = tape.row_distance(av, nv)?;
    let diff = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(diff, spec.margin as f32)?;
    let hinge = tape.relu(shifted)?;
    tape.mean(hinge)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub erase_probability: f64,
    /// Erased area as a fraction of the image, drawn uniformly from this range.
    pub erase_area_fraction: (f64, f64),
    /// Height/width ratio of the erased rectangle, drawn log-uniformly.
    pub erase_aspect: (f64, f64),
    pub cyclic_shift: bool,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            erase_probability: 0.5,
            erase_area_fraction: (0.02, 0.2),
            erase_aspect: (0.3, 3.3),
            cyclic_shift: true,
        }
    }
}

/// Concrete random choices of one augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    /// (first row, first column, rows, columns) zeroed before the roll.
    pub erase: Option<(usize, usize, usize, usize)>,
    pub shift: usize,
}

impl AugmentationSpec {
    pub fn draw<R: Rng>(&self, angular: usize, radial: usize, rng: &mut R) -> AugmentDraw {
        let mut erase = None;
        if rng.random::<f64>() < self.erase_probability {
            let area = (angular * radial) as f64;
            for _ in 0..10 {
                let (lo, hi) = self.erase_area_fraction;
                let target = area * if hi > lo { rng.random_range(lo..hi) } else { lo };
                let (alo, ahi) = (self.erase_aspect.0.ln(), self.erase_aspect.1.ln());
                let ratio = if ahi > alo { rng.random_range(alo..ahi) } else { alo }.exp();
                let h = (target * ratio).sqrt().round() as usize;
                let w = (target / ratio).sqrt().round() as usize;
                if h >= 1 && w >= 1 && h <= angular && w <= radial {
                    let a0 = rng.random_range(0..=angular - h);
                    let r0 = rng.random_range(0..=radial - w);
                    erase = Some((a0, r0, h, w));
                    break;
                }
            }
        }
        let shift = if self.cyclic_shift { rng.random_range(0..angular) } else { 0 };
        AugmentDraw { erase, shift }
    }
}

pub fn apply_augmentation(img: &PolarImage, draw: &AugmentDraw) -> PolarImage {
    let mut out = img.clone();
    if let Some((a0, r0, h, w)) = draw.erase {
        let radial = out.radial();
        for a in a0..a0 + h {
            out.data_mut()[a * radial + r0..a * radial + r0 + w].fill(0.0);
        }
    }
    if draw.shift == 0 {
        out
    } else {
        out.roll_angular(draw.shift as isize)
    }
}

/// Random erasing followed by a random cyclic roll along the angular axis.
pub fn augment<R: Rng>(img: &PolarImage, spec: &AugmentationSpec, rng: &mut R) -> PolarImage {
    let draw = spec.draw(img.angular(), img.radial(), rng);
    apply_augmentation(img, &draw)
}

/// Builds batches of (anchor, positive) pairs. Each epoch visits the
/// readings in random order; a reading not yet used is paired with a
/// random unused reading within the positive radius (or any positive if
/// all are used). Batches are laid out `[a0, p0, a1, p1, ...]`.
#[derive(Clone, Debug)]
pub struct PairSampler {
    positives: Vec<Vec<usize>>,
    batch_size: usize,
}

impl PairSampler {
    pub fn new(poses: &[Pose], thresholds: &PlaceThresholds, batch_size: usize) -> Result<Self> {
        ensure!(
            batch_size >= 4 && batch_size % 2 == 0,
            "batch size must be even and at least 4, got {batch_size}"
        );
        let positives = poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                poses
                    .iter()
                    .enumerate()
                    .filter(|&(j, q)| j != i && thresholds.label(p.planar_distance(q)) == PairLabel::Similar)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        Ok(PairSampler { positives, batch_size })
    }

    pub fn epoch_batches<R: Rng>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let n = self.positives.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut used = vec![false; n];
        let mut pairs = Vec::new();
        for i in order {
            if used[i] || self.positives[i].is_empty() {
                continue;
            }
            let free: Vec<usize> = self.positives[i].iter().copied().filter(|&j| !used[j]).collect();
            let pool = if free.is_empty() { &self.positives[i] } else { &free };
            let j = pool[rng.random_range(0..pool.len())];
            used[i] = true;
            used[j] = true;
            pairs.push((i, j));
        }
        pairs
            .chunks(self.batch_size / 2)
            .filter(|c| c.len() >= 2)
            .map(|c| c.iter().flat_map(|&(a, p)| [a, p]).collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: TripletLossSpec,
    pub thresholds: PlaceThresholds,
    pub augmentation: AugmentationSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            loss: TripletLossSpec::default(),
            thresholds: PlaceThresholds::default(),
            augmentation: AugmentationSpec::default(),
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction of mined triples with a non-zero hinge.
    pub active_fraction: f64,
    pub triples: usize,
    pub skipped: usize,
    pub batches: usize,
    pub wall_seconds: f64,
}

/// One pass over the training readings: augment, forward, mine, average
/// the loss over mined triples, backpropagate and take an Adam step.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<R: Rng>(
    model: &mut RadarLocModel<f32>,
    images: &[PolarImage],
    poses: &[Pose],
    sampler: &PairSampler,
    optimizer: &mut AdamState<f32>,
    config: &TrainConfig,
    epoch: usize,
    rng: &mut R,
) -> Result<EpochStats> {
    ensure!(images.len() == poses.len(), "train_epoch: {} images vs {} poses", images.len(), poses.len());
    let start = Instant::now();
    let batches = sampler.epoch_batches(rng);
    let mut loss_sum = 0.0;
    let (mut triples_total, mut active, mut skipped) = (0usize, 0usize, 0usize);
    for batch in &batches {
        let augmented: Vec<PolarImage> = batch
            .iter()
            .map(|&i| augment(&images[i], &config.augmentation, rng))
            .collect();
        let x = PolarImage::batch(&augmented)?;
        let batch_poses: Vec<Pose> = batch.iter().map(|&i| poses[i]).collect();
        let relation = SimilarityRelation::from_poses(&batch_poses, &batch_poses, &config.thresholds);
        let partners: Vec<Option<usize>> = (0..batch.len()).map(|k| Some(k ^ 1)).collect();

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut pass = model.forward(&mut tape, xv, Mode::Train, true)?;
        model.commit_stats(&mut pass);
        let mined = batch_hard_mine(tape.value(pass.descriptor), &relation, Some(&partners))?;
        skipped += mined.skipped;
        if mined.triples.is_empty() {
            continue;
        }
        let desc = tape.value(pass.descriptor).clone();
        active += mined
            .triples
            .iter()
            .filter(|t| {
                triplet_loss(desc.row(t.anchor), desc.row(t.positive), desc.row(t.negative), &config.loss)
                    .map(|l| l > 0.0)
                    .unwrap_or(false)
            })
            .count();
        triples_total += mined.triples.len();
        let loss = triplet_loss_on_tape(&mut tape, pass.descriptor, &mined.triples, &config.loss)?;
        let value = tape.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: loss became {value}")));
        }
        loss_sum += value;
        let grads = tape.backward(loss)?;
        let param_grads = model.param_grads(&pass, &grads);
        adam_step(model.params_mut(), &param_grads, optimizer)?;
        model.clamp_gem();
    }
    Ok(EpochStats {
        epoch,
        mean_loss: if batches.is_empty() { 0.0 } else { loss_sum / batches.len() as f64 },
        active_fraction: if triples_total == 0 { 0.0 } else { active as f64 / triples_total as f64 },
        triples: triples_total,
        skipped,
        batches: batches.len(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Full training run. `on_epoch` sees each epoch's stats as they complete.
pub fn train(
    model: &mut RadarLocModel<f32>,
    images: &[PolarImage],
    poses: &[Pose],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let sampler = PairSampler::new(poses, &config.thresholds, config.batch_size)?;
    let mut optimizer = AdamState::with_lr(model.params(), config.lr as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0x7261_696e);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let stats = train_epoch(model, images, poses, &sampler, &mut optimizer, config, epoch, &mut rng)?;
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}
