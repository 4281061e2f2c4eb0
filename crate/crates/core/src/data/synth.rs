//! Synthetic polar-scan world.
//!
//! Circular landmarks are scattered over a square world. A route loops
//! through the evaluation half (map and query traversals) and another
//! through the training half. Each scan is rendered by casting one beam per
//! azimuth bin against the landmark disks and depositing a Gaussian range
//! blob per hit, nearer hits brighter, then adding noise.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::{PolarImage, PolarScan, Pose, Traversal, TraversalRole};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldSpec {
    pub seed: u64,
    pub extent_m: f64,
    pub landmark_count: usize,
    pub landmark_radius_m: (f64, f64),
    pub max_range_m: f64,
    pub angular_bins: usize,
    pub radial_bins: usize,
    pub noise_sigma: f64,
    pub speckle_probability: f64,
    /// Scans per training pass; the training traversal holds two passes.
    pub train_scans_per_pass: usize,
    pub train_spacing_m: f64,
    pub map_scans: usize,
    pub query_scans: usize,
    pub eval_spacing_m: f64,
    /// Uniform lateral offset of every pose from the route centreline.
    pub lateral_jitter_m: f64,
    /// Per-scan heading noise on top of each traversal's heading offset.
    pub heading_jitter_deg: f64,
    /// Objects placed at random around each reading and absent from
    /// every other reading (vehicles, pedestrians).
    pub transient_objects: usize,
    pub transient_range_m: (f64, f64),
    /// Log-normal sigma of the per-reading, per-landmark return strength
    /// (radar cross-section fluctuation); 0 disables it.
    pub rcs_sigma: f64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        SyntheticWorldSpec {
            seed: 7,
            extent_m: 1000.0,
            landmark_count: 1200,
            landmark_radius_m: (0.5, 3.0),
            max_range_m: 164.0,
            angular_bins: 128,
            radial_bins: 32,
            noise_sigma: 0.02,
            speckle_probability: 0.002,
            train_scans_per_pass: 300,
            train_spacing_m: 4.0,
            map_scans: 200,
            query_scans: 200,
            eval_spacing_m: 2.0,
            lateral_jitter_m: 0.0,
            heading_jitter_deg: 3.0,
            transient_objects: 0,
            transient_range_m: (5.0, 80.0),
            rcs_sigma: 0.0,
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic world: {m}")));
        if self.landmark_count == 0 {
            return bad("landmark count must be positive");
        }
        if !(self.extent_m > 0.0 && self.max_range_m > 0.0) {
            return bad("extent and max range must be positive");
        }
        let (lo, hi) = self.landmark_radius_m;
        if !(lo > 0.0 && hi >= lo) {
            return bad("landmark radius range must be positive and ordered");
        }
        if self.angular_bins == 0 || self.radial_bins == 0 {
            return bad("image extents must be positive");
        }
        if self.train_scans_per_pass == 0 || self.map_scans == 0 || self.query_scans == 0 {
            return bad("traversals must be non-empty");
        }
        if !(self.train_spacing_m > 0.0 && self.eval_spacing_m > 0.0) {
            return bad("pose spacing must be positive");
        }
        if !(self.noise_sigma >= 0.0 && (0.0..=1.0).contains(&self.speckle_probability)) {
            return bad("noise parameters out of range");
        }
        let (tlo, thi) = self.transient_range_m;
        if self.transient_objects > 0 && !(tlo > 2.0 && thi > tlo) {
            return bad("transient range must exceed 2 m and be ordered");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub spec: SyntheticWorldSpec,
    pub landmarks: Vec<Landmark>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub world: SyntheticWorld,
    pub train: Traversal,
    pub map: Traversal,
    pub query: Traversal,
}

/// A closed, smoothly wobbling loop resampled by arc length.
struct Route {
    points: Vec<(f64, f64)>,
    cumulative: Vec<f64>,
}

impl Route {
    fn wobbly_loop(center: (f64, f64), length: f64, phase: f64) -> Self {
        let base = length / TAU;
        let samples = 4096;
        let mut points: Vec<(f64, f64)> = (0..=samples)
            .map(|i| {
                let th = TAU * i as f64 / samples as f64;
                let r = base * (1.0 + 0.25 * (3.0 * th + phase).sin());
                (center.0 + r * th.cos(), center.1 + r * th.sin())
            })
            .collect();
        // Rescale so the loop length matches the request.
        let raw: f64 = points.windows(2).map(|w| dist(w[0], w[1])).sum();
        let k = length / raw;
        for p in &mut points {
            *p = (center.0 + (p.0 - center.0) * k, center.1 + (p.1 - center.1) * k);
        }
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let last = *cumulative.last().expect("non-empty");
            cumulative.push(last + dist(w[0], w[1]));
        }
        Route { points, cumulative }
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }

    /// Position and unit tangent at arc length `s` (wrapping around the loop).
    fn at(&self, s: f64) -> ((f64, f64), (f64, f64)) {
        let s = s.rem_euclid(self.length());
        let i = self.cumulative.partition_point(|&c| c <= s).clamp(1, self.points.len() - 1);
        let (a, b) = (self.points[i - 1], self.points[i]);
        let seg = self.cumulative[i] - self.cumulative[i - 1];
        let t = if seg > 0.0 { (s - self.cumulative[i - 1]) / seg } else { 0.0 };
        let p = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        let d = dist(a, b).max(1e-12);
        (p, ((b.0 - a.0) / d, (b.1 - a.1) / d))
    }

    fn min_distance(&self, q: (f64, f64)) -> f64 {
        self.points.iter().map(|&p| dist(p, q)).fold(f64::INFINITY, f64::min)
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Noise-free rendering of the scan seen from `pose`.
///
/// Row `a` looks along world bearing `yaw + 2*pi*a/A`, so adding `2*pi*k/A`
/// to the yaw rolls the image by `-k` rows.
pub fn render_scan(world: &SyntheticWorld, pose: &Pose) -> Result<PolarImage> {
    render_landmarks(&world.spec, &world.landmarks, &[], None, pose)
}

/// Renders static landmarks plus per-scan transient objects.
fn render_landmarks(
    spec: &SyntheticWorldSpec,
    landmarks: &[Landmark],
    transients: &[Landmark],
    gains: Option<&[f64]>,
    pose: &Pose,
) -> Result<PolarImage> {
    let (na, nr) = (spec.angular_bins, spec.radial_bins);
    let bin_m = spec.max_range_m / nr as f64;
    let beam_sigma = 0.5; // in azimuth bins
    let bins_per_rad = na as f64 / TAU;

    struct Hit {
        row: usize,
        range: f64,
        weight: f64,
        gain: f64,
        spread: f64,
    }
    let mut hits: Vec<Hit> = Vec::new();
    let mut visible = 0usize;
    for (k, lm) in landmarks.iter().chain(transients).enumerate() {
        let (dx, dy) = (lm.x - pose.x, lm.y - pose.y);
        let rho = dx.hypot(dy);
        if rho <= lm.radius || rho - lm.radius >= spec.max_range_m {
            continue;
        }
        if k < landmarks.len() {
            visible += 1;
        }
        // Bearing relative to the sensor, measured in azimuth bins.
        let rel_bins = (dy.atan2(dx) - pose.yaw).rem_euclid(TAU) * bins_per_rad;
        let half_width = (lm.radius / rho).asin() * bins_per_rad;
        let reach = half_width + 4.0 * beam_sigma;
        let first = (rel_bins - reach).floor() as isize;
        let last = (rel_bins + reach).ceil() as isize;
        for a in first..=last {
            let delta_bins = a as f64 - rel_bins;
            let outside = (delta_bins.abs() - half_width).max(0.0);
            let weight = (-0.5 * (outside / beam_sigma).powi(2)).exp();
            if weight < 1e-3 {
                continue;
            }
            let delta = delta_bins / bins_per_rad;
            let perp = rho * delta.sin();
            let range = if perp.abs() < lm.radius {
                rho * delta.cos() - (lm.radius * lm.radius - perp * perp).sqrt()
            } else {
                rho * delta.cos()
            };
            if !(0.0..spec.max_range_m).contains(&range) {
                continue;
            }
            hits.push(Hit {
                row: a.rem_euclid(na as isize) as usize,
                range,
                weight,
                gain: gains.and_then(|g| g.get(k)).copied().unwrap_or(1.0),
                spread: 0.5 * bin_m + 0.5 * lm.radius,
            });
        }
    }
    if visible == 0 {
        return Err(Error::Data(format!(
            "no landmark within {} m of pose ({:.1}, {:.1})",
            spec.max_range_m, pose.x, pose.y
        )));
    }
    // Per beam, returns dim with range and with every nearer return.
    hits.sort_by(|a, b| a.row.cmp(&b.row).then(a.range.total_cmp(&b.range)));
    let mut img = vec![0.0f64; na * nr];
    let mut order = 0;
    for (k, h) in hits.iter().enumerate() {
        order = if k > 0 && hits[k - 1].row == h.row { order + 1 } else { 0 };
        let amp = h.gain * h.weight * 0.7f64.powi(order) * (0.4 + 0.6 * (-h.range / spec.max_range_m).exp());
        let row = &mut img[h.row * nr..(h.row + 1) * nr];
        let lo = (((h.range - 4.0 * h.spread) / bin_m).floor().max(0.0)) as usize;
        let hi = (((h.range + 4.0 * h.spread) / bin_m).ceil() as usize).min(nr);
        for (r, v) in row.iter_mut().enumerate().take(hi).skip(lo) {
            let centre = (r as f64 + 0.5) * bin_m;
            *v += amp * (-0.5 * ((centre - h.range) / h.spread).powi(2)).exp();
        }
    }
    let data = img.iter().map(|&v| v.min(1.0) as f32).collect();
    PolarImage::new(na, nr, data)
}

fn add_noise<R: Rng>(img: &mut PolarImage, spec: &SyntheticWorldSpec, rng: &mut R) {
    let normal = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid sigma");
    for v in img.data_mut() {
        let mut x = *v as f64 + if spec.noise_sigma > 0.0 { normal.sample(rng) } else { 0.0 };
        if rng.random::<f64>() < spec.speckle_probability {
            x = rng.random_range(0.5..1.0);
        }
        *v = x.clamp(0.0, 1.0) as f32;
    }
}

struct TraversalPlan<'a> {
    name: &'a str,
    role: TraversalRole,
    route: &'a Route,
    arc_positions: Vec<f64>,
    t0: f64,
}

fn render_traversal(world: &SyntheticWorld, plan: TraversalPlan, rng: &mut ChaCha8Rng) -> Result<Traversal> {
    let spec = &world.spec;
    let heading_offset = rng.random_range(0.0..TAU);
    let heading_noise = Normal::new(0.0, spec.heading_jitter_deg.to_radians().max(0.0)).expect("valid sigma");
    let mut scans = Vec::with_capacity(plan.arc_positions.len());
    let mut poses = Vec::with_capacity(plan.arc_positions.len());
    for (i, &s) in plan.arc_positions.iter().enumerate() {
        let (p, tangent) = plan.route.at(s);
        let lateral = if spec.lateral_jitter_m > 0.0 {
            rng.random_range(-spec.lateral_jitter_m..=spec.lateral_jitter_m)
        } else {
            0.0
        };
        let (nx, ny) = (-tangent.1, tangent.0);
        let jitter = if spec.heading_jitter_deg > 0.0 { heading_noise.sample(rng) } else { 0.0 };
        let pose = Pose {
            timestamp: plan.t0 + i as f64,
            x: p.0 + lateral * nx,
            y: p.1 + lateral * ny,
            yaw: (tangent.1.atan2(tangent.0) + heading_offset + jitter).rem_euclid(TAU),
        };
        let transients: Vec<Landmark> = (0..spec.transient_objects)
            .map(|_| {
                let bearing = rng.random_range(0.0..TAU);
                let range = rng.random_range(spec.transient_range_m.0..spec.transient_range_m.1);
                Landmark {
                    x: pose.x + range * bearing.cos(),
                    y: pose.y + range * bearing.sin(),
                    radius: rng.random_range(0.5..2.0),
                }
            })
            .collect();
        let gains: Vec<f64> = if spec.rcs_sigma > 0.0 {
            let ln = LogNormal::new(-0.5 * spec.rcs_sigma * spec.rcs_sigma, spec.rcs_sigma).expect("valid sigma");
            (0..world.landmarks.len()).map(|_| ln.sample(rng)).collect()
        } else {
            Vec::new()
        };
        let gains = (!gains.is_empty()).then_some(gains.as_slice());
        let mut image = render_landmarks(spec, &world.landmarks, &transients, gains, &pose)?;
        add_noise(&mut image, spec, rng);
        scans.push(PolarScan {
            id: format!("{}_{i:05}", plan.name),
            timestamp: pose.timestamp,
            image,
        });
        poses.push(pose);
    }
    Ok(Traversal {
        name: plan.name.to_string(),
        role: plan.role,
        scans,
        poses,
    })
}

/// Builds the world and renders the train, map and query traversals.
///
/// Map and query revisit the same loop in the evaluation half of the world
/// with independent heading offsets, lateral offsets and noise. The training
/// loop lies in the other half and is driven twice.
pub fn generate_synthetic(spec: &SyntheticWorldSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = spec.extent_m;
    let sub = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(stream);
        r
    };
    let train_len = spec.train_scans_per_pass as f64 * spec.train_spacing_m;
    let eval_len = spec.map_scans.max(spec.query_scans) as f64 * spec.eval_spacing_m;
    let train_route = Route::wobbly_loop((0.25 * e, 0.5 * e), train_len, rng.random_range(0.0..TAU));
    let eval_route = Route::wobbly_loop((0.75 * e, 0.5 * e), eval_len, rng.random_range(0.0..TAU));

    let mut landmarks = Vec::with_capacity(spec.landmark_count);
    let mut lm_rng = sub(1);
    let (rlo, rhi) = spec.landmark_radius_m;
    let mut attempts = 0;
    while landmarks.len() < spec.landmark_count {
        attempts += 1;
        if attempts > 1000 * spec.landmark_count {
            return Err(Error::Config("could not place landmarks clear of the routes".into()));
        }
        let lm = Landmark {
            x: lm_rng.random_range(0.0..e),
            y: lm_rng.random_range(0.0..e),
            radius: if rhi > rlo { lm_rng.random_range(rlo..rhi) } else { rlo },
        };
        let clearance = lm.radius + spec.lateral_jitter_m + 2.0;
        if train_route.min_distance((lm.x, lm.y)) < clearance || eval_route.min_distance((lm.x, lm.y)) < clearance {
            continue;
        }
        landmarks.push(lm);
    }
    let world = SyntheticWorld {
        spec: spec.clone(),
        landmarks,
    };

    let ts = spec.train_spacing_m;
    let mut train_arcs: Vec<f64> = (0..spec.train_scans_per_pass).map(|i| i as f64 * ts).collect();
    train_arcs.extend((0..spec.train_scans_per_pass).map(|i| (i as f64 + 0.5) * ts));
    let es = spec.eval_spacing_m;
    let map_arcs = (0..spec.map_scans).map(|i| i as f64 * es).collect();
    let query_arcs = (0..spec.query_scans).map(|i| (i as f64 + 0.5) * es).collect();

    let train = {
        // Two passes with independent headings, stitched into one traversal.
        let per = spec.train_scans_per_pass;
        let mut first = render_traversal(
            &world,
            TraversalPlan {
                name: "train",
                role: TraversalRole::Train,
                route: &train_route,
                arc_positions: train_arcs[..per].to_vec(),
                t0: 0.0,
            },
            &mut sub(2),
        )?;
        let second = render_traversal(
            &world,
            TraversalPlan {
                name: "train_b",
                role: TraversalRole::Train,
                route: &train_route,
                arc_positions: train_arcs[per..].to_vec(),
                t0: per as f64 + 100.0,
            },
            &mut sub(3),
        )?;
        first.scans.extend(second.scans);
        first.poses.extend(second.poses);
        first
    };
    let map = render_traversal(
        &world,
        TraversalPlan {
            name: "map",
            role: TraversalRole::Map,
            route: &eval_route,
            arc_positions: map_arcs,
            t0: 0.0,
        },
        &mut sub(4),
    )?;
    let query = render_traversal(
        &world,
        TraversalPlan {
            name: "query",
            role: TraversalRole::Query,
            route: &eval_route,
            arc_positions: query_arcs,
            t0: 0.0,
        },
        &mut sub(5),
    )?;
    Ok(SyntheticDataset { world, train, map, query })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticWorldSpec {
        SyntheticWorldSpec {
            train_scans_per_pass: 6,
            map_scans: 8,
            query_scans: 8,
            ..SyntheticWorldSpec::default()
        }
    }

    #[test]
    fn equal_seeds_are_bit_identical() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticWorldSpec { seed: 8, ..small_spec() }).unwrap();
        assert_ne!(a.map, c.map);
    }

    #[test]
    fn zero_landmarks_is_rejected() {
        let spec = SyntheticWorldSpec {
            landmark_count: 0,
            ..small_spec()
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn empty_scene_is_an_error() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let far = Pose {
            timestamp: 0.0,
            x: 1.0e5,
            y: 1.0e5,
            yaw: 0.0,
        };
        assert!(matches!(render_scan(&ds.world, &far), Err(Error::Data(_))));
    }

    #[test]
    fn training_region_is_disjoint_from_evaluation_region() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let half = ds.world.spec.extent_m / 2.0;
        assert!(ds.train.poses.iter().all(|p| p.x < half));
        assert!(ds.map.poses.iter().chain(&ds.query.poses).all(|p| p.x > half));
        assert_eq!(ds.train.len(), 12);
    }

    #[test]
    fn scans_are_within_unit_range() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        for scan in ds.map.scans.iter().chain(&ds.query.scans) {
            assert!(scan.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(scan.image.data().iter().any(|&v| v > 0.2));
        }
    }
}
