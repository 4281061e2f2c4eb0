//! Polar scans, poses, traversals and the place-similarity relation.

mod ingest;
mod io;
mod synth;

pub use ingest::{filter_readings, ingest, normalize_min_max, resample_bilinear, IngestRules};
pub use io::{
    read_pgm, read_plsc, read_poses_csv, read_scan_file, read_traversal_dir, write_plsc, write_poses_csv,
    write_traversal_dir, POSES_FILE,
};
pub use synth::{generate_synthetic, render_scan, Landmark, SyntheticDataset, SyntheticWorld, SyntheticWorldSpec};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{ensure, Result};

/// Single-channel polar image: rows are azimuth bins over [0, 360),
/// columns are range bins.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarImage {
    angular: usize,
    radial: usize,
    data: Vec<f32>,
}

impl PolarImage {
    pub fn new(angular: usize, radial: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(angular > 0 && radial > 0, "polar image extents must be positive");
        ensure!(
            data.len() == angular * radial,
            "polar image {angular}x{radial} needs {} values, got {}",
            angular * radial,
            data.len()
        );
        Ok(PolarImage { angular, radial, data })
    }

    pub fn zeros(angular: usize, radial: usize) -> Self {
        PolarImage {
            angular,
            radial,
            data: vec![0.0; angular * radial],
        }
    }

    pub fn angular(&self) -> usize {
        self.angular
    }

    pub fn radial(&self) -> usize {
        self.radial
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, a: usize, r: usize) -> f32 {
        self.data[a * self.radial + r]
    }

    pub fn row(&self, a: usize) -> &[f32] {
        &self.data[a * self.radial..(a + 1) * self.radial]
    }

    /// Cyclic roll along the angular axis: row `a` moves to `a + shift`.
    pub fn roll_angular(&self, shift: isize) -> PolarImage {
        let s = shift.rem_euclid(self.angular as isize) as usize;
        let mut data = vec![0.0; self.data.len()];
        for a in 0..self.angular {
            let dst = (a + s) % self.angular;
            data[dst * self.radial..(dst + 1) * self.radial].copy_from_slice(self.row(a));
        }
        PolarImage {
            angular: self.angular,
            radial: self.radial,
            data,
        }
    }

    /// Stacks images into an N x 1 x A x R batch.
    pub fn batch<'a>(images: impl IntoIterator<Item = &'a PolarImage>) -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        let mut dims = None;
        let mut n = 0;
        for img in images {
            let d = (img.angular, img.radial);
            ensure!(dims.is_none_or(|prev| prev == d), "batch of differently sized images");
            dims = Some(d);
            data.extend_from_slice(&img.data);
            n += 1;
        }
        let (a, r) = dims.ok_or_else(|| crate::Error::contract("empty image batch"))?;
        Tensor::new(&[n, 1, a, r], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolarScan {
    pub id: String,
    pub timestamp: f64,
    pub image: PolarImage,
}

/// Planar ground-truth pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub timestamp: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn planar_distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraversalRole {
    Map,
    Query,
    Train,
}

impl TraversalRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            TraversalRole::Map => "map",
            TraversalRole::Query => "query",
            TraversalRole::Train => "train",
        }
    }
}

/// One pass along a route: scans paired with their ground-truth poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Traversal {
    pub name: String,
    pub role: TraversalRole,
    pub scans: Vec<PolarScan>,
    pub poses: Vec<Pose>,
}

impl Traversal {
    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    pub fn images(&self) -> impl Iterator<Item = &PolarImage> {
        self.scans.iter().map(|s| &s.image)
    }
}

/// Place relation between two readings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairLabel {
    Similar,
    Dissimilar,
    /// Between the two radii: used neither as positive nor as negative.
    Excluded,
}

/// Distance thresholds defining similar (positive) and dissimilar (negative) readings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaceThresholds {
    pub positive_radius_m: f64,
    pub negative_radius_m: f64,
}

impl Default for PlaceThresholds {
    fn default() -> Self {
        PlaceThresholds {
            positive_radius_m: 5.0,
            negative_radius_m: 20.0,
        }
    }
}

impl PlaceThresholds {
    pub fn label(&self, distance_m: f64) -> PairLabel {
        if distance_m <= self.positive_radius_m {
            PairLabel::Similar
        } else if distance_m >= self.negative_radius_m {
            PairLabel::Dissimilar
        } else {
            PairLabel::Excluded
        }
    }
}

/// Dense pairwise labels between two pose lists (rows: first list).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityRelation {
    rows: usize,
    cols: usize,
    labels: Vec<PairLabel>,
}

impl SimilarityRelation {
    pub fn from_poses(a: &[Pose], b: &[Pose], thresholds: &PlaceThresholds) -> Self {
        let labels = a
            .iter()
            .flat_map(|p| b.iter().map(move |q| thresholds.label(p.planar_distance(q))))
            .collect();
        SimilarityRelation {
            rows: a.len(),
            cols: b.len(),
            labels,
        }
    }

    /// Builds a relation directly from labels (row-major).
    pub fn from_labels(rows: usize, cols: usize, labels: Vec<PairLabel>) -> Result<Self> {
        ensure!(labels.len() == rows * cols, "relation needs {} labels", rows * cols);
        Ok(SimilarityRelation { rows, cols, labels })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> PairLabel {
        self.labels[i * self.cols + j]
    }
}

/// Labels every (t1, t2) reading pair as similar, dissimilar or excluded.
pub fn label_pairs(t1: &Traversal, t2: &Traversal, thresholds: &PlaceThresholds) -> SimilarityRelation {
    SimilarityRelation::from_poses(&t1.poses, &t2.poses, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(x: f64) -> Pose {
        Pose {
            timestamp: 0.0,
            x,
            y: 0.0,
            yaw: 0.0,
        }
    }

    #[test]
    fn thresholds_follow_protocol() {
        let t = PlaceThresholds::default();
        assert_eq!(t.label(3.0), PairLabel::Similar);
        assert_eq!(t.label(5.0), PairLabel::Similar);
        assert_eq!(t.label(25.0), PairLabel::Dissimilar);
        assert_eq!(t.label(20.0), PairLabel::Dissimilar);
        assert_eq!(t.label(10.0), PairLabel::Excluded);
        assert_eq!(t.label(5.0001), PairLabel::Excluded);
    }

    #[test]
    fn relation_is_symmetric() {
        let a: Vec<Pose> = [0.0, 3.0, 12.0, 40.0].iter().map(|&x| at(x)).collect();
        let b: Vec<Pose> = [1.0, 30.0, 17.0].iter().map(|&x| at(x)).collect();
        let t = PlaceThresholds::default();
        let ab = SimilarityRelation::from_poses(&a, &b, &t);
        let ba = SimilarityRelation::from_poses(&b, &a, &t);
        for i in 0..a.len() {
            for j in 0..b.len() {
                assert_eq!(ab.get(i, j), ba.get(j, i));
            }
        }
    }

    #[test]
    fn roll_round_trips() {
        let img = PolarImage::new(4, 2, (0..8).map(|v| v as f32).collect()).unwrap();
        assert_eq!(img.roll_angular(1).row(1), img.row(0));
        assert_eq!(img.roll_angular(3).roll_angular(-3), img);
        assert_eq!(img.roll_angular(4), img);
    }
}
