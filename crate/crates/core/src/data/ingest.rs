use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::read_scan_file;
use super::{PolarImage, PolarScan, Pose, Traversal, TraversalRole};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestRules {
    /// Readings without a pose this close in time are dropped.
    pub pose_tolerance_s: f64,
    /// Readings closer than this to the previously kept one are dropped.
    pub min_displacement_m: f64,
    pub angular_bins: usize,
    pub radial_bins: usize,
}

impl Default for IngestRules {
    fn default() -> Self {
        IngestRules {
            pose_tolerance_s: 1.0,
            min_displacement_m: 0.1,
            angular_bins: 384,
            radial_bins: 128,
        }
    }
}

fn nearest_pose(poses: &[Pose], t: f64) -> Option<usize> {
    if poses.is_empty() {
        return None;
    }
    let i = poses.partition_point(|p| p.timestamp < t);
    let candidates = [i.checked_sub(1), (i < poses.len()).then_some(i)];
    candidates
        .into_iter()
        .flatten()
        .min_by(|&a, &b| {
            let (da, db) = ((poses[a].timestamp - t).abs(), (poses[b].timestamp - t).abs());
            da.total_cmp(&db).then(a.cmp(&b))
        })
}

/// Matches time-sorted readings to their nearest pose and applies the
/// tolerance and stationarity rules. Returns kept `(reading, pose)` index pairs.
pub fn filter_readings(timestamps: &[f64], poses: &[Pose], rules: &IngestRules) -> Vec<(usize, usize)> {
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for (i, &t) in timestamps.iter().enumerate() {
        let Some(p) = nearest_pose(poses, t) else { continue };
        if (poses[p].timestamp - t).abs() > rules.pose_tolerance_s {
            continue;
        }
        if let Some(&(_, last)) = kept.last() {
            if poses[p].planar_distance(&poses[last]) < rules.min_displacement_m {
                continue;
            }
        }
        kept.push((i, p));
    }
    kept
}

/// Bilinear resampling to `angular x radial`; the angular axis wraps around.
pub fn resample_bilinear(img: &PolarImage, angular: usize, radial: usize) -> PolarImage {
    if img.angular() == angular && img.radial() == radial {
        return img.clone();
    }
    let (sa, sr) = (img.angular(), img.radial());
    let scale_a = sa as f64 / angular as f64;
    let scale_r = sr as f64 / radial as f64;
    let mut out = PolarImage::zeros(angular, radial);
    for a in 0..angular {
        let fa = (a as f64 + 0.5) * scale_a - 0.5;
        let a0 = fa.floor();
        let wa = (fa - a0) as f32;
        let a0 = (a0 as isize).rem_euclid(sa as isize) as usize;
        let a1 = (a0 + 1) % sa;
        for r in 0..radial {
            let fr = ((r as f64 + 0.5) * scale_r - 0.5).clamp(0.0, (sr - 1) as f64);
            let r0 = fr.floor() as usize;
            let r1 = (r0 + 1).min(sr - 1);
            let wr = (fr - r0 as f64) as f32;
            let top = img.get(a0, r0) * (1.0 - wr) + img.get(a0, r1) * wr;
            let bot = img.get(a1, r0) * (1.0 - wr) + img.get(a1, r1) * wr;
            out.data_mut()[a * radial + r] = top * (1.0 - wa) + bot * wa;
        }
    }
    out
}

/// Per-image min-max scaling to [0, 1]; constant images become all zeros.
pub fn normalize_min_max(img: &mut PolarImage) {
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    for v in img.data_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// Loads every `.plsc` / `.pgm` scan in `scan_dir`, pairs it with the pose
/// file and produces a filtered, resampled, normalized traversal.
pub fn ingest(
    name: &str,
    role: TraversalRole,
    scan_dir: &Path,
    pose_file: &Path,
    rules: &IngestRules,
) -> Result<Traversal> {
    let poses = super::io::read_poses_csv(pose_file)?;
    let entries = std::fs::read_dir(scan_dir).map_err(|e| Error::from(e).in_file(scan_dir))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::from(e).in_file(scan_dir))?.path();
        if matches!(path.extension().and_then(|e| e.to_str()), Some("plsc" | "pgm")) {
            paths.push(path);
        }
    }
    let mut scans = paths
        .iter()
        .map(|p| read_scan_file(p))
        .collect::<Result<Vec<PolarScan>>>()?;
    scans.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then_with(|| a.id.cmp(&b.id)));
    let timestamps: Vec<f64> = scans.iter().map(|s| s.timestamp).collect();
    let kept = filter_readings(&timestamps, &poses, rules);
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "{name}: no scans left after pose matching and displacement filtering"
        )));
    }
    let mut out_scans = Vec::with_capacity(kept.len());
    let mut out_poses = Vec::with_capacity(kept.len());
    for (si, pi) in kept {
        let scan = &scans[si];
        let mut image = resample_bilinear(&scan.image, rules.angular_bins, rules.radial_bins);
        normalize_min_max(&mut image);
        if image.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("scan {} has non-finite values", scan.id)));
        }
        out_scans.push(PolarScan {
            id: scan.id.clone(),
            timestamp: scan.timestamp,
            image,
        });
        out_poses.push(poses[pi]);
    }
    Ok(Traversal {
        name: name.to_string(),
        role,
        scans: out_scans,
        poses: out_poses,
    })
}
