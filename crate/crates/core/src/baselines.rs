//! Hand-crafted comparison descriptors: ScanContext and Ring key,
//! computed from block averages of the polar image.

use serde::{Deserialize, Serialize};

use crate::data::PolarImage;
use crate::error::{ensure, Result};

/// Sector x ring resolution of the ScanContext matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanContextGrid {
    pub sectors: usize,
    pub rings: usize,
}

impl Default for ScanContextGrid {
    fn default() -> Self {
        ScanContextGrid { sectors: 60, rings: 20 }
    }
}

fn nearest_divisor(n: usize, target: usize) -> usize {
    (1..=n)
        .filter(|d| n % d == 0)
        .min_by_key(|&d| (d.abs_diff(target), d))
        .unwrap_or(1)
}

impl ScanContextGrid {
    /// The divisors of the image extents closest to the canonical
    /// 60 x 20 grid (ties go to the smaller divisor).
    pub fn for_image(angular: usize, radial: usize) -> Self {
        let canonical = ScanContextGrid::default();
        ScanContextGrid {
            sectors: nearest_divisor(angular, canonical.sectors),
            rings: nearest_divisor(radial, canonical.rings),
        }
    }

    pub fn len(&self) -> usize {
        self.sectors * self.rings
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sector-major `sectors x rings` matrix of block means.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanContextDescriptor {
    pub sectors: usize,
    pub rings: usize,
    pub matrix: Vec<f32>,
}

impl ScanContextDescriptor {
    pub fn from_parts(sectors: usize, rings: usize, matrix: Vec<f32>) -> Result<Self> {
        ensure!(
            sectors > 0 && rings > 0 && matrix.len() == sectors * rings,
            "ScanContext matrix of {} values is not {sectors}x{rings}",
            matrix.len()
        );
        Ok(ScanContextDescriptor { sectors, rings, matrix })
    }

    /// The ring vector of one sector.
    pub fn sector(&self, s: usize) -> &[f32] {
        &self.matrix[s * self.rings..(s + 1) * self.rings]
    }
}

pub fn scancontext(image: &PolarImage, grid: ScanContextGrid) -> Result<ScanContextDescriptor> {
    let (a, r) = (image.angular(), image.radial());
    ensure!(
        grid.sectors > 0 && grid.rings > 0 && a % grid.sectors == 0 && r % grid.rings == 0,
        "ScanContext grid {}x{} does not divide the {a}x{r} image",
        grid.sectors,
        grid.rings
    );
    let (bh, bw) = (a / grid.sectors, r / grid.rings);
    let inv = 1.0 / (bh * bw) as f64;
    let mut matrix = Vec::with_capacity(grid.len());
    for s in 0..grid.sectors {
        for ring in 0..grid.rings {
            let mut acc = 0.0f64;
            for row in s * bh..(s + 1) * bh {
                acc += image.row(row)[ring * bw..(ring + 1) * bw].iter().map(|&v| v as f64).sum::<f64>();
            }
            matrix.push((acc * inv) as f32);
        }
    }
    ScanContextDescriptor::from_parts(grid.sectors, grid.rings, matrix)
}

/// Per-ring mean over all angular bins after radial block averaging.
///
/// The angular mean is taken over per-row partial sums accumulated in
/// sorted order, so any cyclic shift of the rows gives identical bits.
pub fn ring_key(image: &PolarImage, rings: usize) -> Result<Vec<f32>> {
    let (a, r) = (image.angular(), image.radial());
    ensure!(rings > 0 && r % rings == 0, "{rings} rings do not divide {r} radial bins");
    let bw = r / rings;
    let inv = 1.0 / (a * bw) as f64;
    Ok((0..rings)
        .map(|ring| {
            let mut row_sums: Vec<f64> = (0..a)
                .map(|row| image.row(row)[ring * bw..(ring + 1) * bw].iter().map(|&v| v as f64).sum())
                .collect();
            row_sums.sort_by(f64::total_cmp);
            (row_sums.iter().sum::<f64>() * inv) as f32
        })
        .collect())
}

/// Ring key of an existing ScanContext matrix: the mean of each ring over sectors.
pub fn ring_key_of(sc: &ScanContextDescriptor) -> Vec<f32> {
    (0..sc.rings)
        .map(|ring| {
            let mut vals: Vec<f64> = (0..sc.sectors).map(|s| sc.sector(s)[ring] as f64).collect();
            vals.sort_by(f64::total_cmp);
            (vals.iter().sum::<f64>() / sc.sectors as f64) as f32
        })
        .collect()
}

fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na > 0.0, nb > 0.0) {
        (false, false) => 0.0,
        // sqrt(na * nb) is exact when na == nb, so identical sectors give exactly 0.
        (true, true) => (1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0),
        _ => 1.0,
    }
}

/// Mean per-sector cosine distance with `d2` rotated by `shift` sectors.
pub fn scancontext_distance_at(d1: &ScanContextDescriptor, d2: &ScanContextDescriptor, shift: usize) -> f64 {
    let n = d1.sectors;
    (0..n)
        .map(|s| cosine_distance(d1.sector(s), d2.sector((s + shift) % n)))
        .sum::<f64>()
        / n as f64
}

/// Minimum over all cyclic sector alignments of the mean per-sector cosine
/// distance. Zero sectors are at distance 0 from zero sectors and 1 from
/// non-zero sectors. The range is [0, 1] for non-negative matrices (and
/// [0, 2] in general).
pub fn scancontext_distance(d1: &ScanContextDescriptor, d2: &ScanContextDescriptor) -> Result<f64> {
    ensure!(
        d1.sectors == d2.sectors && d1.rings == d2.rings,
        "ScanContext shapes differ: {}x{} vs {}x{}",
        d1.sectors,
        d1.rings,
        d2.sectors,
        d2.rings
    );
    Ok((0..d1.sectors)
        .map(|shift| scancontext_distance_at(d1, d2, shift))
        .fold(f64::INFINITY, f64::min))
}

pub fn ringkey_distance(k1: &[f32], k2: &[f32]) -> Result<f64> {
    ensure!(k1.len() == k2.len(), "ring key lengths differ: {} vs {}", k1.len(), k2.len());
    Ok(k1
        .iter()
        .zip(k2)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(a: usize, r: usize, seed: u64) -> PolarImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolarImage::new(a, r, (0..a * r).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn constant_image_gives_constant_key() {
        let img = PolarImage::new(8, 8, vec![0.375; 64]).unwrap();
        assert_eq!(ring_key(&img, 4).unwrap(), vec![0.375; 4]);
    }

    #[test]
    fn ring_key_matches_two_loop_oracle() {
        let img = random_image(8, 8, 3);
        let key = ring_key(&img, 4).unwrap();
        for (ring, &k) in key.iter().enumerate() {
            let mut acc = 0.0;
            for a in 0..8 {
                for r in ring * 2..ring * 2 + 2 {
                    acc += img.get(a, r) as f64;
                }
            }
            assert!((k as f64 - acc / 16.0).abs() < 1e-6);
        }
        assert!(ring_key(&img, 3).is_err());
    }

    #[test]
    fn ring_key_of_scancontext_agrees() {
        let img = random_image(16, 8, 5);
        let sc = scancontext(&img, ScanContextGrid { sectors: 4, rings: 4 }).unwrap();
        let a = ring_key_of(&sc);
        let b = ring_key(&img, 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn ringkey_distance_examples() {
        assert_eq!(ringkey_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(ringkey_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(ringkey_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn shifted_context_is_at_distance_zero() {
        let img = random_image(32, 16, 9);
        let grid = ScanContextGrid { sectors: 8, rings: 4 };
        let d1 = scancontext(&img, grid).unwrap();
        let d2 = scancontext(&img.roll_angular(12), grid).unwrap();
        assert_eq!(scancontext_distance(&d1, &d2).unwrap(), 0.0);
    }

    #[test]
    fn cosine_extremes() {
        let d1 = ScanContextDescriptor::from_parts(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(scancontext_distance(&d1, &d1).unwrap(), 0.0);
        let neg = ScanContextDescriptor::from_parts(2, 2, d1.matrix.iter().map(|v| -v).collect()).unwrap();
        // Against the negation, the aligned shift gives 2 per sector and the
        // swapped shift gives 1 (orthogonal sectors).
        assert_eq!(scancontext_distance_at(&d1, &neg, 0), 2.0);
        assert_eq!(scancontext_distance(&d1, &neg).unwrap(), 1.0);
    }

    #[test]
    fn zero_sector_rules() {
        let z = ScanContextDescriptor::from_parts(2, 2, vec![0.0; 4]).unwrap();
        let nz = ScanContextDescriptor::from_parts(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(scancontext_distance(&z, &z).unwrap(), 0.0);
        assert_eq!(scancontext_distance(&z, &nz).unwrap(), 0.5);
        let other = ScanContextDescriptor::from_parts(3, 2, vec![0.0; 6]).unwrap();
        assert!(scancontext_distance(&z, &other).is_err());
    }

    #[test]
    fn default_grid_uses_nearest_divisors() {
        assert_eq!(ScanContextGrid::for_image(384, 128), ScanContextGrid { sectors: 64, rings: 16 });
        assert_eq!(ScanContextGrid::for_image(120, 40), ScanContextGrid { sectors: 60, rings: 20 });
    }

    proptest! {
        #[test]
        fn ring_key_is_bit_invariant_to_rolls(seed in 0u64..1000, shift in 0isize..32) {
            let img = random_image(32, 8, seed);
            prop_assert_eq!(ring_key(&img, 4).unwrap(), ring_key(&img.roll_angular(shift), 4).unwrap());
        }

        #[test]
        fn scancontext_distance_is_a_pseudo_metric(seed in 0u64..1000, shift in 0isize..8) {
            let grid = ScanContextGrid { sectors: 8, rings: 4 };
            let a = random_image(16, 8, seed);
            let b = random_image(16, 8, seed + 7919);
            let (da, db) = (scancontext(&a, grid).unwrap(), scancontext(&b, grid).unwrap());
            let ab = scancontext_distance(&da, &db).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - scancontext_distance(&db, &da).unwrap()).abs() < 1e-12);
            prop_assert_eq!(scancontext_distance(&da, &da).unwrap(), 0.0);
            let rolled_a = scancontext(&a.roll_angular(2 * shift), grid).unwrap();
            let rolled_b = scancontext(&b.roll_angular(2 * shift), grid).unwrap();
            prop_assert!((ab - scancontext_distance(&rolled_a, &rolled_b).unwrap()).abs() < 1e-12);
        }
    }
}
