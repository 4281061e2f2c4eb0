//! Geotagged descriptor index, exact kNN and the Recall@N protocol.

use std::io::{Read, Write};

use crate::baselines::{scancontext_distance, ScanContextDescriptor};
use crate::data::Pose;
use crate::error::{ensure, Error, Result};

/// How distances between stored vectors are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    /// Rotation-aligned ScanContext distance on sector-major matrices.
    ScanContext { sectors: usize, rings: usize },
}

impl Metric {
    /// `scancontext/<sectors>x<rings>` selects the ScanContext metric;
    /// every other method id is compared with the Euclidean distance.
    pub fn for_method(method: &str) -> Result<Metric> {
        match method.strip_prefix("scancontext/") {
            None => Ok(Metric::Euclidean),
            Some(grid) => {
                let parsed = grid
                    .split_once('x')
                    .and_then(|(s, r)| Some((s.parse().ok()?, r.parse().ok()?)));
                match parsed {
                    Some((sectors, rings)) if sectors > 0 && rings > 0 => Ok(Metric::ScanContext { sectors, rings }),
                    _ => Err(Error::contract(format!("bad ScanContext method id {method:?}"))),
                }
            }
        }
    }

    pub fn distance(&self, a: &[f32], b: &[f32]) -> Result<f64> {
        match *self {
            Metric::Euclidean => {
                ensure!(a.len() == b.len(), "descriptor dimensions differ: {} vs {}", a.len(), b.len());
                Ok(a.iter()
                    .zip(b)
                    .map(|(&x, &y)| {
                        let d = x as f64 - y as f64;
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt())
            }
            Metric::ScanContext { sectors, rings } => {
                let d1 = ScanContextDescriptor::from_parts(sectors, rings, a.to_vec())?;
                let d2 = ScanContextDescriptor::from_parts(sectors, rings, b.to_vec())?;
                scancontext_distance(&d1, &d2)
            }
        }
    }
}

/// A descriptor with the reading it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub id: String,
    pub pose: Pose,
    pub values: Vec<f32>,
}

/// Immutable map of geotagged descriptors sharing one method and dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorIndex {
    method: String,
    dim: usize,
    metric: Metric,
    entries: Vec<Descriptor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    /// Position in the index (insertion order).
    pub entry: usize,
    pub distance: f64,
}

impl DescriptorIndex {
    pub fn build(method: &str, entries: Vec<Descriptor>) -> Result<Self> {
        ensure!(!entries.is_empty(), "cannot build an empty descriptor index");
        let dim = entries[0].values.len();
        ensure!(dim > 0, "descriptors must have a positive dimension");
        if let Some(bad) = entries.iter().find(|e| e.values.len() != dim) {
            return Err(Error::contract(format!(
                "descriptor {:?} has dimension {}, index has {dim}",
                bad.id,
                bad.values.len()
            )));
        }
        let metric = Metric::for_method(method)?;
        if let Metric::ScanContext { sectors, rings } = metric {
            ensure!(sectors * rings == dim, "method {method} needs {} values, got {dim}", sectors * rings);
        }
        Ok(DescriptorIndex {
            method: method.to_string(),
            dim,
            metric,
            entries,
        })
    }

    pub fn method(&self) -> &str {
        &self.method
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn entries(&self) -> &[Descriptor] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exact `k` nearest entries, ascending by distance, ties in insertion order.
    pub fn knn(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        ensure!(k >= 1, "knn needs k >= 1");
        ensure!(
            query.len() == self.dim,
            "query dimension {} does not match index dimension {}",
            query.len(),
            self.dim
        );
        let mut all = self
            .entries
            .iter()
            .enumerate()
            .map(|(entry, e)| {
                Ok(Neighbor {
                    entry,
                    distance: self.metric.distance(query, &e.values)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        // Stable sort keeps insertion order among equal distances.
        all.sort_by(|a, b| a.distance.total_cmp(&b.distance));
        all.truncate(k);
        Ok(all)
    }
}

/// Recall@N(d) for N = 1..=n_max and each threshold d.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_max: usize,
    pub thresholds: Vec<f64>,
    /// `recall[t][n - 1]` for threshold `thresholds[t]`.
    pub recall: Vec<Vec<f64>>,
    /// `ranks[q][t]`: 1-based rank of the first retrieved entry within
    /// `thresholds[t]` of query `q`, `None` if none in the top `n_max`.
    pub ranks: Vec<Vec<Option<usize>>>,
    pub query_count: usize,
}

impl EvalReport {
    pub fn recall_at(&self, n: usize, threshold: f64) -> Option<f64> {
        let t = self.thresholds.iter().position(|&d| d == threshold)?;
        (1..=self.n_max).contains(&n).then(|| self.recall[t][n - 1])
    }

    /// Recall must not decrease with N (fixed d) or with d (fixed N).
    pub fn check_monotone(&self) -> Result<()> {
        for (t, row) in self.recall.iter().enumerate() {
            if let Some(n) = (1..row.len()).find(|&n| row[n] < row[n - 1]) {
                return Err(Error::contract(format!(
                    "recall decreases from N={} to N={} at d={}",
                    n,
                    n + 1,
                    self.thresholds[t]
                )));
            }
        }
        for (i, &di) in self.thresholds.iter().enumerate() {
            for (j, &dj) in self.thresholds.iter().enumerate() {
                if di < dj {
                    if let Some(n) = (0..self.n_max).find(|&n| self.recall[j][n] < self.recall[i][n]) {
                        return Err(Error::contract(format!(
                            "recall at N={} decreases from d={di} to d={dj}",
                            n + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// CSV with columns `N,threshold_m,recall`, N-major.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["N", "threshold_m", "recall"])?;
        for n in 1..=self.n_max {
            for (t, d) in self.thresholds.iter().enumerate() {
                out.write_record([n.to_string(), d.to_string(), self.recall[t][n - 1].to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

pub const DEFAULT_RECALL_MAX_N: usize = 10;
pub const DEFAULT_THRESHOLDS_M: [f64; 2] = [5.0, 10.0];

/// A query counts as localized at (N, d) if one of its top-N retrieved
/// map entries lies within d meters of its ground-truth position.
pub fn evaluate(index: &DescriptorIndex, queries: &[Descriptor], n_max: usize, thresholds: &[f64]) -> Result<EvalReport> {
    ensure!(!queries.is_empty(), "evaluation needs at least one query");
    ensure!(n_max >= 1, "n_max must be at least 1");
    ensure!(
        !thresholds.is_empty() && thresholds.iter().all(|&d| d > 0.0 && d.is_finite()),
        "thresholds must be positive"
    );
    let mut ranks = Vec::with_capacity(queries.len());
    for q in queries {
        let hits = index.knn(&q.values, n_max)?;
        ranks.push(
            thresholds
                .iter()
                .map(|&d| {
                    hits.iter()
                        .position(|h| index.entries[h.entry].pose.planar_distance(&q.pose) <= d)
                        .map(|p| p + 1)
                })
                .collect::<Vec<_>>(),
        );
    }
    let total = queries.len() as f64;
    let recall = (0..thresholds.len())
        .map(|t| {
            (1..=n_max)
                .map(|n| ranks.iter().filter(|r: &&Vec<Option<usize>>| r[t].is_some_and(|k| k <= n)).count() as f64 / total)
                .collect()
        })
        .collect();
    let report = EvalReport {
        n_max,
        thresholds: thresholds.to_vec(),
        recall,
        ranks,
        query_count: queries.len(),
    };
    report.check_monotone()?;
    Ok(report)
}

const PDSC_MAGIC: &str = "PDSC";

/// Writes `PDSC <dim> <count> <method>\n`, then per entry: u32 id length,
/// id bytes, x, y, yaw as f64 and `dim` f32 values, all little-endian.
pub fn write_descriptors<W: Write>(mut w: W, method: &str, entries: &[Descriptor]) -> Result<()> {
    ensure!(
        !method.is_empty() && !method.contains(char::is_whitespace),
        "method id {method:?} must be a non-empty word"
    );
    let dim = entries.first().map_or(0, |e| e.values.len());
    ensure!(entries.iter().all(|e| e.values.len() == dim), "descriptor dimensions differ");
    writeln!(w, "{PDSC_MAGIC} {dim} {} {method}", entries.len())?;
    let mut buf = Vec::new();
    for e in entries {
        let id_len = u32::try_from(e.id.len()).map_err(|_| Error::contract("descriptor id too long"))?;
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(e.id.as_bytes());
        for v in [e.pose.x, e.pose.y, e.pose.yaw] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &e.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Reads a PDSC file, returning the method id and entries. Timestamps are
/// not stored and come back as 0.
pub fn read_descriptors<R: Read>(mut r: R) -> Result<(String, Vec<Descriptor>)> {
    let bad = |reason: String| Error::format("PDSC descriptors", reason);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("non-UTF-8 header".into()))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 4 || fields[0] != PDSC_MAGIC {
        return Err(bad(format!("bad header {header:?}")));
    }
    let dim: usize = fields[1].parse().map_err(|_| bad(format!("bad dimension {}", fields[1])))?;
    let count: usize = fields[2].parse().map_err(|_| bad(format!("bad count {}", fields[2])))?;
    let method = fields[3].to_string();
    let mut pos = nl + 1;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::format("PDSC descriptors", "truncated entry data"))?;
        pos += n;
        Ok(s)
    };
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| bad("non-UTF-8 scan id".into()))?;
        let mut f64s = [0.0; 3];
        for v in &mut f64s {
            *v = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        }
        let values = take(dim * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(Descriptor {
            id,
            pose: Pose {
                timestamp: 0.0,
                x: f64s[0],
                y: f64s[1],
                yaw: f64s[2],
            },
            values,
        });
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok((method, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn desc(id: &str, x: f64, values: Vec<f32>) -> Descriptor {
        Descriptor {
            id: id.into(),
            pose: Pose {
                timestamp: 0.0,
                x,
                y: 0.0,
                yaw: 0.0,
            },
            values,
        }
    }

    #[test]
    fn knn_hand_example() {
        let idx = DescriptorIndex::build(
            "radarloc",
            vec![
                desc("a", 0.0, vec![0.0, 0.1]),
                desc("b", 0.0, vec![1.0, 0.0]),
                desc("c", 0.0, vec![5.0, 5.0]),
            ],
        )
        .unwrap();
        let hits = idx.knn(&[0.0, 0.0], 2).unwrap();
        assert_eq!(hits.iter().map(|h| h.entry).collect::<Vec<_>>(), vec![0, 1]);
        assert!((hits[0].distance - 0.1).abs() < 1e-7);
        assert_eq!(hits[1].distance, 1.0);
        assert_eq!(idx.knn(&[0.0, 0.0], 10).unwrap().len(), 3);
        assert!(idx.knn(&[0.0], 1).is_err());
        assert!(idx.knn(&[0.0, 0.0], 0).is_err());
    }

    #[test]
    fn build_guards() {
        assert!(DescriptorIndex::build("m", vec![]).is_err());
        assert!(DescriptorIndex::build("m", vec![desc("a", 0.0, vec![1.0]), desc("b", 0.0, vec![1.0, 2.0])]).is_err());
        let dup = DescriptorIndex::build("m", vec![desc("a", 0.0, vec![1.0]), desc("b", 0.0, vec![1.0])]).unwrap();
        assert_eq!(dup.len(), 2);
        let hits = dup.knn(&[1.0], 2).unwrap();
        assert_eq!((hits[0].entry, hits[1].entry), (0, 1));
        assert!(DescriptorIndex::build("scancontext/2x2", vec![desc("a", 0.0, vec![1.0; 3])]).is_err());
    }

    #[test]
    fn recall_rule() {
        let idx = DescriptorIndex::build("m", vec![desc("a", 3.0, vec![0.0]), desc("b", 100.0, vec![5.0])]).unwrap();
        let report = evaluate(&idx, &[desc("q", 0.0, vec![0.1])], 2, &[1.0, 5.0]).unwrap();
        assert_eq!(report.recall_at(1, 5.0), Some(1.0));
        assert_eq!(report.recall_at(1, 1.0), Some(0.0));
        let far = evaluate(&idx, &[desc("q", 50.0, vec![0.1])], 2, &[5.0]).unwrap();
        assert_eq!(far.recall[0], vec![0.0, 0.0]);
        assert!(evaluate(&idx, &[], 2, &[5.0]).is_err());
        assert!(evaluate(&idx, &[desc("q", 0.0, vec![0.1])], 2, &[0.0]).is_err());
    }

    #[test]
    fn csv_grid_shape() {
        let idx = DescriptorIndex::build("m", vec![desc("a", 3.0, vec![0.0])]).unwrap();
        let report = evaluate(&idx, &[desc("q", 0.0, vec![0.1])], 10, &DEFAULT_THRESHOLDS_M).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 21);
        assert_eq!(lines[0], "N,threshold_m,recall");
        assert_eq!(lines[1], "1,5,1");
    }

    #[test]
    fn monotonicity_violation_is_reported() {
        let report = EvalReport {
            n_max: 2,
            thresholds: vec![5.0, 10.0],
            recall: vec![vec![0.5, 0.4], vec![0.5, 0.5]],
            ranks: vec![],
            query_count: 0,
        };
        assert!(report.check_monotone().is_err());
    }

    #[test]
    fn metric_parsing() {
        assert_eq!(Metric::for_method("ringkey").unwrap(), Metric::Euclidean);
        assert_eq!(
            Metric::for_method("scancontext/64x16").unwrap(),
            Metric::ScanContext { sectors: 64, rings: 16 }
        );
        assert!(Metric::for_method("scancontext/64").is_err());
    }

    #[test]
    fn pdsc_rejects_corruption() {
        let mut buf = Vec::new();
        write_descriptors(&mut buf, "m", &[desc("a", 1.0, vec![1.0, 2.0])]).unwrap();
        assert!(buf.starts_with(b"PDSC 2 1 m\n"));
        assert!(read_descriptors(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_descriptors(extra.as_slice()).is_err());
        assert!(write_descriptors(Vec::new(), "two words", &[]).is_err());
    }

    proptest! {
        #[test]
        fn pdsc_round_trip(
            rows in prop::collection::vec(
                ("[a-z0-9_]{0,12}", -1e3f64..1e3, -1e3f64..1e3, -4.0f64..4.0, prop::collection::vec(-10f32..10.0, 3)),
                0..8,
            )
        ) {
            let entries: Vec<Descriptor> = rows
                .into_iter()
                .map(|(id, x, y, yaw, values)| Descriptor { id, pose: Pose { timestamp: 0.0, x, y, yaw }, values })
                .collect();
            let mut buf = Vec::new();
            write_descriptors(&mut buf, "radarloc", &entries).unwrap();
            let (method, back) = read_descriptors(buf.as_slice()).unwrap();
            prop_assert_eq!(method, "radarloc");
            prop_assert_eq!(back, entries);
        }

        #[test]
        fn knn_distances_ignore_build_order(seed in 0u64..500) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let entries: Vec<Descriptor> = (0..30)
                .map(|i| desc(&i.to_string(), 0.0, vec![rng.random_range(0..4) as f32, rng.random_range(0..4) as f32]))
                .collect();
            let mut shuffled = entries.clone();
            shuffled.shuffle(&mut rng);
            let a = DescriptorIndex::build("m", entries).unwrap();
            let b = DescriptorIndex::build("m", shuffled).unwrap();
            let q = [1.5f32, 2.0];
            let da: Vec<f64> = a.knn(&q, 10).unwrap().iter().map(|h| h.distance).collect();
            let db: Vec<f64> = b.knn(&q, 10).unwrap().iter().map(|h| h.distance).collect();
            prop_assert_eq!(da, db);
        }
    }
}
