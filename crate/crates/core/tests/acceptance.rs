//! Acceptance criteria 1-9. Every test prints one `criterion N: PASS|FAIL`
//! line (written straight to stderr so it survives output capture) and
//! then asserts the same condition.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{full_pipeline, read_tree, PipelineRun};
use polarloc::autodiff::Tensor;
use polarloc::cli::MANIFEST_FILE;
use polarloc::data::{
    filter_readings, read_traversal_dir, IngestRules, PairLabel, PlaceThresholds, PolarImage, Pose, SimilarityRelation,
    TraversalRole,
};
use polarloc::net::{NetworkConfig, RadarLocModel};
use polarloc::selftest::{run_checks, standard_checks};
use polarloc::training::batch_hard_mine;

/// Seeds of the synthetic benchmark; the first one is the `gen --seed 7` run.
const SEEDS: [u64; 3] = [7, 8, 9];

fn report(criterion: u32, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {criterion}: {status} - {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Pipeline runs are expensive; each seed runs once per test binary.
fn pipeline(seed: u64) -> &'static PipelineRun {
    static RUNS: OnceLock<Mutex<BTreeMap<u64, &'static PipelineRun>>> = OnceLock::new();
    static BUILD: Mutex<()> = Mutex::new(());
    let runs = RUNS.get_or_init(|| Mutex::new(BTreeMap::new()));
    if let Some(r) = runs.lock().unwrap().get(&seed) {
        return r;
    }
    // Serialize builds so that concurrent tests do not train the same seed twice.
    let _guard = BUILD.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(r) = runs.lock().unwrap().get(&seed) {
        return r;
    }
    let run: &'static PipelineRun = Box::leak(Box::new(full_pipeline(seed)));
    runs.lock().unwrap().insert(seed, run);
    run
}

fn checks_named(names: &[&str]) -> Vec<(String, bool, String, f64)> {
    let checks: Vec<_> = standard_checks().into_iter().filter(|c| names.contains(&c.name)).collect();
    assert_eq!(checks.len(), names.len(), "unknown check name");
    run_checks(&checks, |_| {})
        .into_iter()
        .map(|o| (o.name.to_string(), o.passed, o.detail, o.seconds))
        .collect()
}

#[test]
fn criterion_1_gradient_correctness() {
    let names = [
        "grad_elementwise",
        "grad_conv2d_circular",
        "grad_conv2d_stride2",
        "grad_conv_transpose",
        "grad_batch_norm_train",
        "grad_batch_norm_eval",
        "grad_eca",
        "grad_gem",
        "grad_triplet_ops",
        "grad_network_input",
        "grad_network_params",
    ];
    let results = checks_named(&names);
    let network_seconds: f64 = results.iter().filter(|r| r.0.starts_with("grad_network")).map(|r| r.3).sum();
    let failed: Vec<String> = results.iter().filter(|r| !r.1).map(|r| format!("{} ({})", r.0, r.2)).collect();
    let pass = failed.is_empty() && network_seconds < 60.0;
    report(
        1,
        pass,
        &format!(
            "{} 64-bit gradchecks, max rel. error < 1e-4 required; network checks took {network_seconds:.1}s (< 60s); failures: {failed:?}",
            results.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_exact_rotation_invariance() {
    let model = RadarLocModel::<f32>::build(NetworkConfig::default(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = Tensor::from_fn(&[1, 1, 384, 128], |_| rng.random_range(0.0f32..1.0));
    let mut copies = vec![x.clone()];
    for k in 1..=23 {
        copies.push(x.roll(2, 16 * k).unwrap());
    }
    let batch = Tensor::new(&[24, 1, 384, 128], copies.iter().flat_map(|c| c.data().to_vec()).collect()).unwrap();
    let d = model.embed(&batch).unwrap();
    let mut worst = 0.0f32;
    for k in 1..=23 {
        for (a, b) in d.row(0).iter().zip(d.row(k)) {
            worst = worst.max((a - b).abs());
        }
    }
    let pass = worst <= 1e-5;
    report(2, pass, &format!("max |descriptor difference| over 16k-bin shifts k=1..23 on 384x128 = {worst:.2e} (<= 1e-5)"));
    assert!(pass);
}

#[test]
fn criterion_3_trained_rotation_invariance() {
    let run = pipeline(SEEDS[0]);
    let model = RadarLocModel::load(&run.checkpoint()).unwrap();
    let rules = {
        let m: polarloc::cli::Manifest =
            serde_json::from_slice(&std::fs::read(run.data().join(MANIFEST_FILE)).unwrap()).unwrap();
        IngestRules {
            angular_bins: m.spec.angular_bins,
            radial_bins: m.spec.radial_bins,
            ..IngestRules::default()
        }
    };
    let query = read_traversal_dir(&run.data().join("query"), TraversalRole::Query, &rules).unwrap();
    let map = read_traversal_dir(&run.data().join("map"), TraversalRole::Map, &rules).unwrap();
    let a = rules.angular_bins;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let embed = |imgs: &[PolarImage]| model.embed(&PolarImage::batch(imgs).unwrap()).unwrap();
    let map_desc = embed(&map.scans.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
    let dist = |x: &[f32], y: &[f32]| x.iter().zip(y).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>().sqrt();
    let thresholds = PlaceThresholds::default();
    let (mut rot_sum, mut rot_n, mut other_sum, mut other_n) = (0.0, 0usize, 0.0, 0usize);
    for (scan, pose) in query.scans.iter().zip(&query.poses) {
        let mut imgs = vec![scan.image.clone()];
        for _ in 0..8 {
            imgs.push(scan.image.roll_angular(rng.random_range(1..a) as isize));
        }
        let d = embed(&imgs);
        for k in 1..=8 {
            rot_sum += dist(d.row(0), d.row(k));
            rot_n += 1;
        }
        let mut others: Vec<f64> = map
            .poses
            .iter()
            .enumerate()
            .filter(|(_, p)| thresholds.label(p.planar_distance(pose)) == PairLabel::Dissimilar)
            .map(|(j, _)| dist(d.row(0), map_desc.row(j)))
            .collect();
        others.sort_by(f64::total_cmp);
        for v in others.iter().take(10) {
            other_sum += v;
            other_n += 1;
        }
    }
    let ratio = (rot_sum / rot_n as f64) / (other_sum / other_n as f64);
    let pass = ratio < 0.5;
    report(
        3,
        pass,
        &format!(
            "mean distance to 8 arbitrary rotations / mean distance to 10 nearest other-place (>= 20 m) scans = {ratio:.4} (< 0.5)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_end_to_end_synthetic_localization() {
    let run = pipeline(SEEDS[0]);
    let r = &run.reports["radarloc"];
    let (r5, r10) = (r.recall_at(1, 5.0).unwrap(), r.recall_at(1, 10.0).unwrap());
    let minutes = run.seconds_gen_train_eval / 60.0;
    let pass = r5 >= 0.90 && r10 >= 0.95 && minutes < 30.0 && r.query_count == 200;
    report(
        4,
        pass,
        &format!(
            "gen --seed 7 / train (30 epochs) / eval: Recall@1(5 m) = {r5:.3} (>= 0.90), Recall@1(10 m) = {r10:.3} (>= 0.95), {} queries, {minutes:.1} min (< 30)",
            r.query_count
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_baseline_ordering() {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut ties = 0;
    for seed in SEEDS {
        let run = pipeline(seed);
        let r = |m: &str| run.reports[m].recall_at(1, 5.0).unwrap();
        let (ours, sc, rk) = (r("radarloc"), r("scancontext"), r("ringkey"));
        let ok = ours >= sc && sc >= rk;
        pass &= ok;
        ties += usize::from(ok && (ours == sc || sc == rk));
        lines.push(format!("seed {seed}: RadarLoc {ours:.3} >= ScanContext {sc:.3} >= Ring key {rk:.3} [{}]", if ok { "ok" } else { "violated" }));
    }
    let note = if ties > 0 { format!(" ({ties} of 3 seeds hold only through ties)") } else { String::new() };
    report(5, pass, &format!("Recall@1(5 m) ordering on 3 of 3 seeds: {}{note}", lines.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_6_oracle_equivalences() {
    let results = checks_named(&[
        "knn_exhaustive_oracle",
        "batch_hard_oracle",
        "conv2d_direct_oracle",
        "scancontext_shift_oracle",
    ]);
    let pass = results.iter().all(|r| r.1);
    let detail: Vec<String> = results
        .iter()
        .map(|r| format!("{} {} ({})", r.0, if r.1 { "ok" } else { "failed" }, r.2))
        .collect();
    report(6, pass, &detail.join("; "));
    assert!(pass);
}

fn pose(t: f64, x: f64) -> Pose {
    Pose {
        timestamp: t,
        x,
        y: 0.0,
        yaw: 0.0,
    }
}

#[test]
fn criterion_7_protocol_rules() {
    let rules = IngestRules::default();
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    // 0.1 m displacement rule keeps the first of a near-stationary pair.
    let poses = [pose(0.0, 0.0), pose(1.0, 0.05), pose(2.0, 1.0)];
    check("displacement", filter_readings(&[0.0, 1.0, 2.0], &poses, &rules) == vec![(0, 0), (2, 2)]);
    // 1 s pose tolerance.
    check("tolerance drop", filter_readings(&[10.0], &[pose(11.5, 0.0)], &rules).is_empty());
    check("tolerance keep", filter_readings(&[10.0], &[pose(11.0, 0.0)], &rules) == vec![(0, 0)]);
    // Stationary traversal keeps one reading.
    let still: Vec<Pose> = (0..5).map(|i| pose(i as f64, 0.0)).collect();
    check("stationary", filter_readings(&[0.0, 1.0, 2.0, 3.0, 4.0], &still, &rules).len() == 1);
    // 5 m / 20 m thresholds and the exclusion band.
    let t = PlaceThresholds::default();
    for (d, expect) in [
        (3.0, PairLabel::Similar),
        (5.0, PairLabel::Similar),
        (5.01, PairLabel::Excluded),
        (10.0, PairLabel::Excluded),
        (19.99, PairLabel::Excluded),
        (20.0, PairLabel::Dissimilar),
        (25.0, PairLabel::Dissimilar),
    ] {
        check(&format!("label at {d} m"), t.label(d) == expect);
    }
    // A batch whose pairs are all 5-20 m apart yields no triples.
    let band: Vec<Pose> = [0.0, 6.0, 12.0].iter().map(|&x| pose(0.0, x)).collect();
    let rel = SimilarityRelation::from_poses(&band, &band, &t);
    let desc = Tensor::from_fn(&[3, 4], |i| i as f32);
    check("exclusion band batch", batch_hard_mine(&desc, &rel, None).unwrap().triples.is_empty());
    let pass = failures.is_empty();
    report(7, pass, &format!("0.1 m / 1 s filtering and 5 m / 20 m labeling fixtures; failures: {failures:?}"));
    assert!(pass);
}

#[test]
fn criterion_8_recall_monotonicity() {
    let results = checks_named(&["recall_monotone_and_oracle"]);
    let pass = results[0].1;
    report(8, pass, &format!("Recall@N(d) non-decreasing in N and d over 50 random descriptor sets: {}", results[0].2));
    assert!(pass);
}

#[test]
fn criterion_9_determinism() {
    let first = pipeline(SEEDS[0]);
    let second = full_pipeline(SEEDS[0]);
    let start = Instant::now();
    let mut compared = 0;
    let mut differing = Vec::new();
    for (a, b) in [
        (first.data(), second.data()),
        (first.run_dir(), second.run_dir()),
        (first.eval_dir(), second.eval_dir()),
    ] {
        let (ta, tb) = (read_tree(&a), read_tree(&b));
        for (path, bytes) in &ta {
            let name = path.to_string_lossy();
            // Resolved configs hold absolute temp paths; the log's last column is wall time.
            if name.ends_with(".json") && name.contains("config") {
                continue;
            }
            if name.ends_with("train_log.csv") {
                let strip = |b: &[u8]| -> Vec<String> {
                    String::from_utf8_lossy(b)
                        .lines()
                        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
                        .collect()
                };
                compared += 1;
                if tb.get(path).map(|o| strip(o)) != Some(strip(bytes)) {
                    differing.push(name.to_string());
                }
                continue;
            }
            compared += 1;
            if tb.get(path) != Some(bytes) {
                differing.push(name.to_string());
            }
        }
        if ta.len() != tb.len() {
            differing.push(format!("{} file count", a.display()));
        }
    }
    let pass = differing.is_empty() && compared > 0;
    report(
        9,
        pass,
        &format!(
            "{compared} files (dataset, checkpoint + sidecar, descriptor files, CSV reports) byte-identical across two seed-7 runs; differing: {differing:?} ({:.1}s compare)",
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}
