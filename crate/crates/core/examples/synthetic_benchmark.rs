//! Trains RadarLoc on the default synthetic world and reports Recall@1 for
//! every method after each epoch.
//!
//! Usage: `cargo run --release --example synthetic_benchmark [seed] [epochs]`
//!
//! World parameters can be overridden through environment variables for
//! quick sweeps: TRANSIENTS, LATERAL, NOISE, LANDMARKS, EXTENT, TRAIN_N, RCS.
//! Each epoch reseeds the sampler with `seed + epoch`, so the curve is not the
//! same run as `polarloc train`.

use polarloc::baselines::ScanContextGrid;
use polarloc::data::{generate_synthetic, PolarImage, SyntheticWorldSpec};
use polarloc::net::{NetworkConfig, RadarLocModel};
use polarloc::pipeline::{describe_traversal, Method};
use polarloc::retrieval::{evaluate, DescriptorIndex};
use polarloc::training::{train, TrainConfig};

fn recall(
    method: Method,
    ds: &polarloc::data::SyntheticDataset,
    model: Option<&RadarLocModel>,
    grid: ScanContextGrid,
) -> polarloc::Result<(f64, f64)> {
    let map = describe_traversal(method, &ds.map, model, grid)?;
    let query = describe_traversal(method, &ds.query, model, grid)?;
    let index = DescriptorIndex::build(&method.id(grid), map)?;
    let report = evaluate(&index, &query, 1, &[5.0, 10.0])?;
    Ok((report.recall[0][0], report.recall[1][0]))
}

fn main() -> polarloc::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let seed = args.first().copied().unwrap_or(7);
    let epochs = args.get(1).copied().unwrap_or(30) as usize;
    let env = |k: &str, d: f64| std::env::var(k).ok().map_or(d, |v| v.parse().unwrap());
    let base = SyntheticWorldSpec::default();
    let spec = SyntheticWorldSpec {
        seed,
        transient_objects: env("TRANSIENTS", base.transient_objects as f64) as usize,
        lateral_jitter_m: env("LATERAL", base.lateral_jitter_m),
        noise_sigma: env("NOISE", base.noise_sigma),
        landmark_count: env("LANDMARKS", base.landmark_count as f64) as usize,
        extent_m: env("EXTENT", base.extent_m),
        train_scans_per_pass: env("TRAIN_N", base.train_scans_per_pass as f64) as usize,
        rcs_sigma: env("RCS", base.rcs_sigma),
        ..base
    };
    let ds = generate_synthetic(&spec)?;
    let grid = ScanContextGrid::for_image(spec.angular_bins, spec.radial_bins);
    for m in [Method::RingKey, Method::ScanContext] {
        let (r5, r10) = recall(m, &ds, None, grid)?;
        println!("{m}: R@1(5m) {r5:.3} R@1(10m) {r10:.3}");
    }
    let mut model = RadarLocModel::build(NetworkConfig::with_input(spec.angular_bins, spec.radial_bins), seed)?;
    let (r5, r10) = recall(Method::RadarLoc, &ds, Some(&model), grid)?;
    println!("radarloc untrained: R@1(5m) {r5:.3} R@1(10m) {r10:.3}");
    let images: Vec<PolarImage> = ds.train.images().cloned().collect();
    let config = TrainConfig { epochs: 1, seed, ..TrainConfig::default() };
    for epoch in 0..epochs {
        let stats = train(&mut model, &images, &ds.train.poses, &TrainConfig { seed: seed + epoch as u64, ..config.clone() }, |_| {})?;
        let (r5, r10) = recall(Method::RadarLoc, &ds, Some(&model), grid)?;
        let s = &stats[0];
        println!(
            "epoch {epoch}: loss {:.4} active {:.3} triples {} {:.1}s | R@1(5m) {r5:.3} R@1(10m) {r10:.3}",
            s.mean_loss, s.active_fraction, s.triples, s.wall_seconds
        );
    }
    Ok(())
}
