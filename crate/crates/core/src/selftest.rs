//! Built-in consistency checks: gradient checks of every layer op and the
//! network, shift equivariance, and brute-force oracles for the retrieval
//! and mining code.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradcheck, ConvGeometry, Tape, Tensor, Var};
use crate::baselines::{scancontext_distance, scancontext_distance_at, ScanContextDescriptor};
use crate::data::{PairLabel, Pose, SimilarityRelation};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::net::{NetworkConfig, RadarLocModel};
use crate::retrieval::{evaluate, Descriptor, DescriptorIndex};
use crate::training::{batch_hard_mine, Triple};

/// Maximum relative error accepted by gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const FD_EPSILON: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(y * r)` for a fixed random `r`, giving every output a distinct weight.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let r = tape.constant(random_tensor(&shape, &mut rng(seed)));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

/// Brute-force reference implementations.
pub mod oracle {
    use super::*;

    /// Direct-loop cross-correlation with circular angular (H) padding and
    /// zero radial (W) padding, `same` geometry for odd kernels at stride 1
    /// and tiled geometry when kernel == stride.
    pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize) -> Result<Tensor<f64>> {
        let (n, c, h, wd) = x.dims4()?;
        let (o, _, kh, kw) = w.dims4()?;
        let (ph, pw) = if stride == 1 { (kh / 2, kw / 2) } else { (0, 0) };
        let (oh, ow) = (h / stride, wd / stride);
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for s in 0..n {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                        for ic in 0..c {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let row = (i * stride + u) as isize - ph as isize;
                                    let col = (j * stride + v) as isize - pw as isize;
                                    if col < 0 || col >= wd as isize {
                                        continue;
                                    }
                                    let row = row.rem_euclid(h as isize) as usize;
                                    acc += x.data()[((s * c + ic) * h + row) * wd + col as usize]
                                        * w.data()[((oc * c + ic) * kh + u) * kw + v];
                                }
                            }
                        }
                        out.data_mut()[((s * o + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Exhaustive kNN: every distance, sorted by (distance, insertion index).
    pub fn knn(entries: &[Vec<f32>], query: &[f32], k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let d2: f64 = e.iter().zip(query).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
                (i, d2.sqrt())
            })
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite").then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    /// O(N^2) mining: full distance matrix, then per anchor the first
    /// similar partner and the dissimilar element of smallest (distance, index).
    pub fn batch_hard(desc: &[Vec<f32>], labels: &SimilarityRelation) -> (Vec<Triple>, usize) {
        let n = desc.len();
        let dist: Vec<Vec<f64>> = desc
            .iter()
            .map(|a| {
                desc.iter()
                    .map(|b| a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt())
                    .collect()
            })
            .collect();
        let (mut triples, mut skipped) = (Vec::new(), 0);
        for a in 0..n {
            let pos = (0..n).filter(|&j| j != a && labels.get(a, j) == PairLabel::Similar).min();
            let mut negs: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != a && labels.get(a, j) == PairLabel::Dissimilar)
                .map(|j| (dist[a][j], j))
                .collect();
            negs.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
            match (pos, negs.first()) {
                (Some(positive), Some(&(_, negative))) => triples.push(Triple {
                    anchor: a,
                    positive,
                    negative,
                }),
                _ => skipped += 1,
            }
        }
        (triples, skipped)
    }

    /// ScanContext distance by explicitly rolling the second matrix by every
    /// sector offset and comparing column by column.
    pub fn scancontext(d1: &ScanContextDescriptor, d2: &ScanContextDescriptor) -> f64 {
        let (s, r) = (d1.sectors, d1.rings);
        let mut best = f64::INFINITY;
        for shift in 0..s {
            let rolled: Vec<f32> = (0..s).flat_map(|k| d2.sector((k + shift) % s).to_vec()).collect();
            let mut total = 0.0;
            for k in 0..s {
                let a = &d1.matrix[k * r..(k + 1) * r];
                let b = &rolled[k * r..(k + 1) * r];
                let na = a.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                let nb = b.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                total += if na == 0.0 && nb == 0.0 {
                    0.0
                } else if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() / (na * nb)
                };
            }
            best = best.min(total / s as f64);
        }
        best
    }

    /// Recall@N(d) by a double loop over queries and ranked neighbours.
    pub fn recall(index: &DescriptorIndex, queries: &[Descriptor], n: usize, d: f64) -> Result<f64> {
        let mut hits = 0;
        for q in queries {
            let ranked = index.knn(&q.values, n)?;
            if ranked
                .iter()
                .any(|h| index.entries()[h.entry].pose.planar_distance(&q.pose) <= d)
            {
                hits += 1;
            }
        }
        Ok(hits as f64 / queries.len() as f64)
    }
}

fn within(err: f64, tol: f64, what: &str) -> Result<String> {
    if err < tol {
        Ok(format!("{what} {err:.2e} < {tol:.0e}"))
    } else {
        Err(Error::contract(format!("{what} {err:.3e} exceeds {tol:.0e}")))
    }
}

fn grad_ok(err: f64) -> Result<String> {
    within(err, GRAD_TOLERANCE, "max relative error")
}

/// Gradient check of `f` with respect to each listed input in turn; the
/// other inputs enter as constants.
fn gradcheck_inputs<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for which in 0..inputs.len() {
        let err = gradcheck(
            |tape, v| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == which { v } else { tape.constant(t.clone()) })
                    .collect();
                f(tape, &vars)
            },
            &inputs[which],
            FD_EPSILON,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Relative error between reverse-mode parameter gradients of the full
/// network and central differences, on up to `per_tensor` components of
/// every trainable tensor.
pub fn network_param_gradcheck(model: &RadarLocModel<f64>, x: &Tensor<f64>, mode: Mode, per_tensor: usize) -> Result<f64> {
    let loss = |m: &RadarLocModel<f64>, track: bool| -> Result<(Tape<f64>, Var, crate::net::ForwardPass<f64>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pass = m.forward(&mut tape, xv, mode, track)?;
        let l = weighted_sum(&mut tape, pass.descriptor, 99)?;
        Ok((tape, l, pass))
    };
    let (tape, l, pass) = loss(model, true)?;
    let grads = tape.backward(l)?;
    let analytic = model.param_grads(&pass, &grads);
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    let mut pick = rng(5);
    for (idx, g) in analytic.iter().enumerate() {
        let Some(g) = g else { continue };
        for _ in 0..per_tensor.min(g.len()) {
            let k = pick.random_range(0..g.len());
            let orig = probe.params().get(idx).data()[k];
            let mut eval = |v: f64| -> Result<f64> {
                probe.params_mut().get_mut(idx).data_mut()[k] = v;
                let (t, l, _) = loss(&probe, false)?;
                Ok(t.value(l).item()?)
            };
            let plus = eval(orig + FD_EPSILON)?;
            let minus = eval(orig - FD_EPSILON)?;
            probe.params_mut().get_mut(idx).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPSILON);
            let a = g.data()[k];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1.0));
        }
    }
    Ok(worst)
}

/// Smallest network configuration exercising every layer on a 32 x 16 input.
pub fn small_network() -> Result<RadarLocModel<f64>> {
    RadarLocModel::build(NetworkConfig::with_input(32, 16), 11)
}

/// A named check; `run` returns a short detail string on success.
pub struct Check {
    pub name: &'static str,
    pub run: Box<dyn Fn() -> Result<String>>,
}

impl Check {
    pub fn new(name: &'static str, run: impl Fn() -> Result<String> + 'static) -> Self {
        Check { name, run: Box::new(run) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub fn run_checks(checks: &[Check], mut on_outcome: impl FnMut(&CheckOutcome)) -> Vec<CheckOutcome> {
    checks
        .iter()
        .map(|c| {
            let start = Instant::now();
            let result = (c.run)();
            let outcome = CheckOutcome {
                name: c.name,
                passed: result.is_ok(),
                detail: result.unwrap_or_else(|e| e.to_string()),
                seconds: start.elapsed().as_secs_f64(),
            };
            on_outcome(&outcome);
            outcome
        })
        .collect()
}

/// A deliberately wrong gradient: `x * stop_gradient(x)` recorded as if it
/// were `x^2`, so reverse mode reports half the true derivative.
pub fn injected_gradient_bug() -> Check {
    Check::new("injected_gradient_bug", || {
        let x = random_tensor(&[2, 3], &mut rng(1));
        let err = gradcheck(
            |tape, v| {
                let detached = tape.constant(tape.value(v).clone());
                let y = tape.mul(v, detached)?;
                tape.sum(y)
            },
            &x,
            FD_EPSILON,
        )?;
        grad_ok(err)
    })
}

pub fn standard_checks() -> Vec<Check> {
    vec![
        Check::new("grad_elementwise", || {
            let mut r = rng(1);
            let (a, b) = (random_tensor(&[2, 3, 4], &mut r), random_tensor(&[2, 3, 4], &mut r));
            let err = gradcheck_inputs(&[a, b], |t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(s, v[1])?;
                let m = t.mul(d, v[1])?;
                let m = t.scale(m, 1.5)?;
                let m = t.add_scalar(m, 0.25)?;
                let q = t.sigmoid(m)?;
                let q = t.mul(q, m)?;
                let q = t.relu(q)?;
                let q = t.mean(q)?;
                let s = weighted_sum(t, m, 2)?;
                t.add(q, s)
            })?;
            grad_ok(err)
        }),
        Check::new("grad_conv2d_circular", || {
            let mut r = rng(2);
            let x = random_tensor(&[2, 3, 8, 5], &mut r);
            let w = random_tensor(&[4, 3, 3, 3], &mut r);
            let b = random_tensor(&[4], &mut r);
            let err = gradcheck_inputs(&[x, w, b], |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::same(3, 3))?;
                weighted_sum(t, y, 3)
            })?;
            grad_ok(err)
        }),
        Check::new("grad_conv2d_stride2", || {
            let mut r = rng(3);
            let x = random_tensor(&[2, 2, 8, 6], &mut r);
            let w = random_tensor(&[3, 2, 2, 2], &mut r);
            let b = random_tensor(&[3], &mut r);
            let err = gradcheck_inputs(&[x, w, b], |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::tiled(2))?;
                weighted_sum(t, y, 4)
            })?;
            grad_ok(err)
        }),
        Check::new("grad_conv_transpose", || {
            let mut r = rng(4);
            let x = random_tensor(&[2, 3, 4, 3], &mut r);
            let w = random_tensor(&[3, 2, 2, 2], &mut r);
            let b = random_tensor(&[2], &mut r);
            let err = gradcheck_inputs(&[x, w, b], |t, v| {
                let y = t.conv_transpose2x2(v[0], v[1], Some(v[2]))?;
                weighted_sum(t, y, 5)
            })?;
            grad_ok(err)
        }),
        Check::new("grad_batch_norm_train", || {
            let mut r = rng(5);
            let x = random_tensor(&[3, 2, 3, 2], &mut r);
            let g = random_tensor(&[2], &mut r);
            let b = random_tensor(&[2], &mut r);
            let err = gradcheck_inputs(&[x, g, b], |t, v| {
                let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, 6)
            })?;
            grad_ok(err)
        }),
        Check::new("grad_batch_norm_eval", || {
            let mut r = rng(6);
            let x = random_tensor(&[2, 2, 3, 2], &mut r);
            let g = random_tensor(&[2], &mut r);
            let b = random_tensor(&[2], &mut r);
            let err = gradcheck_inputs(&[x, g, b], |t, v| {
                let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)?;
                weighted_sum(t, y, 7)
            })?;
            grad_ok(err)
        }),
        Check::new("grad_eca", || {
            let mut r = rng(7);
            let x = random_tensor(&[2, 5, 3, 2], &mut r);
            let w = random_tensor(&[3], &mut r);
            let err = gradcheck_inputs(&[x, w], |t, v| {
                let m = t.mean_hw(v[0])?;
                let c = t.channel_conv1d(m, v[1])?;
                let g = t.sigmoid(c)?;
                let y = t.scale_channels(v[0], g)?;
                weighted_sum(t, y, 8)
            })?;
            grad_ok(err)
        }),
        Check::new("grad_gem", || {
            let mut r = rng(8);
            let x = Tensor::from_fn(&[2, 3, 2, 3], |_| r.random_range(0.05..1.0));
            let p = Tensor::scalar(2.5);
            let err = gradcheck_inputs(&[x, p], |t, v| {
                let y = t.gem(v[0], v[1], 1e-6)?;
                weighted_sum(t, y, 9)
            })?;
            grad_ok(err)
        }),
        Check::new("grad_triplet_ops", || {
            let mut r = rng(9);
            let a = random_tensor(&[4, 2, 1, 1], &mut r);
            let b = random_tensor(&[4, 3, 1, 1], &mut r);
            let err = gradcheck_inputs(&[a, b], |t, v| {
                let c = t.concat_channels(v[0], v[1])?;
                let c = t.mean_hw(c)?;
                let x = t.gather_rows(c, &[0, 2, 2])?;
                let y = t.gather_rows(c, &[1, 3, 0])?;
                let d = t.row_distance(x, y)?;
                weighted_sum(t, d, 10)
            })?;
            grad_ok(err)
        }),
        Check::new("grad_network_input", || {
            let model = small_network()?;
            let x = Tensor::from_fn(&[1, 1, 32, 16], {
                let mut r = rng(10);
                move |_| r.random_range(0.0..1.0)
            });
            let mut worst = 0.0f64;
            for mode in [Mode::Train, Mode::Eval] {
                let err = gradcheck(
                    |t, v| {
                        let pass = model.forward(t, v, mode, false)?;
                        weighted_sum(t, pass.descriptor, 11)
                    },
                    &x,
                    FD_EPSILON,
                )?;
                worst = worst.max(err);
            }
            grad_ok(worst)
        }),
        Check::new("grad_network_params", || {
            let model = small_network()?;
            let x = Tensor::from_fn(&[2, 1, 32, 16], {
                let mut r = rng(12);
                move |_| r.random_range(0.0..1.0)
            });
            grad_ok(network_param_gradcheck(&model, &x, Mode::Train, 4)?)
        }),
        Check::new("backward_linearity", || {
            // Gradients of f + 2g equal grad f + 2 grad g.
            let x = random_tensor(&[1, 2, 4, 3], &mut rng(13));
            let w = random_tensor(&[2, 2, 3, 3], &mut rng(14));
            let grad_of = |cf: f64, cg: f64| -> Result<Tensor<f64>> {
                let mut t = Tape::new();
                let xv = t.variable(x.clone());
                let wv = t.constant(w.clone());
                let y = t.conv2d(xv, wv, None, ConvGeometry::same(3, 3))?;
                let f = weighted_sum(&mut t, y, 15)?;
                let s = t.sigmoid(xv)?;
                let g = weighted_sum(&mut t, s, 16)?;
                let f = t.scale(f, cf)?;
                let g = t.scale(g, cg)?;
                let l = t.add(f, g)?;
                let mut grads = t.backward(l)?;
                grads.take(xv).ok_or_else(|| Error::contract("missing gradient"))
            };
            let (gf, gg, gs) = (grad_of(1.0, 0.0)?, grad_of(0.0, 1.0)?, grad_of(1.0, 2.0)?);
            let err = gf
                .data()
                .iter()
                .zip(gg.data())
                .zip(gs.data())
                .map(|((a, b), s)| (a + 2.0 * b - s).abs())
                .fold(0.0, f64::max);
            within(err, 1e-12, "max deviation")
        }),
        Check::new("conv2d_direct_oracle", || {
            let mut worst = 0.0f64;
            for case in 0..20u64 {
                let mut r = rng(100 + case);
                let stride = if case % 3 == 0 { 2 } else { 1 };
                let k = if stride == 2 { (2, 2) } else { [(1, 1), (3, 3), (5, 5), (3, 1)][case as usize % 4] };
                let (n, c, o) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
                let (h, w) = (2 * r.random_range(2..6), 2 * r.random_range(1..5));
                let x = random_tensor(&[n, c, h, w], &mut r);
                let wt = random_tensor(&[o, c, k.0, k.1], &mut r);
                let b = random_tensor(&[o], &mut r);
                let mut t = Tape::new();
                let (xv, wv, bv) = (t.constant(x.clone()), t.constant(wt.clone()), t.constant(b.clone()));
                let geom = if stride == 1 { ConvGeometry::same(k.0, k.1) } else { ConvGeometry::tiled(2) };
                let y = t.conv2d(xv, wv, Some(bv), geom)?;
                let expect = oracle::conv2d(&x, &wt, Some(&b), stride)?;
                for (a, e) in t.value(y).data().iter().zip(expect.data()) {
                    worst = worst.max((a - e).abs());
                }
            }
            within(worst, 1e-5, "max deviation")
        }),
        Check::new("conv_transpose_adjoint", || {
            let mut r = rng(16);
            let x = random_tensor(&[2, 3, 6, 4], &mut r);
            let y = random_tensor(&[2, 5, 3, 2], &mut r);
            let w = random_tensor(&[5, 3, 2, 2], &mut r);
            // The transposed conv uses (in, out, kh, kw) weights; the stride-2
            // conv's (out, in, kh, kw) layout is the same tensor.
            let mut t = Tape::new();
            let (xv, yv, wv) = (t.constant(x.clone()), t.constant(y.clone()), t.constant(w));
            let cx = t.conv2d(xv, wv, None, ConvGeometry::tiled(2))?;
            let ty = t.conv_transpose2x2(yv, wv, None)?;
            let lhs: f64 = t.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(t.value(ty).data()).map(|(a, b)| a * b).sum();
            within((lhs - rhs).abs(), 1e-5, "|<Cx,y> - <x,C'y>|")
        }),
        Check::new("conv_shift_equivariance", || {
            let mut r = rng(17);
            let x = random_tensor(&[1, 2, 12, 5], &mut r);
            let w = random_tensor(&[3, 2, 3, 3], &mut r);
            let mut worst = 0.0f64;
            for shift in [1isize, 5, 11] {
                let mut t = Tape::new();
                let (xv, sv, wv) = (t.constant(x.clone()), t.constant(x.roll(2, shift)?), t.constant(w.clone()));
                let y = t.conv2d(xv, wv, None, ConvGeometry::same(3, 3))?;
                let ys = t.conv2d(sv, wv, None, ConvGeometry::same(3, 3))?;
                let rolled = t.value(y).roll(2, shift)?;
                for (a, b) in rolled.data().iter().zip(t.value(ys).data()) {
                    worst = worst.max((a - b).abs());
                }
            }
            within(worst, 1e-12, "max deviation")
        }),
        Check::new("network_shift_invariance", || {
            let model: RadarLocModel<f32> = small_network()?.cast();
            let x = Tensor::from_fn(&[1, 1, 32, 16], {
                let mut r = rng(18);
                move |_| r.random_range(0.0f32..1.0)
            });
            let base = model.embed(&x)?;
            let mut worst = 0.0f64;
            for k in 1..2 {
                let shifted = model.embed(&x.roll(2, 16 * k)?)?;
                for (a, b) in base.data().iter().zip(shifted.data()) {
                    worst = worst.max((a - b).abs() as f64);
                }
            }
            within(worst, 1e-5, "max deviation")
        }),
        Check::new("knn_exhaustive_oracle", || {
            let mut r = rng(19);
            let entries: Vec<Vec<f32>> = (0..500)
                .map(|_| (0..4).map(|_| r.random_range(0..5) as f32 * 0.5).collect())
                .collect();
            let index = DescriptorIndex::build(
                "oracle",
                entries
                    .iter()
                    .enumerate()
                    .map(|(i, v)| Descriptor {
                        id: i.to_string(),
                        pose: Pose {
                            timestamp: 0.0,
                            x: 0.0,
                            y: 0.0,
                            yaw: 0.0,
                        },
                        values: v.clone(),
                    })
                    .collect(),
            )?;
            for q in 0..100 {
                let query: Vec<f32> = (0..4).map(|_| r.random_range(-1.0f32..3.0)).collect();
                let k = 1 + q % 25;
                let got: Vec<(usize, f64)> = index.knn(&query, k)?.iter().map(|h| (h.entry, h.distance)).collect();
                if got != oracle::knn(&entries, &query, k) {
                    return Err(Error::contract(format!("query {q}: knn differs from exhaustive sort")));
                }
            }
            Ok("100 queries on 500 entries match exactly".into())
        }),
        Check::new("batch_hard_oracle", || {
            for case in 0..50u64 {
                let mut r = rng(200 + case);
                let n = r.random_range(2..20);
                let desc: Vec<Vec<f32>> = (0..n)
                    .map(|_| (0..3).map(|_| r.random_range(0..3) as f32).collect())
                    .collect();
                let poses: Vec<Pose> = (0..n)
                    .map(|_| Pose {
                        timestamp: 0.0,
                        x: r.random_range(0.0..60.0),
                        y: 0.0,
                        yaw: 0.0,
                    })
                    .collect();
                let rel = SimilarityRelation::from_poses(&poses, &poses, &Default::default());
                let t = Tensor::new(&[n, 3], desc.concat())?;
                let got = batch_hard_mine(&t, &rel, None)?;
                if (got.triples.clone(), got.skipped) != oracle::batch_hard(&desc, &rel) {
                    return Err(Error::contract(format!("batch {case}: mining differs from the O(N^2) scan")));
                }
            }
            Ok("50 random batches match exactly".into())
        }),
        Check::new("scancontext_shift_oracle", || {
            let mut worst = 0.0f64;
            for case in 0..20u64 {
                let mut r = rng(300 + case);
                let (s, k) = (r.random_range(1..12), r.random_range(1..6));
                let mk = |r: &mut ChaCha8Rng| {
                    let m = (0..s * k)
                        .map(|_| if r.random::<f64>() < 0.2 { 0.0 } else { r.random::<f32>() })
                        .collect();
                    ScanContextDescriptor::from_parts(s, k, m)
                };
                let (a, b) = (mk(&mut r)?, mk(&mut r)?);
                worst = worst.max((scancontext_distance(&a, &b)? - oracle::scancontext(&a, &b)).abs());
                worst = worst.max(scancontext_distance_at(&a, &a, 0));
            }
            within(worst, 1e-6, "max deviation")
        }),
        Check::new("recall_monotone_and_oracle", || {
            for case in 0..50u64 {
                let mut r = rng(400 + case);
                let mk = |r: &mut ChaCha8Rng, i: usize| Descriptor {
                    id: i.to_string(),
                    pose: Pose {
                        timestamp: 0.0,
                        x: r.random_range(0.0..50.0),
                        y: r.random_range(0.0..50.0),
                        yaw: 0.0,
                    },
                    values: (0..3).map(|_| r.random::<f32>()).collect(),
                };
                let map: Vec<Descriptor> = (0..r.random_range(1..40)).map(|i| mk(&mut r, i)).collect();
                let queries: Vec<Descriptor> = (0..r.random_range(1..15)).map(|i| mk(&mut r, i)).collect();
                let thresholds = [2.0, 5.0, 10.0, 25.0];
                let index = DescriptorIndex::build("fuzz", map)?;
                let report = evaluate(&index, &queries, 10, &thresholds)?;
                report.check_monotone()?;
                for (t, &d) in thresholds.iter().enumerate() {
                    for n in [1, 3, 10] {
                        if report.recall[t][n - 1] != oracle::recall(&index, &queries, n, d)? {
                            return Err(Error::contract(format!("set {case}: Recall@{n}({d} m) differs from oracle")));
                        }
                    }
                }
            }
            Ok("50 random descriptor sets".into())
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_standard_checks_pass() {
        let checks = standard_checks();
        assert!(checks.len() >= 12);
        let outcomes = run_checks(&checks, |_| {});
        let failed: Vec<String> = outcomes
            .iter()
            .filter(|o| !o.passed)
            .map(|o| format!("{}: {}", o.name, o.detail))
            .collect();
        assert!(failed.is_empty(), "{failed:?}");
    }

    #[test]
    fn injected_bug_is_named() {
        let outcomes = run_checks(&[injected_gradient_bug()], |_| {});
        assert!(!outcomes[0].passed);
        assert_eq!(outcomes[0].name, "injected_gradient_bug");
    }

    #[test]
    fn oracle_conv_matches_hand_example() {
        // 1x1 kernel of weight 2 and bias 1 doubles and shifts the input.
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(&[1], vec![1.0]).unwrap();
        let y = oracle::conv2d(&x, &w, Some(&b), 1).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 7.0, 9.0]);
    }
}
