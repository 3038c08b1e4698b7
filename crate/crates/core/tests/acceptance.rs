//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! The three desk-scale reproductions share one experiment directory under
//! the cargo target tmpdir. The pipeline is resumable, so only the first run
//! pays for training.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use licprune::codec::{CodecConfig, CodecModel, LatentQuant};
use licprune::config::{Duration, ExperimentConfig, PruneMode};
use licprune::criteria::{Criterion, Direction};
use licprune::data::write_synthetic_corpus;
use licprune::eval::{bd_rate, RDCurve, RDPoint};
use licprune::nas::{alpha_outer_search, layer_ratio_search, InjectedLandscape, SearchConfig, Termination};
use licprune::pipeline::{Pipeline, RunSpec, RunSummary};
use licprune::pruner::{apply_masks, compact, min_keep, sparsity, LayerShape, StructuredMask};
use licprune::quant::{clip_bounds, quant_code, quantize_weights, QuantParams, Signedness};
use licprune::Tensor;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: impl Into<String>, fail: impl Into<String>) -> Outcome {
    if cond {
        Ok(ok.into())
    } else {
        Err(fail.into())
    }
}

fn quantizer_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for bits in [2u32, 4, 8] {
        let (lo, hi) = clip_bounds(bits, Signedness::UnsignedWeights);
        for _ in 0..200 {
            let s = 10f64.powf(rng.random_range(-4.0..0.0));
            let z = rng.random_range(0..=hi as u64) as f64;
            let p = QuantParams::per_tensor(s, z, bits, Signedness::UnsignedWeights).map_err(|e| e.to_string())?;
            let grid: Vec<f64> = (0..=hi as u64).map(|q| s * (q as f64 - z)).collect();
            let out = quantize_weights(&grid, 1, &p).map_err(|e| e.to_string())?;
            for (g, o) in grid.iter().zip(&out) {
                if g != o || quant_code(*g, s, z, lo, hi) != (g / s + z).round() {
                    return Err(format!("grid value {} came back as {}", g, o));
                }
            }
            let zero = quantize_weights(&[0.0], 1, &p).map_err(|e| e.to_string())?[0];
            if zero != 0.0 {
                return Err(format!("zero mapped to {} (s={}, z={})", zero, s, z));
            }
            let big = quantize_weights(&[s * (hi - z) * 10.0 + 1.0, -s * (z + 1.0) * 10.0 - 1.0], 1, &p)
                .map_err(|e| e.to_string())?;
            if big[0] != s * (hi - z) || big[1] != s * (lo - z) {
                return Err(format!("saturation gave {:?}", big));
            }
            let inside: Vec<f64> = (0..50).map(|_| rng.random_range(s * (lo - z)..s * (hi - z))).collect();
            let q = quantize_weights(&inside, 1, &p).map_err(|e| e.to_string())?;
            if let Some((a, b)) = inside.iter().zip(&q).find(|(a, b)| (*a - *b).abs() > s / 2.0 * (1.0 + 1e-12)) {
                return Err(format!("error {} exceeds s/2 = {}", (a - b).abs(), s / 2.0));
            }
        }
    }
    let t = start.elapsed().as_secs_f64();
    check(t < 1.0, format!("grid, saturation, zero and s/2 bounds hold ({:.3} s)", t), format!("too slow: {:.3} s", t))
}

/// Candidate counts by direct enumeration.
fn brute_force_choice(channels: usize, group: usize, delta: &dyn Fn(usize) -> f64, alpha: f64) -> usize {
    let limit = channels - min_keep(channels);
    (1..=limit).filter(|n| n % group == 0 || *n == limit).filter(|&n| delta(n) <= alpha).max().unwrap_or(0)
}

fn selection_rule() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..1000 {
        let channels = rng.random_range(2..160usize);
        let group = rng.random_range(1..9usize);
        let table: Vec<f64> = (0..=channels).map(|_| rng.random_range(-0.05..0.3)).collect();
        let alpha = rng.random_range(0.0..0.25);
        let t2 = table.clone();
        let mut target = InjectedLandscape {
            shapes: vec![LayerShape { layer_id: "l".into(), out_ch: channels, in_ch: 3, kernel_area: 9 }],
            delta: move |_: &str, _: Direction, _: usize, n: usize| t2[n],
        };
        let cfg = SearchConfig { group_size: group, ..SearchConfig::default() };
        let r = layer_ratio_search(&mut target, "l", Direction::OutputMaps, 0, alpha, &cfg).map_err(|e| e.to_string())?;
        let expect = brute_force_choice(channels, group, &|n| table[n], alpha);
        if r.chosen_pruned != expect {
            return Err(format!("trial {}: chose {} but the maximum admissible count is {}", trial, r.chosen_pruned, expect));
        }
    }
    let t = start.elapsed().as_secs_f64();
    check(t < 10.0, format!("1000 landscapes match brute force ({:.2} s)", t), format!("too slow: {:.2} s", t))
}

fn outer_convergence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut hits = 0;
    let mut misses = Vec::new();
    for trial in 0..100 {
        let layers = rng.random_range(8..16usize);
        let shapes: Vec<LayerShape> = (0..layers)
            .map(|i| LayerShape {
                layer_id: format!("l{:02}", i),
                out_ch: [32, 48, 64, 96][rng.random_range(0..4)],
                in_ch: [32, 48, 64, 96][rng.random_range(0..4)],
                kernel_area: [9, 25][rng.random_range(0..2)],
            })
            .collect();
        let mut coef = BTreeMap::new();
        for s in &shapes {
            for d in [Direction::OutputMaps, Direction::InputMaps] {
                coef.insert((s.layer_id.clone(), d), (rng.random_range(0.005..0.5), rng.random_range(1.0..3.0)));
            }
        }
        let widths: BTreeMap<String, (usize, usize)> =
            shapes.iter().map(|s| (s.layer_id.clone(), (s.out_ch, s.in_ch))).collect();
        let mut target = InjectedLandscape {
            shapes,
            delta: move |id: &str, d: Direction, _: usize, n: usize| {
                let (a, p) = coef[&(id.to_string(), d)];
                let c = match d {
                    Direction::OutputMaps => widths[id].0,
                    Direction::InputMaps => widths[id].1,
                };
                a * (n as f64 / c as f64).powf(p)
            },
        };
        let s_target = rng.random_range(0.15..0.75);
        let cfg = SearchConfig { s_target, alpha_init: 0.05, group_size: 4, ..SearchConfig::default() };
        let (_, trace) = alpha_outer_search(&mut target, &cfg).map_err(|e| e.to_string())?;
        let s = trace.outer_iters.last().map_or(f64::NAN, |i| i.achieved_s);
        if trace.terminated == Termination::Converged && (s - s_target).abs() <= 0.01 && trace.outer_iters.len() <= 30 {
            hits += 1;
        } else {
            misses.push(trial);
        }
    }
    let t = start.elapsed().as_secs_f64();
    check(
        hits >= 99 && t < 30.0,
        format!("{}/100 converged ({:.2} s)", hits, t),
        format!("{}/100 converged ({:.2} s), misses {:?}", hits, t, misses),
    )
}

fn sparsity_arithmetic() -> Outcome {
    let start = Instant::now();
    let model = CodecModel::new(CodecConfig::desk(), 0).map_err(|e| e.to_string())?;
    let id = "g_a.2";
    let c = model.conv_layer(id).ok_or("missing layer")?;
    let mut m = StructuredMask::full(id, c.out_ch, c.in_ch);
    for i in 0..c.out_ch / 4 {
        m.keep_out[i] = false;
    }
    for i in 0..c.in_ch / 4 {
        m.keep_in[2 * i] = false;
    }
    let rep = sparsity(&model, &[m]).map_err(|e| e.to_string())?;
    let layer = &rep.per_layer[id];
    let reduction = 1.0 - layer.after as f64 / layer.before as f64;
    if reduction != 0.4375 {
        return Err(format!("single-layer reduction {} instead of 0.4375", reduction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let masks = random_masks(&model, &mut rng, 0.6);
        let rep = sparsity(&model, &masks).map_err(|e| e.to_string())?;
        let mut pruned = 0usize;
        let mut total = 0usize;
        for id in model.prunable_layer_ids() {
            let c = model.conv_layer(&id).expect("prunable");
            let m = masks.iter().find(|m| m.layer_id == id);
            for o in 0..c.out_ch {
                for i in 0..c.in_ch {
                    for _ in 0..c.kernel * c.kernel {
                        total += 1;
                        if let Some(m) = m {
                            if !m.keep_out[o] || !m.keep_in[i] {
                                pruned += 1;
                            }
                        }
                    }
                }
            }
        }
        if rep.pruned_params != pruned || rep.total_prunable_params != total {
            return Err(format!("report {}/{} vs elementwise {}/{}", rep.pruned_params, rep.total_prunable_params, pruned, total));
        }
    }
    let t = start.elapsed().as_secs_f64();
    check(t < 5.0, format!("43.75% exact, 20 random masks match elementwise counts ({:.2} s)", t), format!("too slow: {:.2} s", t))
}

fn random_masks(model: &CodecModel, rng: &mut ChaCha8Rng, max_frac: f64) -> Vec<StructuredMask> {
    let mut out = Vec::new();
    for id in model.prunable_layer_ids() {
        if rng.random_bool(0.2) {
            continue;
        }
        let c = model.conv_layer(&id).expect("prunable");
        let mut m = StructuredMask::full(&id, c.out_ch, c.in_ch);
        for (keep, n) in [(&mut m.keep_out, c.out_ch), (&mut m.keep_in, c.in_ch)] {
            let drop = rng.random_range(0..=((n as f64 * max_frac) as usize).min(n - min_keep(n)));
            let mut idx: Vec<usize> = (0..n).collect();
            for k in 0..drop {
                let j = rng.random_range(k..n);
                idx.swap(k, j);
                keep[idx[k]] = false;
            }
        }
        out.push(m);
    }
    out
}

fn compaction_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for draw in 0..20 {
        let model = CodecModel::new(CodecConfig::desk(), 100 + draw).map_err(|e| e.to_string())?;
        let masks = random_masks(&model, &mut rng, 0.7);
        let masked = apply_masks(&model, &masks).map_err(|e| e.to_string())?;
        let small = compact(&model, &masks).map_err(|e| e.to_string())?;
        let data: Vec<f64> = (0..3 * 64 * 64).map(|_| rng.random::<f64>()).collect();
        let x = Tensor::from_vec([1, 3, 64, 64], data).map_err(|e| e.to_string())?;
        let a = masked.eval_forward(&x).map_err(|e| e.to_string())?;
        let b = small.eval_forward(&x).map_err(|e| e.to_string())?;
        let ly = a.likelihood_y.iter().zip(&b.likelihood_y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        worst = worst.max(a.x_hat.max_abs_diff(&b.x_hat)).max(a.y_hat.max_abs_diff(&b.y_hat)).max(ly);
    }
    let t = start.elapsed().as_secs_f64();
    check(
        worst < 1e-5 && t < 60.0,
        format!("max abs diff {:.2e} over 20 draws ({:.1} s)", worst, t),
        format!("max abs diff {:.2e} ({:.1} s)", worst, t),
    )
}

/// Least-squares cubic through `(psnr, ln rate)` samples, coefficients low to high.
fn fit_cubic(psnr: &[f64], log_rate: &[f64]) -> [f64; 4] {
    let a = nalgebra::DMatrix::from_fn(psnr.len(), 4, |r, c| psnr[r].powi(c as i32));
    let b = nalgebra::DVector::from_column_slice(log_rate);
    let x = a.svd(true, true).solve(&b, 1e-14).expect("solvable");
    [x[0], x[1], x[2], x[3]]
}

/// BD-rate from independently fitted cubics, integrated by a dense trapezoid rule.
fn trapezoid_bd(reference: &RDCurve, test: &RDCurve) -> f64 {
    let fit = |c: &RDCurve| {
        let q: Vec<f64> = c.points.iter().map(|p| p.psnr_db).collect();
        let r: Vec<f64> = c.points.iter().map(|p| p.bpp.ln()).collect();
        (fit_cubic(&q, &r), q)
    };
    let (cr, qr) = fit(reference);
    let (ct, qt) = fit(test);
    let lo = qr.iter().cloned().fold(f64::INFINITY, f64::min).max(qt.iter().cloned().fold(f64::INFINITY, f64::min));
    let hi = qr.iter().cloned().fold(f64::NEG_INFINITY, f64::max).min(qt.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let eval = |c: &[f64; 4], d: f64| c[0] + d * (c[1] + d * (c[2] + d * c[3]));
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let d = lo + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        acc += w * (eval(&ct, d) - eval(&cr, d));
    }
    ((acc * h / (hi - lo)).exp() - 1.0) * 100.0
}

fn curve_from(f: &dyn Fn(f64) -> f64, psnrs: &[f64], label: &str) -> RDCurve {
    let pts = psnrs.iter().enumerate().map(|(i, &d)| RDPoint { lambda: (i + 1) as f64, bpp: f(d).exp(), psnr_db: d }).collect();
    RDCurve::new(label, pts).expect("valid curve")
}

fn bd_rate_oracle() -> Outcome {
    let start = Instant::now();
    let pts = [
        RDPoint { lambda: 1.0, bpp: 0.2, psnr_db: 28.0 },
        RDPoint { lambda: 2.0, bpp: 0.35, psnr_db: 30.1 },
        RDPoint { lambda: 3.0, bpp: 0.6, psnr_db: 32.0 },
        RDPoint { lambda: 4.0, bpp: 0.95, psnr_db: 34.2 },
        RDPoint { lambda: 5.0, bpp: 1.4, psnr_db: 36.1 },
    ];
    let base = RDCurve::new("a", pts.to_vec()).map_err(|e| e.to_string())?;
    let same = bd_rate(&base, &base).map_err(|e| e.to_string())?;
    if same.abs() > 1e-9 {
        return Err(format!("identical curves gave {}", same));
    }
    let doubled = RDCurve::new("b", pts.iter().map(|p| RDPoint { bpp: 2.0 * p.bpp, ..*p }).collect()).map_err(|e| e.to_string())?;
    let d = bd_rate(&base, &doubled).map_err(|e| e.to_string())?;
    if ((d - 100.0) / 100.0).abs() > 1e-6 {
        return Err(format!("doubled rate gave {}", d));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (a, b, c3) = (rng.random_range(-2.5..-1.0), rng.random_range(0.12..0.25), rng.random_range(-0.002..0.002));
        let (o, p, q) = (rng.random_range(-0.2..0.3), rng.random_range(-0.02..0.02), rng.random_range(-0.001..0.001));
        let (amp, freq) = (rng.random_range(0.0..0.05), rng.random_range(0.1..0.4));
        let reference = move |d: f64| a + b * (d - 30.0) + c3 * (d - 30.0).powi(3) / 10.0 + amp * (freq * d).sin();
        let test = move |d: f64| reference(d) + o + p * (d - 30.0) + q * (d - 30.0).powi(2) + 0.02 * (d / 3.0).exp().ln_1p();
        let rp: Vec<f64> = (0..5).map(|i| 26.0 + 2.5 * i as f64 + rng.random_range(-0.5..0.5)).collect();
        let tp: Vec<f64> = (0..5).map(|i| 26.5 + 2.5 * i as f64 + rng.random_range(-0.5..0.5)).collect();
        let (rc, tc) = (curve_from(&reference, &rp, "r"), curve_from(&test, &tp, "t"));
        let got = bd_rate(&rc, &tc).map_err(|e| e.to_string())?;
        let want = trapezoid_bd(&rc, &tc);
        worst = worst.max((got - want).abs());
    }
    let t = start.elapsed().as_secs_f64();
    check(
        worst <= 0.1 && t < 10.0,
        format!("identical {:.1e}, doubled {:.6}%, worst trapezoid gap {:.4} pp ({:.2} s)", same, d, worst, t),
        format!("worst trapezoid gap {:.4} pp ({:.2} s)", worst, t),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = CodecConfig::mean_scale(4, 6, 3).map_err(|e| e.to_string())?;
    let mut model = CodecModel::new(cfg, 7).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data: Vec<f64> = (0..2 * 3 * 64 * 64).map(|_| rng.random::<f64>()).collect();
    let x = Tensor::from_vec([2, 3, 64, 64], data).map_err(|e| e.to_string())?;
    let lambda = 0.01;
    let loss = |m: &mut CodecModel| -> f64 {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        m.zero_grad();
        m.loss_and_grad(&x, lambda, LatentQuant::Noise, &mut r).expect("loss").total
    };
    loss(&mut model);
    let mut grads: Vec<(String, usize, f64)> = Vec::new();
    let mut pick = ChaCha8Rng::seed_from_u64(10);
    model.visit_params(|name, p| {
        for _ in 0..3 {
            let i = pick.random_range(0..p.value.len());
            grads.push((name.to_string(), i, p.grad[i]));
        }
    });
    // Each entry is compared at three step sizes and the closest one counts.
    // Large steps can straddle a ReLU kink and small ones drown in rounding
    // error over the 24k-pixel sum, but a wrong backward pass misses at all three.
    let steps = [1e-4, 1e-5, 1e-6];
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    for (name, i, g) in &grads {
        let nudge = |m: &mut CodecModel, delta: f64| {
            m.visit_params(|n, p| {
                if n == name {
                    p.value[*i] += delta;
                }
            })
        };
        let mut best = f64::INFINITY;
        let mut best_fd = 0.0;
        for h in steps {
            nudge(&mut model, h);
            let up = loss(&mut model);
            nudge(&mut model, -2.0 * h);
            let down = loss(&mut model);
            nudge(&mut model, h);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-4);
            if err < best {
                best = err;
                best_fd = fd;
            }
        }
        if best > worst {
            worst = best;
            worst_name = format!("{}[{}] analytic {:.6e} numeric {:.6e}", name, i, g, best_fd);
        }
    }
    let t = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-2 && t < 60.0,
        format!("{} entries, worst relative error {:.2e} ({:.1} s)", grads.len(), worst, t),
        format!("worst relative error {:.2e} at {} ({:.1} s)", worst, worst_name, t),
    )
}

struct Desk {
    runs: BTreeMap<&'static str, RunSummary>,
    seconds: BTreeMap<String, f64>,
}

fn desk_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("desk-acceptance")
}

fn desk_config(root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train_dir = root.join("data/train");
    cfg.data.eval_dir = root.join("data/eval");
    cfg.output_dir = root.join("out");
    cfg.schedule.baseline = Duration::Steps(3000);
    cfg.schedule.prune_finetune = Duration::Steps(600);
    cfg.schedule.pq_pre = Duration::Steps(200);
    cfg.schedule.pq_post = Duration::Steps(400);
    cfg
}

fn desk_specs() -> Vec<(&'static str, RunSpec)> {
    let chip = Criterion::Chip;
    vec![
        ("nas30", RunSpec::new(PruneMode::Nas, chip, 0.30, true, None)),
        ("nas45", RunSpec::new(PruneMode::Nas, chip, 0.45, true, None)),
        ("nas60", RunSpec::new(PruneMode::Nas, chip, 0.60, true, None)),
        ("pq20", RunSpec::new(PruneMode::Nas, chip, 0.20, true, Some(8))),
        ("p80", RunSpec::new(PruneMode::Nas, chip, 0.80, true, None)),
        ("fc30", RunSpec::new(PruneMode::Fixed, chip, 0.30, true, None)),
        ("f30", RunSpec::new(PruneMode::Fixed, chip, 0.30, false, None)),
    ]
}

fn run_desk() -> Result<Desk, String> {
    let root = desk_dir();
    let train = root.join("data/train");
    if !train.exists() {
        write_synthetic_corpus(&train, 64, 128, 128, 11).map_err(|e| e.to_string())?;
        write_synthetic_corpus(&root.join("data/eval"), 24, 128, 192, 12).map_err(|e| e.to_string())?;
    }
    let mut p = Pipeline::open(desk_config(&root)).map_err(|e| e.to_string())?;
    let mut runs = BTreeMap::new();
    for (key, spec) in desk_specs() {
        let s = p.run(&spec).map_err(|e| format!("{}: {}", spec.name, e))?;
        runs.insert(key, s);
    }
    p.report().map_err(|e| e.to_string())?;
    let mut seconds = BTreeMap::new();
    for (k, r) in &p.manifest().stages {
        let group = k.split('/').take(2).collect::<Vec<_>>().join("/");
        *seconds.entry(group).or_insert(0.0) += r.seconds;
    }
    Ok(Desk { runs, seconds })
}

fn stage_seconds(d: &Desk, prefixes: &[&str]) -> f64 {
    d.seconds.iter().filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p))).map(|(_, v)| v).sum()
}

fn bd(d: &Desk, key: &str) -> Result<f64, String> {
    d.runs[key].bd_rate.ok_or_else(|| format!("{} has no BD-rate", key))
}

fn table1_ordering(d: &Desk) -> Outcome {
    let (nas, fc, f) = (bd(d, "nas30")?, bd(d, "fc30")?, bd(d, "f30")?);
    let names: Vec<String> = ["nas30", "fc30", "f30"].iter().map(|k| d.runs[k].spec.name.clone()).collect();
    let mut prefixes = vec!["baseline".to_string()];
    for n in &names {
        prefixes.push(format!("plan/{}", n));
        prefixes.push(format!("run/{}", n));
    }
    let t = stage_seconds(d, &prefixes.iter().map(String::as_str).collect::<Vec<_>>());
    let msg = format!("BD-rate NAS {:+.3}% <= fixed F+C {:+.3}% <= filters-only {:+.3}% ({:.0} s)", nas, fc, f, t);
    check(nas <= fc && fc <= f && t <= 7200.0, msg.clone(), msg)
}

fn table3_tradeoff(d: &Desk) -> Outcome {
    let pq = &d.runs["pq20"];
    let p80 = &d.runs["p80"];
    let ratios: Vec<f64> = pq.per_lambda.iter().map(|l| l.size.compression_ratio).collect();
    let in_range = ratios.iter().all(|r| (4.5..=5.0).contains(r));
    let (bq, b80) = (bd(d, "pq20")?, bd(d, "p80")?);
    let (rq, r80) = (pq.mean_ratio(), p80.mean_ratio());
    let t = stage_seconds(
        d,
        &["baseline", &format!("plan/{}", pq.spec.name), &format!("run/{}", pq.spec.name), &format!("plan/{}", p80.spec.name), &format!("run/{}", p80.spec.name)],
    );
    let msg = format!(
        "P20+8bit ratios {:?} BD {:+.3}% vs P80 ratio {:.2} BD {:+.3}% ({:.0} s)",
        ratios.iter().map(|r| format!("{:.3}", r)).collect::<Vec<_>>(),
        bq,
        r80,
        b80,
        t
    );
    check(in_range && bq < b80 && rq >= r80 && t <= 7200.0, msg.clone(), msg)
}

fn sparsity_targeting(d: &Desk) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut bds = Vec::new();
    for (key, target) in [("nas30", 0.30), ("nas45", 0.45), ("nas60", 0.60)] {
        let r = &d.runs[key];
        for l in &r.per_lambda {
            if (l.s - target).abs() > 0.01 || l.termination != Some(Termination::Converged) {
                ok = false;
                lines.push(format!("{} lambda {} S {:.4}", key, l.lambda, l.s));
            }
        }
        bds.push(bd(d, key)?);
    }
    let monotone = bds[0] <= bds[1] && bds[1] <= bds[2];
    let names: Vec<String> = ["nas30", "nas45", "nas60"].iter().map(|k| d.runs[k].spec.name.clone()).collect();
    let mut prefixes = vec!["baseline".to_string()];
    for n in &names {
        prefixes.push(format!("plan/{}", n));
        prefixes.push(format!("run/{}", n));
    }
    let t = stage_seconds(d, &prefixes.iter().map(String::as_str).collect::<Vec<_>>());
    let msg = format!(
        "BD-rates {:+.3} / {:+.3} / {:+.3} %, {} ({:.0} s)",
        bds[0],
        bds[1],
        bds[2],
        if lines.is_empty() { "all within 0.01".to_string() } else { lines.join("; ") },
        t
    );
    check(ok && monotone && t <= 3.0 * 3600.0, msg.clone(), msg)
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).is_test(true).try_init();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("quantizer exactness", quantizer_exactness()),
        ("largest admissible pruned count", selection_rule()),
        ("outer tolerance search convergence", outer_convergence()),
        ("sparsity arithmetic", sparsity_arithmetic()),
        ("compaction equivalence", compaction_equivalence()),
        ("BD-rate oracle", bd_rate_oracle()),
        ("RD loss gradient check", gradient_check()),
    ];
    let skip_desk = std::env::var_os("LICPRUNE_SKIP_DESK").is_some();
    if skip_desk {
        println!("SKIP desk-scale criteria (LICPRUNE_SKIP_DESK is set)");
    } else {
        match run_desk() {
            Ok(d) => {
                results.push(("pruning type ordering at 30% sparsity", table1_ordering(&d)));
                results.push(("pruning plus 8-bit versus heavy pruning", table3_tradeoff(&d)));
                results.push(("sparsity targeting at 30/45/60%", sparsity_targeting(&d)));
            }
            Err(e) => {
                for name in ["pruning type ordering at 30% sparsity", "pruning plus 8-bit versus heavy pruning", "sparsity targeting at 30/45/60%"] {
                    results.push((name, Err(format!("desk experiment failed: {}", e))));
                }
            }
        }
    }
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(m) => println!("PASS {}: {}", name, m),
            Err(m) => {
                failed += 1;
                println!("FAIL {}: {}", name, m);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
