//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cpcomp::conv::{conv_forward, conv_forward_decomposed, ConvSpec};
use cpcomp::network::{alexnet, cp_mult_count, cp_param_count, decompose_layer, format, random_network, LayerKind, LayerPlan};
use cpcomp::rank::{allocate_ranks, scaled_ranks, Budgets, Group, SensitivityReport};
use cpcomp::train::{evaluate, iterative_compress, oneshot_compress, synthetic_patterns, toy_network, train_baseline, TrainConfig};
use cpcomp::{decompose_kernel, reconstruct, residual_curve, truncated_svd, CpFactors, DenseTensor, TpmConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
    DenseTensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn rel_inf(a: &DenseTensor, b: &DenseTensor) -> f64 {
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    diff / b.max_abs().max(f64::MIN_POSITIVE)
}

fn rel_fro(a: &DenseTensor, b: &DenseTensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / cpcomp::frobenius_norm(b).max(f64::MIN_POSITIVE)
}

/// `Σ_r u3[t,r]·u1[r,s]·u2[r,j,i]` written out independently of the library.
fn naive_kernel(f: &CpFactors) -> Vec<f64> {
    let (r, s, t, d) = (f.rank(), f.in_channels(), f.out_channels(), f.kernel_size());
    let mut k = vec![0.0; t * s * d * d];
    for ti in 0..t {
        for si in 0..s {
            for j in 0..d {
                for i in 0..d {
                    let mut acc = 0.0;
                    for ri in 0..r {
                        acc += f.u3().data()[ti * r + ri] * f.u1().data()[ri * s + si] * f.u2().data()[(ri * d + j) * d + i];
                    }
                    k[((ti * s + si) * d + j) * d + i] = acc;
                }
            }
        }
    }
    k
}

/// Direct convolution by explicit bounds checks instead of a padded buffer.
fn naive_conv(x: &DenseTensor, k: &[f64], t: usize, d: usize, stride: usize, pad: usize) -> DenseTensor {
    let (s, w, h) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (wo, ho) = ((w + 2 * pad - d) / stride + 1, (h + 2 * pad - d) / stride + 1);
    let mut out = vec![0.0; t * wo * ho];
    for ti in 0..t {
        for a in 0..wo {
            for b in 0..ho {
                let mut acc = 0.0;
                for si in 0..s {
                    for j in 0..d {
                        for i in 0..d {
                            let (xw, xh) = ((a * stride + j) as isize - pad as isize, (b * stride + i) as isize - pad as isize);
                            if xw < 0 || xh < 0 || xw >= w as isize || xh >= h as isize {
                                continue;
                            }
                            acc += k[((ti * s + si) * d + j) * d + i] * x.data()[(si * w + xw as usize) * h + xh as usize];
                        }
                    }
                }
                out[(ti * wo + a) * ho + b] = acc;
            }
        }
    }
    DenseTensor::new(vec![t, wo, ho], out).unwrap()
}

fn criterion_1() -> Outcome {
    const CASES: usize = 216;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst, mut worst_oracle) = (0.0f64, 0.0f64);
    for case in 0..CASES {
        let d = [1, 3, 5][case % 3];
        let stride = 1 + (case / 3) % 2;
        let pad = (case / 6) % 3;
        let (s, t, r) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=6));
        let mut extent = || loop {
            let e = rng.random_range(1..=12);
            if e + 2 * pad >= d && (e + 2 * pad - d) % stride == 0 {
                break e;
            }
        };
        let (w, h) = (extent(), extent());
        let spec = ConvSpec::new(t, s, d, stride, pad);
        let f = CpFactors::new(gaussian(&mut rng, &[r, s]), gaussian(&mut rng, &[r, d, d]), gaussian(&mut rng, &[t, r])).unwrap();
        let x = gaussian(&mut rng, &[s, w, h]);
        let decomposed = conv_forward_decomposed(&x, &f, &spec).unwrap();
        let direct = conv_forward(&x, &reconstruct(&f).unwrap(), &spec).unwrap();
        let oracle = naive_conv(&x, &naive_kernel(&f), t, d, stride, pad);
        worst = worst.max(rel_inf(&decomposed, &direct));
        worst_oracle = worst_oracle.max(rel_inf(&decomposed, &oracle)).max(rel_inf(&direct, &oracle));
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-9 && worst_oracle <= 1e-9 && elapsed < Duration::from_secs(30),
        format!("{CASES} cases, worst {worst:.2e} (vs naive oracle {worst_oracle:.2e}), tol 1e-9, {elapsed:.2?} < 30s"),
    )
}

/// `n×k` matrix with orthonormal columns, stored column by column.
fn orthonormal(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    let m = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = m.qr().q();
    (0..k).map(|c| q.column(c).iter().copied().collect()).collect()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_exact = 0.0f64;
    for case in 0..40 {
        let r = 1 + case % 4;
        let (s, t, d) = (rng.random_range(r..=6), rng.random_range(r..=6), [2, 3][rng.random_range(0..2)]);
        let (a, b, c) = (orthonormal(&mut rng, s, r), orthonormal(&mut rng, d * d, r), orthonormal(&mut rng, t, r));
        let scales: Vec<f64> = (0..r).map(|i| 10.0 - 2.0 * i as f64 + rng.random_range(0.0..1.0)).collect();
        let kernel = DenseTensor::from_fn(&[t, s, d, d], |idx| {
            (0..r).map(|q| scales[q] * c[q][idx[0]] * a[q][idx[1]] * b[q][idx[2] * d + idx[3]]).sum()
        });
        let f = decompose_kernel(&kernel, &TpmConfig::new(r).with_seed(case as u64)).unwrap();
        worst_exact = worst_exact.max(rel_fro(&reconstruct(&f).unwrap(), &kernel));
    }
    let mut violations = 0;
    for case in 0..100u64 {
        let (s, t, d) = (rng.random_range(1..=6), rng.random_range(1..=6), [1, 3, 5][rng.random_range(0..3)]);
        let max_rank = rng.random_range(1..=8).min(s * t * d * d);
        let kernel = gaussian(&mut rng, &[t, s, d, d]);
        let curve = residual_curve(&kernel, max_rank, &TpmConfig::new(1).with_seed(case)).unwrap();
        if curve.windows(2).any(|w| w[1] > w[0]) || curve.first().is_some_and(|&x| x > 1.0) {
            violations += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst_exact <= 1e-8 && violations == 0 && elapsed < Duration::from_secs(60),
        format!("exact rank<=4 worst residual {worst_exact:.2e} (tol 1e-8); {violations}/100 increasing curves; {elapsed:.2?} < 60s"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst_full, mut worst_trunc) = (0.0f64, 0.0f64);
    for case in 0..50 {
        let (m, n) = if case == 0 { (64, 48) } else { (rng.random_range(1..=64), rng.random_range(1..=48)) };
        let w = gaussian(&mut rng, &[m, n]);
        let k = m.min(n);
        let full = truncated_svd(&w, k).unwrap();
        worst_full = worst_full.max(rel_fro(&full.reconstruct(), &w));

        let r = rng.random_range(1..=k);
        let approx = truncated_svd(&w, r).unwrap().reconstruct();
        let actual: f64 = w.data().iter().zip(approx.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let a = DMatrix::from_row_slice(m, n, w.data());
        let gram = if m <= n { &a * a.transpose() } else { a.transpose() * &a };
        let mut eig: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|x, y| y.total_cmp(x));
        let oracle = eig[r..].iter().map(|&e| e.max(0.0)).sum::<f64>().sqrt();
        let err = if oracle == 0.0 { actual } else { (actual - oracle).abs() / oracle };
        worst_trunc = worst_trunc.max(err);
    }
    outcome(
        worst_full <= 1e-9 && worst_trunc <= 1e-8,
        format!("50 matrices up to 64x48: full-rank round trip {worst_full:.2e} (tol 1e-9), truncation error vs Gram oracle {worst_trunc:.2e} (tol 1e-8)"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut layers, mut mismatches) = (0, Vec::new());
    for case in 0..20u64 {
        // Redraw until the strides divide the padded extents.
        let mut net = loop {
            let mut plan = Vec::new();
            for _ in 0..3 {
                let d = [1, 3, 5][rng.random_range(0..3)];
                plan.push(LayerPlan::Conv { out_channels: rng.random_range(1..=6), kernel_size: d, stride: rng.random_range(1..=2), padding: d / 2 });
            }
            plan.push(LayerPlan::Flatten);
            for _ in 0..3 {
                plan.push(LayerPlan::Fc { outputs: rng.random_range(1..=8) });
            }
            let extent = rng.random_range(8..=12);
            if let Ok(net) = random_network(&[rng.random_range(1..=4), extent, extent], &plan, case) {
                break net;
            }
        };
        let input_shapes = net.activation_shapes().unwrap();
        for name in net.decomposable_layers() {
            let layer = net.layer(&name).unwrap();
            let bound = match &layer.kind {
                LayerKind::Conv { spec, .. } => spec.in_channels * spec.kernel_size * spec.kernel_size,
                LayerKind::Fc { weights, .. } => weights.shape()[0].min(weights.shape()[1]),
                _ => unreachable!(),
            };
            net = decompose_layer(&net, &name, rng.random_range(1..=bound), rng.random()).unwrap();
        }
        let x = gaussian(&mut rng, net.input_shape());
        let (_, measured) = net.forward_counted(&x).unwrap();
        for (i, l) in net.layers().iter().enumerate() {
            let materialized = |roles: &[&str]| -> u64 {
                l.kind.params().iter().filter(|(role, _)| roles.contains(role)).map(|(_, t)| t.len() as u64).sum()
            };
            let (analytic_params, stored, analytic_mults) = match &l.kind {
                LayerKind::DecomposedConv { spec, factors, .. } => {
                    let (i_shape, o_shape) = (&input_shapes[i], &input_shapes[i + 1]);
                    let r = factors.rank();
                    (
                        cp_param_count(spec, r),
                        materialized(&["u1", "u2", "u3"]),
                        cp_mult_count(spec, r, i_shape[1], i_shape[2], o_shape[1], o_shape[2]),
                    )
                }
                LayerKind::DecomposedFc { factors, .. } => {
                    let rmn = (factors.rank() * (factors.rows() + factors.cols())) as u64;
                    (rmn, materialized(&["ud", "vt"]), rmn)
                }
                _ => continue,
            };
            layers += 1;
            if analytic_params != stored || analytic_mults != measured[i] {
                mismatches.push(format!(
                    "net {case} {}: params {analytic_params} vs {stored}, mults {analytic_mults} vs {}",
                    l.name, measured[i]
                ));
            }
        }
    }
    let detail = format!("{layers} decomposed layers in 20 six-layer nets, {} mismatches", mismatches.len());
    match mismatches.first() {
        None => outcome(layers == 120, detail),
        Some(m) => outcome(false, format!("{detail}; first: {m}")),
    }
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x / target - 1.0).abs() <= tol
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let original = alexnet::original_report();
    let fused = alexnet::compressed_report(&alexnet::REFERENCE_RANKS, alexnet::Convention::FusedInputLayer).unwrap();
    let per_group = alexnet::compressed_report(&alexnet::REFERENCE_RANKS, alexnet::Convention::PerGroup).unwrap();
    let weights = fused.compressed_params() as f64;
    let weight_ratio = original.original_params() as f64 / weights;
    let net = alexnet::compressed_network(&alexnet::REFERENCE_RANKS, 0).unwrap();
    let measured: u64 = alexnet::measured_mults(&net, 0).unwrap().iter().map(|(_, c)| c).sum();
    let mult_ratio = original.original_mults() as f64 / measured as f64;
    let elapsed = start.elapsed();
    let analytic_mult_ratio = fused.speedup_ratio();
    outcome(
        within(weights, 8.7e6, 0.03) && within(weight_ratio, 6.98, 0.03) && within(mult_ratio, 3.53, 0.10) && elapsed < Duration::from_secs(5),
        format!(
            "weights {:.3}M (8.7M ±3%), ratio x{weight_ratio:.3} (x6.98 ±3%), measured mult ratio x{mult_ratio:.3} (x3.53 ±10%; analytic x{analytic_mult_ratio:.3}), {elapsed:.2?} < 5s; per-group convention: x{:.3} weights, x{:.3} mults",
            weights / 1e6,
            per_group.compression_ratio(),
            per_group.speedup_ratio()
        ),
    )
}

fn criterion_6() -> Outcome {
    let report = SensitivityReport::from_losses([
        (Group::Fc, "fc6".to_string(), 28.59),
        (Group::Fc, "fc7".to_string(), 21.50),
        (Group::Fc, "fc8".to_string(), 20.31),
    ]);
    let ranks = allocate_ranks(&report, Budgets { conv: 0, fc: 900 }).unwrap();
    let got: Vec<usize> = ["fc6", "fc7", "fc8"].iter().map(|n| ranks[*n]).collect();
    outcome(got == [365, 275, 260], format!("fc ranks {got:?}, expected [365, 275, 260]"))
}

fn criterion_7() -> Outcome {
    let mut worst = (0.0f64, String::new());
    for (label, net) in common::gradient_check_nets() {
        let (e, at) = common::check_net(&net, 7);
        if e >= worst.0 {
            worst = (e, format!("{label}: {at}"));
        }
    }
    outcome(worst.0 <= 1e-4, format!("worst relative error {:.2e} at {} (tol 1e-4)", worst.0, worst.1))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let (mut baseline, mut iterative, mut oneshot) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let data = synthetic_patterns(2000, 500, seed).unwrap();
        let (base, _) = train_baseline(&toy_network(seed).unwrap(), &data.train, &cfg).unwrap();
        let ranks = scaled_ranks(&base, 0.25);
        let (_, it_log) = iterative_compress(&base, &data, &ranks, &cfg).unwrap();
        let (_, os_log) = oneshot_compress(&base, &data, &ranks, &cfg).unwrap();
        baseline.push(evaluate(&base, &data.test).unwrap().accuracy);
        iterative.push(it_log.last().unwrap().post.accuracy);
        oneshot.push(os_log.last().unwrap().post.accuracy);
        eprintln!(
            "  criterion 8 seed {seed}: baseline {:.3}, iterative {:.3}, one-shot {:.3}",
            baseline[seed as usize], iterative[seed as usize], oneshot[seed as usize]
        );
    }
    let (b, i, o) = (median(baseline), median(iterative), median(oneshot));
    let elapsed = start.elapsed();
    let beats = i >= o;
    let close = b - i <= 0.05;
    outcome(
        beats && close && elapsed < Duration::from_secs(600),
        format!(
            "medians over 5 seeds: baseline {b:.3}, iterative {i:.3}, one-shot {o:.3}; iterative >= one-shot: {beats}; iterative within 5pp of baseline: {close}; {elapsed:.0?} < 10min"
        ),
    )
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut round_trip_failures = 0;
    let mut models = Vec::new();
    for case in 0..100u64 {
        let net = cpcomp::verify::random_model(1000 + case).unwrap();
        let path = dir.path().join(format!("m{case}.cpnet"));
        format::save(&net, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let ok = match format::load(&path) {
            Ok(back) => back == net && format::to_bytes(&back) == bytes,
            Err(_) => false,
        };
        if !ok {
            round_trip_failures += 1;
        }
        models.push(bytes);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let (mut corruptions, mut accepted, mut panics) = (0, 0, 0);
    let mut probe = |bytes: Vec<u8>| {
        corruptions += 1;
        match catch_unwind(AssertUnwindSafe(|| format::from_bytes(&bytes))) {
            Ok(Ok(_)) => accepted += 1,
            Ok(Err(_)) => {}
            Err(_) => panics += 1,
        }
    };
    for bytes in &models {
        for _ in 0..20 {
            let mut flipped = bytes.clone();
            let at = rng.random_range(0..flipped.len());
            flipped[at] ^= rng.random_range(1..=255u8);
            probe(flipped);
        }
        for _ in 0..5 {
            probe(bytes[..rng.random_range(0..bytes.len())].to_vec());
        }
        let mut extended = bytes.clone();
        extended.push(rng.random());
        probe(extended);
    }
    for _ in 0..50 {
        let len = rng.random_range(0..256);
        probe((0..len).map(|_| rng.random()).collect());
    }
    outcome(
        round_trip_failures == 0 && accepted == 0 && panics == 0,
        format!("100 save/load round trips, {round_trip_failures} not bit-identical; {corruptions} corrupted inputs: {accepted} accepted, {panics} panics"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("pipeline equivalence", criterion_1),
        ("TPM correctness", criterion_2),
        ("SVD correctness", criterion_3),
        ("analytic/physical parameter agreement", criterion_4),
        ("AlexNet compression accounting", criterion_5),
        ("FC rank allocation", criterion_6),
        ("gradient checks", criterion_7),
        ("iterative vs one-shot fine-tuning", criterion_8),
        ("serialization", criterion_9),
    ];
    // Numeric arguments select criteria; everything else (test-harness flags) is ignored.
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        if !selected.is_empty() && !selected.contains(&(n + 1)) {
            continue;
        }
        let result = catch_unwind(run).unwrap_or_else(|_| outcome(false, "panicked"));
        if !result.passed {
            failed += 1;
        }
        println!("{} criterion {}: {name}: {}", if result.passed { "PASS" } else { "FAIL" }, n + 1, result.detail);
    }
    println!("acceptance: {failed} failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
