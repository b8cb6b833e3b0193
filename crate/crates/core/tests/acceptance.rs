//! Acceptance suite. Each test checks one criterion at its stated tolerance
//! and prints a single PASS/FAIL line; run with `--nocapture` to see them.
//! Tests take a shared lock so the wall-clock budgets are measured one at a
//! time.

#[path = "common/oracles.rs"]
mod oracles;

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use bevdg::colorspace::{compute_stats, lab_to_rgb, rgb_to_lab, rgb_to_xyz, translate, WhitePoint};
use bevdg::consistency::{median_bandwidth, mmd2, mmd2_grad, FeatureBatch, KernelParams};
use bevdg::domains::{build_domain_suite, generate_dataset, style_bank, DatasetSpec, JitterParams};
use bevdg::harness::{evaluate_suite, iou, run_experiment, ExperimentConfig, Toggles};
use bevdg::meta_train::{smooth, train_from, MetaConfig, Objective};
use bevdg::model::{
    backward, backward_with_consistency, cross_entropy, forward, init_params, latent_batch,
    ArchConfig, ModelParams,
};
use bevdg::spectral::{ampaug, fft2d, ifft2d};
use bevdg::{Image, SegMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

const SEEDS: [u64; 3] = [0, 1, 2];

// Desk-scale training schedule shared by the directional criteria.
const ERM_EPOCHS: usize = 30;
const ERM_LR: f64 = 0.3;
const META_EPOCHS: usize = 20;
const META_LR: f64 = 0.15;
const BETA: f64 = 0.1;

// Meta-loop trend criterion.
const TREND_WARM_EPOCHS: usize = 10;
const TREND_EPOCHS: usize = 8;
const TREND_WINDOW: usize = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn criterion(id: u32, name: &str, budget_s: u64, body: impl FnOnce() -> Outcome) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let out = body();
    let elapsed = started.elapsed();
    let in_time = elapsed <= Duration::from_secs(budget_s);
    let pass = out.pass && in_time;
    // Written to the raw handle so the line shows even when output is captured.
    let line = format!(
        "criterion {id} {} {name}: {} [{:.1}s of {budget_s}s]\n",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64()
    );
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(line.as_bytes());
    let _ = stdout.flush();
    drop(stdout);
    assert!(out.pass, "criterion {id} failed: {}", out.detail);
    assert!(in_time, "criterion {id} over budget: {elapsed:?}");
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, 3, |_, _, _| rng.gen::<f64>())
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> SegMask {
    SegMask::new(h, w, (0..3 * h * w).map(|_| rng.gen_bool(density) as u8).collect()).unwrap()
}

#[test]
fn c1_spectral_correctness() {
    criterion(1, "spectral correctness", 5, || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut round, mut parseval, mut oracle) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..10 {
            let img = random_image(&mut rng, 16, 16);
            let spec = fft2d(&img);
            round = round.max(ifft2d(&spec).max_abs_diff(&img));
            let energy: f64 = img.data().iter().map(|v| v * v).sum();
            let spectral: f64 = spec.data().iter().map(|z| z.norm_sqr()).sum::<f64>() / 256.0;
            parseval = parseval.max((energy - spectral).abs() / energy);
        }
        for ratio in [0.0, 0.01, 0.1, 0.2] {
            let src = random_image(&mut rng, 16, 16);
            let tgt = random_image(&mut rng, 16, 16);
            oracle = oracle.max(ampaug(&src, &tgt, ratio).unwrap().max_abs_diff(&oracles::ampaug(&src, &tgt, ratio)));
        }
        Outcome {
            pass: round < 1e-9 && parseval < 1e-6 && oracle < 1e-9,
            detail: format!("round trip {round:.1e}, Parseval {parseval:.1e}, oracle {oracle:.1e}"),
        }
    });
}

#[test]
fn c2_ampaug_identity() {
    criterion(2, "AmpAug identity", 1, || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst = 0.0f64;
        for ratio in [0.0, 0.01, 0.1] {
            for (h, w) in [(16, 16), (32, 32), (12, 20)] {
                let img = random_image(&mut rng, h, w);
                worst = worst.max(ampaug(&img, &img, ratio).unwrap().max_abs_diff(&img));
            }
        }
        Outcome {
            pass: worst < 1e-6,
            detail: format!("max deviation {worst:.1e}"),
        }
    });
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0) + shift).collect()).collect()
}

#[test]
fn c3_mmd_correctness() {
    criterion(3, "MMD correctness", 10, || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut oracle_err, mut min_value, mut self_value, mut grad_err) = (0.0f64, f64::MAX, 0.0f64, 0.0f64);
        for case in 0..100 {
            let (ns, nt, d) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..6));
            let rs = random_batch(&mut rng, ns, d, 0.0);
            let shift = rng.gen_range(0.0..1.0);
            let rt = random_batch(&mut rng, nt, d, shift);
            let (zs, zt) = (FeatureBatch::from_rows(&rs).unwrap(), FeatureBatch::from_rows(&rt).unwrap());
            let kp = KernelParams::new(rng.gen_range(0.3..2.0)).unwrap();
            let value = mmd2(&zs, &zt, &kp).unwrap();
            oracle_err = oracle_err.max((value - oracles::mmd2(&rs, &rt, kp.sigma())).abs());
            min_value = min_value.min(value);
            self_value = self_value.max(mmd2(&zs, &zs, &kp).unwrap().abs());

            if case % 5 == 0 {
                let g = mmd2_grad(&zs, &zt, &kp).unwrap();
                for (i, &gi) in g.iter().enumerate() {
                    let at = |h: f64| {
                        let mut rows = rt.clone();
                        rows[i / d][i % d] += h;
                        oracles::mmd2(&rs, &rows, kp.sigma())
                    };
                    let numeric = (at(1e-6) - at(-1e-6)) / 2e-6;
                    let scale = gi.abs().max(numeric.abs());
                    if scale > 1e-8 {
                        grad_err = grad_err.max((gi - numeric).abs() / scale);
                    }
                }
            }
        }
        Outcome {
            pass: oracle_err < 1e-12 && min_value >= 0.0 && self_value == 0.0 && grad_err < 1e-4,
            detail: format!(
                "oracle {oracle_err:.1e}, min {min_value:.1e}, identical {self_value:.1e}, gradient {grad_err:.1e}"
            ),
        }
    });
}

fn perturbed(p: &ModelParams, i: usize, h: f64) -> ModelParams {
    let mut theta = p.theta().to_vec();
    theta[i] += h;
    p.with_theta(theta).unwrap()
}

/// Worst violation of `|a - n| <= max(1e-7, 1e-4 * max(|a|, |n|))`, as a
/// multiple of the allowed error, and the number of coordinates that needed
/// the smaller step. A `1e-5` stencil that straddles a ReLU kink is retried
/// once at `1e-6`.
fn fd_violation(analytic: &[f64], f: impl Fn(&ModelParams) -> f64, p: &ModelParams) -> (f64, usize) {
    let violation = |i: usize, h: f64| {
        let numeric = (f(&perturbed(p, i, h)) - f(&perturbed(p, i, -h))) / (2.0 * h);
        let allowed = (1e-4 * analytic[i].abs().max(numeric.abs())).max(1e-7);
        (analytic[i] - numeric).abs() / allowed
    };
    let mut worst = 0.0f64;
    let mut retried = 0;
    for i in 0..p.len() {
        let mut v = violation(i, 1e-5);
        if v > 1.0 {
            retried += 1;
            v = violation(i, 1e-6);
        }
        worst = worst.max(v);
    }
    (worst, retried)
}

#[test]
fn c4_model_gradient_check() {
    criterion(4, "model gradient check", 60, || {
        let (mut worst_ce, mut worst_cons, mut retried) = (0.0f64, 0.0f64, 0);
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
            let p = init_params(&ArchConfig::default(), seed).unwrap();
            let imgs: Vec<Image> = (0..2).map(|_| random_image(&mut rng, 16, 16)).collect();
            let label = random_mask(&mut rng, 16, 16, 0.3);
            let (_, trace) = forward(&p, &imgs).unwrap();
            let g = backward(&p, &trace, &label).unwrap();
            let ce = |q: &ModelParams| cross_entropy(&forward(q, &imgs).unwrap().0, &label).unwrap();
            let (v, r) = fd_violation(&g, ce, &p);
            worst_ce = worst_ce.max(v);
            retried += r;

            let other = init_params(&ArchConfig::default(), seed + 100).unwrap();
            let source: Vec<Vec<Image>> = (0..2).map(|_| vec![random_image(&mut rng, 16, 16)]).collect();
            let target: Vec<Vec<Image>> = (0..2).map(|_| vec![random_image(&mut rng, 16, 16)]).collect();
            let labels: Vec<SegMask> = (0..2).map(|_| random_mask(&mut rng, 16, 16, 0.3)).collect();
            let traces_s: Vec<_> = source.iter().map(|i| forward(&other, i).unwrap().1).collect();
            let zs = latent_batch(&traces_s).unwrap();
            let traces_t: Vec<_> = target.iter().map(|i| forward(&p, i).unwrap().1).collect();
            let kp = median_bandwidth(&zs, &latent_batch(&traces_t).unwrap()).unwrap();
            let beta = 0.5;
            let g = backward_with_consistency(&p, &traces_s, &traces_t, &labels, beta, &kp).unwrap();
            let objective = |q: &ModelParams| {
                let mut ce = 0.0;
                let mut rows = Vec::new();
                for (imgs, label) in target.iter().zip(&labels) {
                    let (pred, trace) = forward(q, imgs).unwrap();
                    ce += cross_entropy(&pred, label).unwrap();
                    rows.push(trace.z().to_vec());
                }
                let zt = FeatureBatch::from_rows(&rows).unwrap();
                ce / target.len() as f64 + beta * mmd2(&zs, &zt, &kp).unwrap()
            };
            let (v, r) = fd_violation(&g, objective, &p);
            worst_cons = worst_cons.max(v);
            retried += r;
        }
        Outcome {
            pass: worst_ce <= 1.0 && worst_cons <= 1.0,
            detail: format!(
                "worst error as a fraction of tolerance: CE {worst_ce:.2}, with consistency {worst_cons:.2}; \
                 {retried} kink-straddling coordinates rechecked at h=1e-6"
            ),
        }
    });
}

#[test]
fn c5_color_and_alignment() {
    criterion(5, "color/alignment", 5, || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wp = WhitePoint::default();
        let mut round = 0.0f64;
        let mut stats_err = 0.0f64;
        for _ in 0..20 {
            let img = random_image(&mut rng, 16, 16);
            round = round.max(lab_to_rgb(&rgb_to_lab(&img, &wp).unwrap(), &wp).max_abs_diff(&img));

            let src = rgb_to_lab(&img, &wp).unwrap();
            let tgt = rgb_to_lab(&random_image(&mut rng, 16, 16).map(|v| v * 0.5), &wp).unwrap();
            let (ss, ts) = (compute_stats(&src).unwrap(), compute_stats(&tgt).unwrap());
            let out = compute_stats(&translate(&src, &ss, &ts)).unwrap();
            for c in 0..3 {
                stats_err = stats_err.max((out.mu[c] - ts.mu[c]).abs()).max((out.sigma[c] - ts.sigma[c]).abs());
            }
        }
        let red = rgb_to_xyz(&Image::from_fn(1, 1, 3, |c, _, _| (c == 0) as u8 as f64)).unwrap();
        let xyz = red.pixel(0);
        let exact = xyz == [0.4124, 0.2126, 0.0193];
        Outcome {
            pass: round < 1e-6 && stats_err < 1e-9 && exact,
            detail: format!("LAB round trip {round:.1e}, stats {stats_err:.1e}, red -> {xyz:?}"),
        }
    });
}

fn trend_config(seed: u64, epochs: usize) -> MetaConfig {
    MetaConfig {
        outer_lr: META_LR,
        beta: BETA,
        epochs,
        seed,
        ..MetaConfig::default()
    }
}

#[test]
fn c6_meta_loop_behavior() {
    criterion(6, "meta-loop behavior", 300, || {
        let bank = style_bank(64, 32, 32, 7).unwrap();
        let mut cells = Vec::new();
        let mut pass = true;
        for seed in SEEDS {
            let spec = DatasetSpec {
                count: 200,
                seed,
                ..DatasetSpec::default()
            };
            let data = generate_dataset(&spec, &JitterParams::default()).unwrap();
            // Short source-only warm start, then the meta phase.
            let warm = MetaConfig {
                outer_lr: ERM_LR,
                epochs: TREND_WARM_EPOCHS,
                seed: seed + 100,
                ..MetaConfig::default()
            };
            let init = init_params(&ArchConfig::default(), seed).unwrap();
            let (start_params, _) = train_from(init, &data, None, &warm, Objective::Erm).unwrap();
            let cfg = trend_config(seed, TREND_EPOCHS);
            let (_, log) = train_from(start_params.clone(), &data, Some(&bank), &cfg, Objective::Meta).unwrap();
            let cons: Vec<f64> = log.iter().map(|r| r.l_cons).collect();
            let smoothed = smooth(&cons, TREND_WINDOW);
            let (start, end) = (smoothed[TREND_WINDOW - 1], smoothed[smoothed.len() - 1]);

            // Rerunning the first epoch must retrace the log bit for bit.
            let (_, again) =
                train_from(start_params, &data, Some(&bank), &trend_config(seed, 1), Objective::Meta).unwrap();
            let reproducible = again[..] == log[..again.len()];

            pass &= end <= start && reproducible;
            cells.push(format!(
                "seed {seed}: {start:.4} -> {end:.4}{}",
                if reproducible { "" } else { " (not reproducible)" }
            ));
        }
        Outcome {
            pass,
            detail: format!("smoothed consistency loss {}", cells.join(", ")),
        }
    });
}

fn experiment(seed: u64, toggles: Toggles) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: format!("acceptance-{seed}"),
        init_seed: seed,
        erm_epochs: ERM_EPOCHS,
        erm_lr: ERM_LR,
        meta: MetaConfig {
            outer_lr: META_LR,
            beta: BETA,
            epochs: META_EPOCHS,
            seed,
            ..MetaConfig::default()
        },
        toggles,
        ..ExperimentConfig::default()
    };
    cfg.train.seed = seed * 1000;
    cfg.test.seed = seed * 1000 + 77;
    cfg
}

#[test]
fn c7_full_method_beats_vanilla() {
    criterion(7, "full method vs vanilla", 900, || {
        let mut seed_wins = 0;
        let mut cells = Vec::new();
        for seed in SEEDS {
            let vanilla = run_experiment(&experiment(seed, Toggles::all(false))).unwrap().records;
            let full = run_experiment(&experiment(seed, Toggles::all(true))).unwrap().records;
            let mut wins = 0;
            let mut deltas = Vec::new();
            for (v, f) in vanilla.iter().zip(&full) {
                assert_eq!(v.domain_tag, f.domain_tag);
                wins += (f.iou.average >= v.iou.average) as usize;
                deltas.push(format!("{} {:+.3}", v.domain_tag, f.iou.average - v.iou.average));
            }
            seed_wins += (wins >= 3) as usize;
            cells.push(format!("seed {seed} {wins}/4 ({})", deltas.join(", ")));
        }
        Outcome {
            pass: seed_wins >= 2,
            detail: format!("{seed_wins}/3 seeds win on >= 3 domains; {}", cells.join("; ")),
        }
    });
}

#[test]
fn c8_alignment_helps_under_jitter() {
    criterion(8, "alignment under per-CAV jitter", 300, || {
        let mut seed_wins = 0;
        let mut cells = Vec::new();
        for seed in SEEDS {
            let mut cfg = experiment(seed, Toggles::all(false));
            cfg.meta.epochs = 0;
            let params = run_experiment(&cfg).unwrap().params;
            let test = generate_dataset(&cfg.test, &cfg.corruption.jitter).unwrap();
            let suite = build_domain_suite(&test, &cfg.corruption).unwrap();
            let mean = |aligned: bool| {
                let reports = evaluate_suite(&params, &suite, aligned).unwrap();
                reports.values().map(|r| r.aggregate.average).sum::<f64>() / reports.len() as f64
            };
            let (with, without) = (mean(true), mean(false));
            seed_wins += (with >= without) as usize;
            cells.push(format!("seed {seed} {with:.4} vs {without:.4}"));
        }
        Outcome {
            pass: seed_wins >= 2,
            detail: format!("{seed_wins}/3 seeds, aligned vs not: {}", cells.join(", ")),
        }
    });
}

#[test]
fn c9_iou_oracle_equivalence() {
    criterion(9, "IoU oracle equivalence", 1, || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mismatches = 0;
        for case in 0..100 {
            let (h, w) = (rng.gen_range(1..17), rng.gen_range(1..17));
            let (pred, label) = match case {
                // Both empty.
                0 => (Image::zeros(h, w, 3), SegMask::empty(h, w)),
                // Disjoint: prediction everywhere the label is not.
                1 => {
                    let label = random_mask(&mut rng, h, w, 0.5);
                    let pred = Image::from_fn(h, w, 3, |c, y, x| {
                        let class = bevdg::SegClass::ALL[c];
                        (!label.get(class, y, x)) as u8 as f64
                    });
                    (pred, label)
                }
                _ => {
                    let density = [0.0, 0.05, 0.5, 0.95][case % 4];
                    (random_image(&mut rng, h, w), random_mask(&mut rng, h, w, density))
                }
            };
            let report = iou(&pred, &label, 0.5).unwrap();
            let expected = oracles::iou(&pred, &label, 0.5);
            let classes_match = bevdg::SegClass::ALL
                .iter()
                .all(|&c| report.class(c) == expected[c.index()]);
            let mean_matches = report.average == expected.iter().sum::<f64>() / 3.0;
            mismatches += (!classes_match || !mean_matches) as usize;
        }
        Outcome {
            pass: mismatches == 0,
            detail: format!("{mismatches} mismatches over 100 pairs"),
        }
    });
}
