//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so every criterion reports even when an earlier
//! one fails. The process exits 0 unless `IAE_ACCEPTANCE_STRICT=1`, in
//! which case any FAIL exits 1.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use iae_core::bidding::{
    baseline_bids, calibrate_kappa, lvr_bids, nominal_leverage, replay_auctions, run_experiment, total_cost, AdProfile,
    ExperimentConfig, KappaConfig, Market, MarketConfig,
};
use iae_core::dataset::{Dataset, FeatureSchema, Sample, Sidecar};
use iae_core::evaluation::{bound_check, pehe, tau, EvalConfig};
use iae_core::ipm::{exact_wasserstein_1d, ipm_distance, IpmConfig, SampleCloud};
use iae_core::model::{Model, ModelConfig, Oracle, OutcomeModel};
use iae_core::synthetic::{generate, ground_truth, sample_context, sample_dataset, GenConfig, GroundTruth};
use iae_core::trainer::{build_objective, objective, train, TrainConfig};
use iae_core::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ABS_TOL: f64 = 1e-9;
const SEEDS: u64 = 10;
/// Epoch budget of each selection-bias run; 40 runs must fit in 30 minutes.
const BIAS_EPOCHS: usize = 20;
const BIAS_TEST_CONTEXTS: usize = 5000;

struct Verdict {
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn timed(f: impl FnOnce() -> (bool, String)) -> Verdict {
    let start = Instant::now();
    let (pass, detail) = f();
    Verdict {
        pass,
        detail,
        elapsed: start.elapsed(),
    }
}

fn contexts(world: &GenConfig, rows: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows).flat_map(|_| sample_context(world, &mut rng)).collect()
}

fn random_model(world: &GenConfig, seed: u64) -> Model {
    let mut model = Model::new(ModelConfig {
        input_dim: world.dim(),
        n_treatments: world.n_treatments,
        seed,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for p in model.params_mut() {
        if !p.is_weight {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
    }
    model
}

fn matrix_properties() -> (bool, String) {
    let world = GenConfig::default();
    let xs = contexts(&world, 1000, 11);
    let models: Vec<Model> = (0..10).map(|s| random_model(&world, 100 + s)).collect();
    let n = world.n_treatments;
    let (mut anti, mut diag, mut trans) = (0.0f64, 0.0f64, 0.0f64);
    for (row, x) in xs.chunks(world.dim()).enumerate() {
        let a = models[row % models.len()].iae_matrix(x).unwrap();
        for i in 0..n {
            diag = diag.max(a[i][i].abs());
            for j in 0..n {
                anti = anti.max((a[i][j] + a[j][i]).abs());
                for k in 0..n {
                    trans = trans.max((a[i][j] + a[j][k] - a[i][k]).abs());
                }
            }
        }
    }
    (
        anti <= ABS_TOL && diag <= ABS_TOL && trans <= ABS_TOL,
        format!("max |a_ij + a_ji| {anti:.1e}, max |a_ii| {diag:.1e}, max transitivity gap {trans:.1e}"),
    )
}

fn telescoping() -> (bool, String) {
    let world = GenConfig::default();
    let gt = ground_truth(&world).unwrap();
    let xs = contexts(&world, 1000, 12);
    let model = random_model(&world, 7);
    let n = world.n_treatments;
    let mut worst = 0.0f64;
    for x in xs.chunks(world.dim()) {
        let adjacent: Vec<f64> = (1..n).map(|k| tau(&model, &gt, x, k, k + 1).unwrap()).collect();
        for i in 1..n {
            for j in i + 1..=n {
                let direct = tau(&model, &gt, x, i, j).unwrap();
                let sum: f64 = adjacent[i - 1..j - 1].iter().sum();
                worst = worst.max((direct - sum).abs());
            }
        }
    }
    (worst <= ABS_TOL, format!("max |tau_ij - sum adjacent| {worst:.1e}"))
}

/// Unit-weight adjacent bound on random and trained models, and equality
/// at two treatments.
fn adjacent_bound(trained: &[(GenConfig, Model)]) -> (bool, String) {
    let eval = EvalConfig {
        ipm: None,
        ..EvalConfig::default()
    };
    let world = GenConfig {
        n_samples: 2000,
        ..GenConfig::default()
    };
    let (data, _) = generate(&world).unwrap();
    let mut checked = 0;
    let mut failures = Vec::new();
    let mut weighted_failures = 0;
    let mut record = |label: String, model: &dyn OutcomeModel, data: &Dataset| {
        let r = bound_check(model, data, 1.0, &eval).unwrap();
        checked += 1;
        if !r.adjacent_bound_holds {
            failures.push(format!("{label}: {:.4} > {:.4}", r.pehe, r.adjacent_bound));
        }
        if !r.weighted_adjacent_bound_holds {
            weighted_failures += 1;
        }
    };
    for s in 0..20 {
        record(format!("random {s}"), &random_model(&world, 200 + s), &data);
    }
    for (i, (w, model)) in trained.iter().enumerate() {
        let data = sample_dataset(w, &ground_truth(w).unwrap(), 2000, 0x3b).unwrap();
        record(format!("trained {i}"), model, &data);
    }

    let two = GenConfig {
        n_samples: 500,
        n_treatments: 2,
        ..GenConfig::default()
    };
    let (data2, _) = generate(&two).unwrap();
    let mut eq_gap = 0.0f64;
    for s in 0..5 {
        let r = bound_check(&random_model(&two, 300 + s), &data2, 1.0, &eval).unwrap();
        eq_gap = eq_gap.max((r.pehe - r.adjacent_bound).abs());
    }
    let pass = failures.is_empty() && eq_gap <= ABS_TOL;
    let mut detail = format!(
        "{} of {checked} pairs violate; weighted bound violated {weighted_failures} times; n=2 gap {eq_gap:.1e}",
        failures.len()
    );
    if let Some(first) = failures.first() {
        detail.push_str(&format!("; first: {first}"));
    }
    (pass, detail)
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize, rows: usize) -> Dataset {
    let mut samples: Vec<Sample> = (0..rows)
        .map(|i| Sample {
            x: (0..d).map(|_| rng.random_range(-1.5..1.5)).collect(),
            t: 1 + i % n,
            y: rng.random_range(-2.0..4.0),
        })
        .collect();
    samples.shuffle(rng);
    Dataset::new(Sidecar::new(n, FeatureSchema::numeric(d)), samples).unwrap()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Copy)]
enum Term {
    Factual,
    Regularization,
    Ipm,
}

/// Worst relative error between the tape gradient of `term` and central
/// differences, over every parameter entry.
/// Worst relative error against central differences, and the number of
/// entries whose stencil straddles a kink. Epsilon follows the median and
/// largest cost, which switch elements at ties, so the IPM is only piecewise
/// smooth. Where the forward and backward differences disagree, the analytic
/// gradient is compared with the one-sided difference of its own piece.
fn gradient_error(model: &Model, data: &Dataset, cfg: &TrainConfig, term: Term, tol: f64) -> (f64, usize) {
    let batch: Vec<usize> = (0..data.len()).collect();
    let stats = data.stats();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.leaf(model.standardize(data.contexts()).unwrap());
    let g = build_objective(&mut tape, &bound, x, data.treatments(), data.outcomes(), stats, cfg).unwrap();
    let target = match term {
        Term::Factual => tape.sub(g.weighted_factual, g.endpoint_correction).unwrap(),
        Term::Regularization => g.regularization,
        Term::Ipm => g.ipm_sum.expect("ipm term requested with beta > 0"),
    };
    tape.backward(target).unwrap();
    let grads: Vec<Tensor> = bound.vars().iter().map(|&v| tape.grad_or_zeros(v).unwrap()).collect();

    let value = |m: &Model| {
        let t = objective(m, data, &batch, stats, cfg).unwrap();
        match term {
            Term::Factual => t.weighted_factual - t.endpoint_correction,
            Term::Regularization => t.regularization,
            Term::Ipm => t.ipm_sum.unwrap(),
        }
    };
    let h = 1e-5;
    let centre = value(model);
    let mut probe = model.clone();
    let (mut worst, mut kinks) = (0.0f64, 0);
    for (k, grad) in grads.iter().enumerate() {
        for e in 0..grad.len() {
            let orig = probe.params()[k].value.data()[e];
            probe.params_mut()[k].value.data_mut()[e] = orig + h;
            let up = value(&probe);
            probe.params_mut()[k].value.data_mut()[e] = orig - h;
            let down = value(&probe);
            probe.params_mut()[k].value.data_mut()[e] = orig;
            let g = grad.data()[e];
            let mut err = rel_err(g, (up - down) / (2.0 * h));
            let (fwd, bwd) = ((up - centre) / h, (centre - down) / h);
            if err > tol && rel_err(fwd, bwd) > tol {
                kinks += 1;
                err = rel_err(g, fwd).min(rel_err(g, bwd));
            }
            worst = worst.max(err);
        }
    }
    (worst, kinks)
}

fn gradients() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let configs = 50;
    let (mut fact, mut reg, mut ipm, mut kinks) = (0.0f64, 0.0f64, 0.0f64, 0);
    for c in 0..configs {
        let n = rng.random_range(2..=5);
        let d = rng.random_range(2..=5);
        let model = random_model_with(
            ModelConfig {
                input_dim: d,
                n_treatments: n,
                rep_width: rng.random_range(3..=6),
                rep_depth: rng.random_range(1..=2),
                hyp_width: rng.random_range(3..=6),
                hyp_depth: rng.random_range(1..=2),
                seed: c,
                ..ModelConfig::default()
            },
            &mut rng,
        );
        let rows = rng.random_range(4 * n..=8 * n);
        let data = random_dataset(&mut rng, n, d, rows);
        let cfg = TrainConfig {
            beta: 1.0,
            lambda: rng.random_range(0.01..0.5),
            ..TrainConfig::default()
        };
        for (term, tol, worst) in [
            (Term::Factual, 1e-4, &mut fact),
            (Term::Regularization, 1e-4, &mut reg),
            (Term::Ipm, 1e-3, &mut ipm),
        ] {
            let (err, k) = gradient_error(&model, &data, &cfg, term, tol);
            *worst = worst.max(err);
            kinks += k;
        }
    }
    (
        fact <= 1e-4 && reg <= 1e-4 && ipm <= 1e-3,
        format!(
            "{configs} configurations; worst relative error factual {fact:.1e}, l2 {reg:.1e}, ipm {ipm:.1e}; \
             {kinks} entries straddle an epsilon kink and use the one-sided difference"
        ),
    )
}

fn random_model_with(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Model {
    let mut model = Model::new(cfg).unwrap();
    for p in model.params_mut() {
        if !p.is_weight {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
    }
    model
}

/// Minimum over all assignments of the mean matched distance.
fn brute_force_w1(p: &[f64], q: &[f64]) -> f64 {
    fn go(p: &[f64], q: &[f64], used: &mut Vec<bool>, i: usize, acc: f64, best: &mut f64) {
        if i == p.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..q.len() {
            if !used[j] {
                used[j] = true;
                go(p, q, used, i + 1, acc + (p[i] - q[j]).abs(), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(p, q, &mut vec![false; q.len()], 0, 0.0, &mut best);
    best / p.len() as f64
}

fn ipm_oracles() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = IpmConfig::evaluation();
    let mut worst_rel = 0.0f64;
    for _ in 0..100 {
        let (a, b) = (rng.random_range(2..60), rng.random_range(2..60));
        let shift = rng.random_range(0.1..3.0);
        let p: Vec<f64> = (0..a).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..b).map(|_| rng.random_range(-1.0..1.0) * 1.5 + shift).collect();
        let exact = exact_wasserstein_1d(&p, &q).unwrap();
        let sk = ipm_distance(
            &SampleCloud::from_values(p).unwrap(),
            &SampleCloud::from_values(q).unwrap(),
            &cfg,
        )
        .unwrap()
        .distance;
        worst_rel = worst_rel.max((sk - exact).abs() / exact);
    }
    let mut worst_abs = 0.0f64;
    for _ in 0..200 {
        let k = rng.random_range(1..=7);
        let p: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let q: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        worst_abs = worst_abs.max((exact_wasserstein_1d(&p, &q).unwrap() - brute_force_w1(&p, &q)).abs());
    }
    (
        worst_rel <= 0.02 && worst_abs <= 1e-12,
        format!(
            "Sinkhorn vs exact worst relative error {worst_rel:.2e}; exact vs brute force worst gap {worst_abs:.1e}"
        ),
    )
}

fn effective_weights() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for n in [2, 3, 5] {
        let d = 3;
        let model = random_model_with(
            ModelConfig {
                input_dim: d,
                n_treatments: n,
                rep_width: 6,
                rep_depth: 2,
                hyp_width: 6,
                hyp_depth: 2,
                seed: n as u64,
                ..ModelConfig::default()
            },
            &mut rng,
        );
        let mut samples: Vec<Sample> = (0..13 * n + 2)
            .map(|_| Sample {
                x: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                t: rng.random_range(1..=n),
                y: rng.random_range(0.0..5.0),
            })
            .collect();
        samples[0].t = 1;
        samples[1].t = n;
        let data = Dataset::new(Sidecar::new(n, FeatureSchema::numeric(d)), samples).unwrap();
        let m = data.len() as f64;
        let mut counts = vec![0usize; n + 1];
        data.treatments().iter().for_each(|&t| counts[t] += 1);

        let cfg = TrainConfig {
            beta: 1.0,
            lambda: 0.2,
            ..TrainConfig::default()
        };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.leaf(model.standardize(data.contexts()).unwrap());
        let g = build_objective(
            &mut tape,
            &bound,
            x,
            data.treatments(),
            data.outcomes(),
            data.stats(),
            &cfg,
        )
        .unwrap();
        tape.backward(g.total).unwrap();
        let observed = tape.grad(g.per_sample_loss).unwrap();
        for (&t, o) in data.treatments().iter().zip(observed.data()) {
            let mu = counts[t] as f64 / m;
            let endpoint = if t == 1 || t == n { 1.0 } else { 0.0 };
            worst = worst.max((o - mu * (2.0 - endpoint) / m).abs());
        }
    }
    (
        worst <= 1e-12,
        format!("n in {{2,3,5}}: worst coefficient gap {worst:.1e}"),
    )
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

struct BiasRun {
    world: GenConfig,
    beta: f64,
    model: Model,
    pehe: f64,
}

fn bias_runs() -> Vec<BiasRun> {
    let mut runs = Vec::new();
    for b in [5.0, 0.0] {
        for seed in 0..SEEDS {
            let world = GenConfig {
                selection_bias: b,
                seed,
                ..GenConfig::default()
            };
            let (data, gt) = generate(&world).unwrap();
            let test = sample_dataset(&world, &gt, BIAS_TEST_CONTEXTS, seed ^ 0x7e57).unwrap();
            for beta in [0.0, 1.0] {
                let (model, _) = train(
                    &data,
                    &ModelConfig {
                        seed,
                        ..ModelConfig::default()
                    },
                    &TrainConfig {
                        beta,
                        max_epochs: BIAS_EPOCHS,
                        seed,
                        ..TrainConfig::default()
                    },
                )
                .unwrap();
                let p = pehe(&model, &gt, test.contexts()).unwrap();
                eprintln!("  b={b} seed={seed} beta={beta}: PEHE {p:.4}");
                runs.push(BiasRun {
                    world: world.clone(),
                    beta,
                    model,
                    pehe: p,
                });
            }
        }
    }
    runs
}

fn selection_bias(runs: &[BiasRun], elapsed: Duration) -> (bool, String) {
    let med = |b: f64, beta: f64| {
        let v: Vec<f64> = runs
            .iter()
            .filter(|r| r.world.selection_bias == b && r.beta == beta)
            .map(|r| r.pehe)
            .collect();
        median(&v)
    };
    let (b5_0, b5_1, b0_0, b0_1) = (med(5.0, 0.0), med(5.0, 1.0), med(0.0, 0.0), med(0.0, 1.0));
    let rel = (b0_1 - b0_0).abs() / b0_0.min(b0_1);
    let pass = b5_1 <= b5_0 && rel < 0.2 && elapsed < Duration::from_secs(30 * 60);
    (
        pass,
        format!(
            "median PEHE b=5: beta=1 {b5_1:.4} vs beta=0 {b5_0:.4}; b=0: beta=1 {b0_1:.4} vs beta=0 {b0_0:.4} \
             ({:.1}% apart); {SEEDS} seeds, {BIAS_EPOCHS} epochs, {:.0} s",
            100.0 * rel,
            elapsed.as_secs_f64()
        ),
    )
}

fn kappa_calibration() -> (bool, String) {
    let mut worst_gap = 0.0f64;
    let mut max_steps = 0;
    let mut failures = Vec::new();
    for seed in 0..5u64 {
        let world = GenConfig {
            seed,
            ..GenConfig::default()
        };
        let truth = ground_truth(&world).unwrap();
        let market = Market::new(
            &world,
            truth.clone(),
            MarketConfig {
                seed,
                ..MarketConfig::default()
            },
        )
        .unwrap();
        let log = market.auction_log(0);
        assert_eq!(log.len(), 1000);
        let ads: Vec<&AdProfile> = market.ads.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let histories: BTreeMap<u32, Vec<u32>> = market
            .ads
            .iter()
            .map(|a| (a.id, (0..3).map(|_| rng.random_range(0..5)).collect()))
            .collect();
        let sigma: BTreeMap<u32, f64> = nominal_leverage(&Oracle { truth }, &ads, &histories)
            .unwrap()
            .into_iter()
            .filter_map(Result::ok)
            .map(|r| (r.ad_id, r.sigma))
            .collect();
        let sigma_bar = sigma.values().sum::<f64>() / sigma.len() as f64;
        let target = total_cost(&replay_auctions(&log, &baseline_bids(&market.ads), seed));
        let cfg = KappaConfig::default();
        let cal = calibrate_kappa(&log, &ads, &sigma, sigma_bar, target, &cfg, seed).unwrap();

        let cost = |kappa: f64| {
            total_cost(&replay_auctions(
                &log,
                &lvr_bids(ads.iter().copied(), &sigma, sigma_bar, kappa),
                seed,
            ))
        };
        let (lo, hi) = (cfg.kappa_min.ln(), cfg.kappa_max.ln());
        let grid: Vec<(f64, f64)> = (0..100)
            .map(|k| {
                let kappa = (lo + (hi - lo) * k as f64 / 99.0).exp();
                (kappa, cost(kappa))
            })
            .collect();
        let monotone = grid.windows(2).all(|w| w[1].1 >= w[0].1);
        let below = grid
            .iter()
            .filter(|g| g.1 < target * 0.99)
            .map(|g| g.0)
            .fold(0.0, f64::max);
        let above = grid
            .iter()
            .filter(|g| g.1 > target * 1.01)
            .map(|g| g.0)
            .fold(f64::INFINITY, f64::min);
        let gap = (cal.cost - target).abs() / target;
        worst_gap = worst_gap.max(gap);
        max_steps = max_steps.max(cal.steps);
        if !(gap <= 0.01 && cal.steps <= 40 && monotone && below < cal.kappa && cal.kappa < above) {
            failures.push(format!(
                "seed {seed}: kappa {:.4} gap {gap:.4} steps {}",
                cal.kappa, cal.steps
            ));
        }
    }
    (
        failures.is_empty(),
        format!(
            "5 logs of 1000 auctions: worst cost gap {:.3}%, at most {max_steps} steps, grid-consistent{}",
            100.0 * worst_gap,
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failures: {}", failures.join(", "))
            }
        ),
    )
}

fn paired_all_clicks(world: &GenConfig, truth: GroundTruth, model: &dyn OutcomeModel) -> f64 {
    let seed = world.seed;
    let market = Market::new(
        world,
        truth,
        MarketConfig {
            seed,
            ..MarketConfig::default()
        },
    )
    .unwrap();
    let cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    let report = run_experiment(&market, model, None, &cfg).unwrap();
    report.summary.paired_all_clicks.unwrap()
}

/// `P(X >= k)` for `X ~ Bin(n, 1/2)` by direct enumeration of outcomes.
fn sign_test(k: usize, n: usize) -> f64 {
    let hits = (0u32..1 << n).filter(|m| m.count_ones() as usize >= k).count();
    hits as f64 / (1u64 << n) as f64
}

fn directional(runs: &[BiasRun]) -> (bool, String) {
    let mut oracle = Vec::new();
    for seed in 0..SEEDS {
        let world = GenConfig {
            seed,
            ..GenConfig::default()
        };
        let truth = ground_truth(&world).unwrap();
        oracle.push(paired_all_clicks(&world, truth.clone(), &Oracle { truth }));
    }
    let trained: Vec<f64> = runs
        .iter()
        .filter(|r| r.beta == 1.0 && r.world.selection_bias == GenConfig::default().selection_bias)
        .map(|r| paired_all_clicks(&r.world, ground_truth(&r.world).unwrap(), &r.model))
        .collect();
    let oracle_pos = oracle.iter().filter(|&&r| r >= 1.0).count();
    let trained_pos = trained.iter().filter(|&&r| r >= 1.0).count();
    let p = sign_test(oracle_pos, oracle.len());
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|r| format!("{:+.2}%", 100.0 * (r - 1.0)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    (
        p < 0.05 && trained_pos >= 7 && trained.len() == SEEDS as usize,
        format!(
            "oracle {oracle_pos}/{} seeds with lvr all-channel clicks >= baseline (sign test p {p:.4}) [{}]; \
             trained beta=1 {trained_pos}/{} [{}]",
            oracle.len(),
            fmt(&oracle),
            trained.len(),
            fmt(&trained)
        ),
    )
}

fn iae(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_iae")).args(args).output().unwrap()
}

fn rerun_identical(dir: &Path, report: &str) -> Result<(), String> {
    let out = iae(&["rerun", "--manifest", dir.to_str().unwrap()]);
    if !out.status.success() {
        return Err(format!(
            "{}: {}",
            dir.display(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    let a = fs::read(dir.join(report)).map_err(|e| e.to_string())?;
    let b = fs::read(dir.join("rerun").join(report)).map_err(|e| e.to_string())?;
    if a != b {
        return Err(format!("{report} differs after rerun"));
    }
    Ok(())
}

fn reproducibility() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    let (gen, tr, ev, sim) = (dir("gen"), dir("train"), dir("eval"), dir("sim"));
    let data = format!("{gen}/data.csv");
    let ckpt = format!("{tr}/model.json");
    let steps: [(&[&str], &str, &str); 4] = [
        (
            &["generate", "--seed", "3", "--n-samples", "3000", "--out", &gen],
            &gen,
            "data.csv",
        ),
        (
            &["train", "--seed", "3", "--data", &data, "--epochs", "2", "--out", &tr],
            &tr,
            "train_report.json",
        ),
        (
            &[
                "evaluate",
                "--seed",
                "3",
                "--checkpoint",
                &ckpt,
                "--data",
                &data,
                "--out",
                &ev,
            ],
            &ev,
            "pehe_report.json",
        ),
        (
            &[
                "simulate",
                "--seed",
                "3",
                "--checkpoint",
                &ckpt,
                "--data",
                &data,
                "--ads",
                "60",
                "--out",
                &sim,
            ],
            &sim,
            "experiment_report.json",
        ),
    ];
    let mut errors = Vec::new();
    for (args, out, report) in steps {
        let run = iae(args);
        if !run.status.success() {
            errors.push(format!("{}: {}", args[0], String::from_utf8_lossy(&run.stderr).trim()));
            break;
        }
        if let Err(e) = rerun_identical(Path::new(out), report) {
            errors.push(e);
        }
    }
    (
        errors.is_empty(),
        if errors.is_empty() {
            "generate, train, evaluate and simulate reruns reproduce every artifact bit-identically".into()
        } else {
            errors.join("; ")
        },
    )
}

fn main() {
    let strict = std::env::var("IAE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut verdicts: BTreeMap<u8, (&str, Verdict)> = BTreeMap::new();
    let mut run = |id: u8, name: &'static str, f: &mut dyn FnMut() -> (bool, String)| {
        eprintln!("criterion {id}: {name}...");
        verdicts.insert(id, (name, timed(f)));
    };
    run(1, "matrix properties", &mut matrix_properties);
    run(2, "telescoping identity", &mut telescoping);
    run(4, "gradient correctness", &mut gradients);
    run(5, "IPM oracle equivalence", &mut ipm_oracles);
    run(6, "effective sample weights", &mut effective_weights);
    run(8, "kappa calibration", &mut kappa_calibration);
    run(10, "reproducibility", &mut reproducibility);

    eprintln!("criterion 7: training {} models...", 4 * SEEDS);
    let start = Instant::now();
    let runs = bias_runs();
    let train_time = start.elapsed();
    run(7, "selection-bias benefit", &mut || selection_bias(&runs, train_time));
    let trained: Vec<(GenConfig, Model)> = runs.iter().map(|r| (r.world.clone(), r.model.clone())).collect();
    run(3, "adjacent-pair PEHE bound", &mut || adjacent_bound(&trained));
    run(9, "directional experiment", &mut || directional(&runs));

    let mut failed = 0;
    for (id, (name, v)) in &verdicts {
        let status = if v.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!v.pass);
        println!(
            "{status} criterion {id} ({name}): {} [{:.1} s]",
            v.detail,
            v.elapsed.as_secs_f64()
        );
    }
    println!("{} of {} criteria pass", verdicts.len() - failed, verdicts.len());
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
