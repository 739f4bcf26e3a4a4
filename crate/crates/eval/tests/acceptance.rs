//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! with the measured values; the test fails if any criterion does.
//!
//! Run with `cargo test -p pnnh-eval --test acceptance -- --nocapture` to see
//! the lines as they are produced.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use pnnh_core::coder::{heldout_loss, prepare_coder, CoderSpec, CoderTraining, PretextTask};
use pnnh_core::config::DataConfig;
use pnnh_core::data::{Dataset, Split};
use pnnh_core::gradsuite::run_gradient_suite;
use pnnh_core::net::{build_network, train_pnnh, BnPolicy, CoderRegistry, NetKind, NetworkSpec, TrainConfig};
use pnnh_core::probe::{build_random_stack, probe_forward, probe_input, ProbeReport, StackKind, StackSpec};
use pnnh_core::stats::{
    evaluate, response_stats_mc, survival_lower_bound, BoundQuery, InputDistribution, InputStats, LayerKind,
    ResponseProbe,
};
use pnnh_core::{Error, Rng};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn mnist(train: usize, val: usize, seed: u64) -> (Dataset, Dataset) {
    let dc = DataConfig { source_split: Split::Test, train_size: train, val_size: val, ..Default::default() };
    dc.load(&mnist_dir(), seed).unwrap()
}

fn bound_formulas() -> Outcome {
    let start = Instant::now();
    let plain = BoundQuery::new(LayerKind::Plain, InputStats::new(1.0, 1.0).unwrap(), 1.0, 0.01).unwrap();
    let residual = BoundQuery::new(LayerKind::Residual, InputStats::new(1.0, 0.1).unwrap(), 0.1, 0.01).unwrap();
    let depths = [evaluate(&plain).unwrap().collapse_depth, evaluate(&residual).unwrap().collapse_depth];
    let elapsed = start.elapsed();
    outcome(
        depths == [3, 65] && elapsed < Duration::from_secs(1),
        format!("plain depth {} (want 3), residual depth {} (want 65), {:.2?}", depths[0], depths[1], elapsed),
    )
}

fn response_statistics() -> Outcome {
    let start = Instant::now();
    let stats = InputStats::new(1.0, 0.1).unwrap();
    let input = InputDistribution::matched(stats).unwrap();
    let [plain, residual] = ResponseProbe::new(LayerKind::Plain, 64, 3, 100_000).run_both(input, &Rng::new(7)).unwrap();
    let elapsed = start.elapsed();
    let passed = plain.mean.abs() <= 0.01
        && (plain.variance - 0.02).abs() <= 0.15 * 0.02
        && (residual.mean - 1.0).abs() <= 0.01
        && (residual.variance - 0.03).abs() <= 0.15 * 0.03
        && elapsed < Duration::from_secs(120);
    outcome(
        passed,
        format!(
            "plain mean {:.4} var {:.4} (want |m|<=0.01, 0.02+-15%); residual mean {:.4} var {:.4} \
             (want 1+-0.01, 0.03+-15%); {:.1?}",
            plain.mean, plain.variance, residual.mean, residual.variance, elapsed
        ),
    )
}

fn bound_validity() -> Outcome {
    let mut cells = 0;
    let mut failures = Vec::new();
    let mut seed = 0;
    for kind in [LayerKind::Plain, LayerKind::Residual] {
        for mu in [0.5, 1.0, 2.0] {
            for sigma_rel in [0.01, 0.1] {
                let sigma = sigma_rel * mu;
                let stats = InputStats::new(mu, sigma).unwrap();
                seed += 1;
                let mc = response_stats_mc(kind, stats, 64, 3, 10_000, &Rng::new(seed)).unwrap();
                for delta_rel in [0.1, 1.0] {
                    let q = BoundQuery::new(kind, stats, delta_rel * sigma, 0.5).unwrap();
                    let bound = survival_lower_bound(&q);
                    cells += 1;
                    if mc.surviving_fraction + 3.0 * mc.survival_std_error < bound {
                        failures.push(format!(
                            "{} mu {mu} sigma {sigma} delta {}: {:.3} < {:.3}",
                            kind.name(),
                            delta_rel * sigma,
                            mc.surviving_fraction,
                            bound
                        ));
                    }
                }
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("{cells}/{cells} cells hold")
    } else {
        format!("{}/{cells} cells violated: {}", failures.len(), failures.join("; "))
    };
    outcome(failures.is_empty(), detail)
}

fn probe(kind: StackKind) -> ProbeReport {
    let spec = StackSpec::new(kind, 20);
    let stack = build_random_stack::<f32>(spec).unwrap();
    let root = Rng::new(spec.seed);
    let input = probe_input(&spec, 256, &mut root.fork(1)).unwrap();
    probe_forward(&stack, &input, 16, &mut root.fork(2)).unwrap()
}

fn dissipating_inputs() -> Outcome {
    let plain = probe(StackKind::Plain);
    let residual = probe(StackKind::Residual);
    let pnnh = probe(StackKind::Pnnh);
    let plain_r2 = plain.final_record().r2;
    let residual_r2 = residual.final_record().r2;
    let worst_gap =
        residual.records.iter().zip(&pnnh.records).map(|(r, p)| (p.r2_retained - r.r2).abs()).fold(0.0, f64::max);
    let near_floor = (plain_r2 - plain.noise_floor).abs() <= 0.05;
    let residual_ahead = residual_r2 >= plain_r2 + 0.2;
    let pnnh_close = worst_gap <= 0.05;
    outcome(
        near_floor && residual_ahead && pnnh_close,
        format!(
            "plain r2 {plain_r2:.4} vs floor {:.4} [{}]; residual r2 {residual_r2:.4} vs plain+0.2 [{}]; \
             max |pnnh kept-channel r2 - residual r2| {worst_gap:.4} [{}]",
            plain.noise_floor,
            mark(near_floor),
            mark(residual_ahead),
            mark(pnnh_close)
        ),
    )
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "fails"
    }
}

fn coder_math() -> Outcome {
    let cfg = CoderTraining::default();
    let root = Rng::new(0);
    let (small, _) =
        prepare_coder::<f32>(CoderSpec::vanilla(4), PretextTask::IdentityInitOnly, &cfg, &mut root.fork(1)).unwrap();
    let identity_small = heldout_loss(&small, 10_000, cfg.patch, &mut root.fork(2)).unwrap();
    let analytic_ok = (identity_small - 64.0).abs() <= 0.05 * 64.0;

    let mut losses = Vec::new();
    for task in [PretextTask::RectifiedNormal, PretextTask::IdentityInitOnly, PretextTask::Uniform] {
        let (coder, _) = prepare_coder::<f32>(CoderSpec::vanilla(16), task, &cfg, &mut root.fork(3)).unwrap();
        losses.push(heldout_loss(&coder, 10_000, cfg.patch, &mut root.fork(4)).unwrap());
    }
    let ordered = losses[0] < losses[1] && losses[1] < losses[2];
    outcome(
        analytic_ok && ordered,
        format!(
            "identity loss {identity_small:.2} vs 64 [{}]; held-out rectified_normal {:.2} < identity {:.2} < \
             uniform {:.2} [{}]",
            mark(analytic_ok),
            losses[0],
            losses[1],
            losses[2],
            mark(ordered)
        ),
    )
}

/// Validation accuracy, or `None` when training diverged.
fn train_once(spec: &NetworkSpec, cfg: &TrainConfig, train: &Dataset, val: &Dataset) -> Option<f64> {
    match train_pnnh(spec, train, val, cfg, |_| {}) {
        Ok((_, report)) => Some(report.epochs.last().unwrap().val_acc),
        Err(Error::Diverged { .. }) => None,
        Err(e) => panic!("training failed: {e}"),
    }
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let mut accs: BTreeMap<&str, Vec<Option<f64>>> = BTreeMap::new();
    for seed in 0..3 {
        let (train, val) = mnist(8000, 2000, seed);
        for (kind, name) in [(NetKind::Plain, "plain"), (NetKind::Pnnh, "pnnh")] {
            let spec = NetworkSpec::mnist(kind, 4);
            assert_eq!(spec.depth(), 26);
            let cfg = TrainConfig { seed, ..Default::default() };
            accs.entry(name).or_default().push(train_once(&spec, &cfg, &train, &val));
        }
    }
    let elapsed = start.elapsed();
    let mean = |v: &[Option<f64>]| v.iter().map(|a| a.unwrap_or(0.0)).sum::<f64>() / v.len() as f64;
    let plain_diverged = accs["plain"].iter().any(Option::is_none);
    let (plain, pnnh) = (mean(&accs["plain"]), mean(&accs["pnnh"]));
    let margin = 100.0 * (pnnh - plain);
    outcome(
        (margin >= 2.0 || plain_diverged) && elapsed < Duration::from_secs(30 * 60),
        format!(
            "plain {:?} mean {:.2}%, pnnh {:?} mean {:.2}%, margin {margin:.2} points (want >= 2 or plain \
             diverging); {:.0?}",
            accs["plain"],
            100.0 * plain,
            accs["pnnh"],
            100.0 * pnnh,
            elapsed
        ),
    )
}

fn parameter_halving() -> Outcome {
    let start = Instant::now();
    let residual =
        build_network::<f32>(&NetworkSpec::cifar(NetKind::Residual, 18), CoderRegistry::new(), &mut Rng::new(0))
            .unwrap();
    let spec = NetworkSpec::cifar(NetKind::Pnnh, 18);
    let coders = spec
        .coder_widths()
        .into_iter()
        .map(|w| {
            let (c, _) = prepare_coder(
                spec.coder_spec(w),
                PretextTask::IdentityInitOnly,
                &CoderTraining::default(),
                &mut Rng::new(0),
            )
            .unwrap();
            (w, c)
        })
        .collect();
    let pnnh = build_network::<f32>(&spec, coders, &mut Rng::new(0)).unwrap();
    let ratio = pnnh.learnable_parameters() as f64 / residual.learnable_parameters() as f64;
    let elapsed = start.elapsed();
    outcome(
        (0.45..=0.55).contains(&ratio) && elapsed < Duration::from_secs(1),
        format!(
            "pnnh learner {} / residual {} = {ratio:.4}; {:.2?}",
            pnnh.learnable_parameters(),
            residual.learnable_parameters(),
            elapsed
        ),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let checks = run_gradient_suite().unwrap();
    let elapsed = start.elapsed();
    let worst = checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed: Vec<&str> = checks.iter().filter(|c| !(c.max_rel_error < 1e-4)).map(|c| c.name.as_str()).collect();
    outcome(
        failed.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} checks, worst {} at {:.2e}, failing {:?}; {:.1?}",
            checks.len(),
            worst.name,
            worst.max_rel_error,
            failed,
            elapsed
        ),
    )
}

fn bn_ablation() -> Outcome {
    let mut means = Vec::new();
    for policy in [BnPolicy::FirstOnly, BnPolicy::Both] {
        let spec = NetworkSpec { widths: vec![8, 16], bn_policy: policy, ..NetworkSpec::mnist(NetKind::Pnnh, 1) };
        let mut accs = Vec::new();
        for seed in 0..3 {
            let (train, val) = mnist(1000, 500, seed);
            let cfg = TrainConfig { epochs: 5, batch_size: 16, seed, ..Default::default() };
            accs.push(train_once(&spec, &cfg, &train, &val).unwrap_or(0.0));
        }
        means.push(accs.iter().sum::<f64>() / accs.len() as f64);
    }
    outcome(means[0] >= means[1], format!("first_only {:.4} vs both {:.4}", means[0], means[1]))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("bound formulas", bound_formulas),
        ("response statistics", response_statistics),
        ("bound validity", bound_validity),
        ("dissipating inputs", dissipating_inputs),
        ("coder math", coder_math),
        ("end-to-end training", end_to_end),
        ("parameter halving", parameter_halving),
        ("gradient suite", gradient_suite),
        ("bn ablation", bn_ablation),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {} ({name}): {verdict}  {}", i + 1, o.detail);
        if !o.passed {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
