//! Acceptance suite: prints one PASS/FAIL line per criterion, then exits
//! nonzero if any criterion failed.
#![allow(clippy::approx_constant)]

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use leeds_core::detect::{self, EnergySign};
use leeds_core::harness::{self, run, TheorySettings};
use leeds_core::learner::{leeds_step, Hyperparams, LearnerMode, LearnerState};
use leeds_core::netcore::{self, Activation, LabeledBatch, Matrix, NetConfig, ParamSet};
use leeds_core::rng::{derive_seed, streams, Rng64};
use leeds_core::stream::{Episode, TaskBatch};
use leeds_core::theory::{self, QuadTask};
use leeds_core::{DetectorParams, ExperimentConfig, Result};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn default_config(out: &Path) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let overrides = [
        ("output_dir".to_string(), out.join("default").display().to_string()),
        ("cache_dir".to_string(), out.join("cache").display().to_string()),
    ];
    ExperimentConfig::load(&path, &overrides).expect("default config")
}

fn time_limit(elapsed: Duration, limit_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < limit_s, format!("{s:.1} s (< {limit_s} s)"))
}

// 1 ------------------------------------------------------------------------

fn gradient_oracle() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = Rng64::new(1, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let hidden = (0..rng.index(3)).map(|_| 1 + rng.index(16)).collect();
        let cfg = NetConfig {
            input_dim: 1 + rng.index(8),
            hidden_dims: hidden,
            n_classes: 2 + rng.index(4),
            activation: if rng.bernoulli(0.5) { Activation::Relu } else { Activation::Tanh },
        };
        let params = ParamSet::glorot(&cfg, &mut rng);
        let params = params.with_values(params.values().iter().map(|v| v + 0.1 * rng.normal()).collect())?;
        let n = 1 + rng.index(16);
        let inputs = Matrix::new(n, cfg.input_dim, (0..n * cfg.input_dim).map(|_| rng.normal()).collect())?;
        let batch = LabeledBatch::new(inputs, (0..n).map(|_| rng.index(cfg.n_classes)).collect())?;
        let (_, g) = netcore::loss_and_grad(&params, &cfg, &batch)?;
        let fd = netcore::finite_diff_grad(&params, &cfg, &batch, 1e-5)?;
        worst = worst.max(netcore::relative_error(g.values(), fd.values()));
    }
    let (fast, t) = time_limit(start.elapsed(), 30.0);
    Ok(outcome(worst < 1e-4 && fast, format!("max relative L2 error {worst:.2e} (< 1e-4) over 100 nets, {t}")))
}

// 2 ------------------------------------------------------------------------

fn detector_facts() -> Result<Outcome> {
    let e0 = detect::energy(&[0.0, 0.0], 1.0, EnergySign::Paper);
    let e0_err = (e0 + 2f64.ln()).abs();
    let mut rng = Rng64::new(2, 0);
    let mut shift_err: f64 = 0.0;
    for _ in 0..1000 {
        let k = 2 + rng.index(9);
        let g: Vec<f64> = (0..k).map(|_| 5.0 * rng.normal()).collect();
        let c = 10.0 * rng.normal();
        let delta = rng.uniform_range(0.1, 3.0);
        let shifted: Vec<f64> = g.iter().map(|v| v + c).collect();
        // E(g + c) = E(g) + c under EnergySign::Paper, E(g) - c under Literature
        let p = detect::energy(&shifted, delta, EnergySign::Paper) - detect::energy(&g, delta, EnergySign::Paper) - c;
        let l = detect::energy(&shifted, delta, EnergySign::Literature) - detect::energy(&g, delta, EnergySign::Literature) + c;
        shift_err = shift_err.max(p.abs()).max(l.abs());
    }
    let ell10 = detect::default_ell(10);
    let ell_err = (ell10 - 2.302585).abs();
    Ok(outcome(
        e0_err <= 1e-12 && shift_err <= 1e-10 && ell_err <= 1e-6,
        format!(
            "energy([0,0]) = {e0:.15} (err {e0_err:.1e} <= 1e-12), translation err {shift_err:.1e} (<= 1e-10), default_ell(10) = {ell10:.7} (err {ell_err:.1e} <= 1e-6)"
        ),
    ))
}

// 3 ------------------------------------------------------------------------

fn switch_detection(cfg: &ExperimentConfig) -> Result<Outcome> {
    let start = Instant::now();
    let ctx = run::prepare_seed(cfg, 0)?;
    let rec = run::run_mode(cfg, &ctx, LearnerMode::Leeds, None, false)?;
    let pr = harness::precision_recall(&rec.outcomes);
    let (fast, t) = time_limit(start.elapsed(), 300.0);
    Ok(outcome(
        pr.precision >= 0.95 && pr.recall >= 0.95 && fast,
        format!(
            "p = {}, {} episodes, ell = {:.4}: precision {:.4} (>= 0.95), recall {:.4} (>= 0.95), tp {} fp {} fn {}, {t}",
            cfg.stream.p_stay, cfg.n_steps, ctx.det.ell, pr.precision, pr.recall, pr.true_positives, pr.false_positives, pr.false_negatives
        ),
    ))
}

// 4 ------------------------------------------------------------------------

fn hoeffding_dominance(cfg: &ExperimentConfig) -> Result<Outcome> {
    let start = Instant::now();
    let t = TheorySettings::default();
    let ctx = run::prepare_seed(cfg, 0)?;
    let mut tcfg = t.base_config(cfg.net.n_classes);
    let levels = theory::calibrate_levels(&cfg.stream, &ctx.theta0, &cfg.net, &cfg.hp, &tcfg, &mut Rng64::new(ctx.seed, streams::CALIBRATION))?;
    tcfg = levels.apply(&tcfg);
    let mut pass = levels.separated();
    let mut parts = vec![format!("ell_m {:.4} ell_p {:.4} M {:.4}", tcfg.ell_m, tcfg.ell_p, tcfg.m_clip)];
    if pass {
        for s in [4, 8, 16, 32] {
            let mut rng = Rng64::new(derive_seed(ctx.seed, s as u64), streams::THEORY);
            let rep = theory::empirical_detection_error(&cfg.stream, &ctx.theta0, &cfg.net, &cfg.hp, s, 10_000, &tcfg, &mut rng)?;
            pass &= rep.dominated();
            parts.push(format!("S={s}: {:.4} <= {:.4}+{:.4}", rep.rate, rep.bound, rep.slack()));
        }
    } else {
        parts.push("levels not separated".into());
    }
    let (fast, t) = time_limit(start.elapsed(), 600.0);
    parts.push(t);
    Ok(outcome(pass && fast, parts.join("; ")))
}

// 5 ------------------------------------------------------------------------

fn contraction() -> Result<Outcome> {
    let mut rng = Rng64::new(5, 0);
    let (mut worst_rho, mut worst_chain, mut checked) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..50 {
        let mu = rng.uniform_range(0.05, 2.0);
        let beta = mu * rng.uniform_range(1.0, 20.0);
        let alpha = rng.uniform_range(1e-3, 1.0 - 1e-3) * 2.0 / beta;
        let (emp, closed) = theory::contraction_ratio(mu, beta, alpha, 1, &mut rng)?;
        worst_rho = worst_rho.max((emp - closed).abs());

        let dim = 2 + rng.index(7);
        let mut curvature: Vec<f64> = (0..dim).map(|_| rng.uniform_range(mu, beta)).collect();
        curvature[0] = mu;
        curvature[1] = beta;
        let task = QuadTask {
            center: (0..dim).map(|_| rng.normal()).collect(),
            curvature,
        };
        let phi0: Vec<f64> = (0..dim).map(|_| 5.0 * rng.normal()).collect();
        let chain = theory::contraction_chain(&task, alpha, &phi0, 50);
        // stop where the distance reaches the resolution of the iterates
        for (k, d) in chain.iter().enumerate().take_while(|(_, d)| **d > 1e-9) {
            worst_chain = worst_chain.max(d / (closed.powi(k as i32) * chain[0]));
            checked += 1;
        }
    }
    Ok(outcome(
        worst_rho <= 1e-8 && worst_chain <= 1.0 + 1e-8,
        format!("max |rho_emp - rho| {worst_rho:.1e} (<= 1e-8) on 50 quadratics; max chain ratio {worst_chain:.12} (<= 1+1e-8) over {checked} steps"),
    ))
}

// 6 ------------------------------------------------------------------------

fn regret_behaviour(cfg: &ExperimentConfig) -> Result<Outcome> {
    let start = Instant::now();
    let t = TheorySettings::default();
    let base_seed = derive_seed(run::seed_for(cfg, 0), streams::THEORY);
    let (checks, quad) = harness::theory_report::quadratic_checks(&t, base_seed)?;
    let wanted = |name: &str| name.starts_with("zero_variance") || name.starts_with("tar_plateau") || name.starts_with("tradeoff");
    let mut pass = true;
    let mut parts = vec![format!("{} seeds", t.quad_seeds)];
    for c in checks.iter().filter(|c| wanted(&c.name)) {
        pass &= c.pass == Some(true);
        parts.push(format!("{} {:.4} vs {:.4}", c.name, c.measured, c.bound.unwrap_or(f64::NAN)));
    }
    let tars: Vec<String> = quad
        .iter()
        .filter(|q| q.n_tasks == t.horizons[1] && q.detection_error.is_none() && q.spread > 0.0)
        .map(|q| format!("{:.3}", q.tar))
        .collect();
    let errs: Vec<String> = quad
        .iter()
        .filter_map(|q| q.detection_error.map(|e| format!("{e:.3}")))
        .collect();
    parts.push(format!("plateau TAR by spread [{}], detection error [{}]", tars.join(", "), errs.join(", ")));
    let (fast, t) = time_limit(start.elapsed(), 600.0);
    parts.push(t);
    Ok(outcome(pass && fast, parts.join("; ")))
}

// 7 ------------------------------------------------------------------------

/// Softmax-regression gradient for one sample of a 2-feature, 2-class model
/// with parameters `[w00, w01, w10, w11, b0, b1]`.
fn hand_grad(p: &[f64], x: [f64; 2], y: usize) -> Vec<f64> {
    let g0 = p[0] * x[0] + p[1] * x[1] + p[4];
    let g1 = p[2] * x[0] + p[3] * x[1] + p[5];
    let p0 = 1.0 / (1.0 + (g1 - g0).exp());
    let e0 = p0 - if y == 0 { 1.0 } else { 0.0 };
    let e1 = (1.0 - p0) - if y == 1 { 1.0 } else { 0.0 };
    vec![e0 * x[0], e0 * x[1], e1 * x[0], e1 * x[1], e0, e1]
}

fn axpy(p: &[f64], g: &[f64], lr: f64) -> Vec<f64> {
    p.iter().zip(g).map(|(a, b)| a - lr * b).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn branch_correctness() -> Result<Outcome> {
    let net = NetConfig {
        input_dim: 2,
        hidden_dims: vec![],
        n_classes: 2,
        activation: Activation::Relu,
    };
    let hp = Hyperparams {
        alpha1: 0.3,
        alpha2: 0.2,
        inner_steps_pretrain: 1,
        pretrain_tasks: 0,
        pretrain_meta_batch: 1,
        pretrain_alpha2: None,
        cmaml_gamma: 1.0,
    };
    let one = |x: [f64; 2], y: usize| LabeledBatch::new(Matrix::new(1, 2, x.to_vec()).unwrap(), vec![y]).unwrap();
    let (xs, ys, xq, yq) = ([0.7, -1.2], 1usize, [-0.4, 0.9], 0usize);
    let ep = |switched: bool, pretrain: bool| Episode {
        batch: TaskBatch {
            support: one(xs, ys),
            query: one(xq, yq),
        },
        truth_switched: switched,
        truth_domain_id: if pretrain { 0 } else { 1 },
        truth_is_pretrain: pretrain,
        task_uid: 0,
        step_index: 1,
        within_task_index: 0,
    };
    let theta = vec![0.2, -0.5, 0.4, 0.1, 0.05, -0.3];
    let phi = vec![-0.1, 0.3, 0.6, -0.2, 0.0, 0.1];
    let det = |ell: f64, tau: f64| DetectorParams {
        ell,
        tau,
        delta: 1.0,
        energy_sign: EnergySign::Paper,
    };
    let state = |d: DetectorParams| LearnerState {
        meta: ParamSet::from_values(vec![2, 2], theta.clone()).unwrap(),
        online: Some(ParamSet::from_values(vec![2, 2], phi.clone()).unwrap()),
        det: d,
        mode: LearnerMode::Leeds,
        last_support_loss: None,
    };

    let theta_adapt = axpy(&theta, &hand_grad(&theta, xs, ys), hp.alpha1);
    let theta_meta = axpy(&theta, &hand_grad(&theta_adapt, xq, yq), hp.alpha2);
    let phi_cont = axpy(&phi, &hand_grad(&phi, xs, ys), hp.alpha1);

    // switch: loss threshold below any cross-entropy value
    let (s, o) = leeds_step(&state(det(1e-9, f64::NEG_INFINITY)), &ep(true, true), &net, &hp)?;
    let sw = max_diff(s.online.as_ref().unwrap().values(), &theta_adapt).max(max_diff(s.meta.values(), &theta_meta));
    // no switch, shifted support
    let (a, oa) = leeds_step(&state(det(1e9, f64::INFINITY)), &ep(false, false), &net, &hp)?;
    let ood = max_diff(a.online.as_ref().unwrap().values(), &phi_cont).max(max_diff(a.meta.values(), &theta_meta));
    // no switch, in-distribution support
    let (b, ob) = leeds_step(&state(det(1e9, f64::NEG_INFINITY)), &ep(false, true), &net, &hp)?;
    let ind = max_diff(b.online.as_ref().unwrap().values(), &phi_cont);
    let bit_identical = b.meta.values().iter().zip(&theta).all(|(x, y)| x.to_bits() == y.to_bits());
    let flags = o.detected_switch && !oa.detected_switch && oa.detected_ood && !ob.detected_switch && !ob.detected_ood;
    Ok(outcome(
        sw <= 1e-10 && ood <= 1e-10 && ind <= 1e-10 && bit_identical && flags,
        format!("switch err {sw:.1e}, no-switch shifted err {ood:.1e}, no-switch in-distribution err {ind:.1e} (<= 1e-10); meta bit-identical on in-distribution: {bit_identical}"),
    ))
}

// 8 ------------------------------------------------------------------------

fn directional(cfg: &ExperimentConfig, out: &Path) -> Result<(Outcome, harness::ExperimentResult)> {
    let start = Instant::now();
    let res = harness::run_experiment(cfg)?;
    let mut low = cfg.clone();
    low.stream.p_stay = 0.75;
    low.modes = vec![LearnerMode::Leeds];
    low.output_dir = out.join("p075");
    let low_res = harness::run_experiment(&low)?;

    let acc = |m| res.summary(m).map(|s| s.overall_acc_mean).unwrap_or(f64::NAN);
    let ood = |m| res.summary(m).map(|s| s.ood_acc_overall()).unwrap_or(f64::NAN);
    let leeds = acc(LearnerMode::Leeds);
    let leeds_low = low_res.summary(LearnerMode::Leeds).unwrap().overall_acc_mean;
    let gap = ood(LearnerMode::Leeds) - ood(LearnerMode::LeedsNoDa);
    let checks = [
        ("LEEDS > maml_reset", leeds > acc(LearnerMode::MamlReset)),
        ("LEEDS > meta_ogd", leeds > acc(LearnerMode::MetaOgd)),
        ("OOD gap over leeds_no_da >= 0.02", gap >= 0.02),
        ("LEEDS(p=0.9) >= LEEDS(p=0.75)", leeds >= leeds_low),
    ];
    let (fast, t) = time_limit(start.elapsed(), 1800.0);
    let verdicts: Vec<String> = checks.iter().map(|(n, ok)| format!("{n}: {}", if *ok { "yes" } else { "no" })).collect();
    let detail = format!(
        "{} seeds x {} episodes; overall acc leeds {:.4} maml_reset {:.4} meta_ogd {:.4} leeds(p=0.75) {:.4}; OOD acc leeds {:.4} leeds_no_da {:.4} (gap {:+.4}); {}; {t}",
        cfg.n_seeds,
        cfg.n_steps,
        leeds,
        acc(LearnerMode::MamlReset),
        acc(LearnerMode::MetaOgd),
        leeds_low,
        ood(LearnerMode::Leeds),
        ood(LearnerMode::LeedsNoDa),
        gap,
        verdicts.join(", ")
    );
    Ok((outcome(checks.iter().all(|(_, ok)| *ok) && fast, detail), res))
}

// 9 ------------------------------------------------------------------------

fn determinism(cfg: &ExperimentConfig, first: &harness::ExperimentResult, out: &Path) -> Result<Outcome> {
    let mut again = cfg.clone();
    again.output_dir = out.join("rerun");
    harness::run_experiment(&again)?;
    let mut files = vec!["summary.csv".to_string()];
    for &mode in &cfg.modes {
        for i in 0..cfg.n_seeds {
            files.push(format!("episodes/{mode}_seed{i}.csv"));
        }
    }
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| fs::read(first.output_dir.join(f)).ok() != fs::read(again.output_dir.join(f)).ok())
        .collect();
    Ok(outcome(
        differing.is_empty(),
        format!("{} files compared byte for byte, {} differ {:?}", files.len(), differing.len(), differing),
    ))
}

// 10 -----------------------------------------------------------------------

fn tau_calibration(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ctx = run::prepare_seed(cfg, 0)?;
    let n = cfg.calibration.n_supports;
    let coverage = cfg.calibration.coverage;
    let spec = cfg.det.settings();
    let (repeats, held_out) = (400, 2000);
    let mut rng = Rng64::new(derive_seed(ctx.seed, 10), streams::CALIBRATION);
    let score = |s: &Matrix| detect::support_score(s, &ctx.theta0, &cfg.net, spec.delta, spec.energy_sign);
    let mut rates = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let cal = run::pretrain_supports(&cfg.stream, n, &mut rng)?;
        let tau = detect::calibrate_tau(&cal, &ctx.theta0, &cfg.net, spec.delta, spec.energy_sign, coverage)?;
        let fresh = run::pretrain_supports(&cfg.stream, held_out, &mut rng)?;
        let mut ind = 0usize;
        for s in &fresh {
            if score(s)? > tau {
                ind += 1;
            }
        }
        rates.push(ind as f64 / held_out as f64);
    }
    let mean = rates.iter().sum::<f64>() / repeats as f64;
    let sd = (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64).sqrt();
    let tol = 1.0 / n as f64;
    Ok(outcome(
        (mean - coverage).abs() <= tol,
        format!(
            "n = {n}: held-out in-distribution rate {mean:.5} (|{mean:.5} - {coverage}| <= {tol}) averaged over {repeats} calibrations x {held_out} held-out supports; single-calibration sd {sd:.4}"
        ),
    ))
}

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = default_config(dir.path());
    let mut results: Vec<(u32, &str, Result<Outcome>)> = Vec::new();
    let mut report = |id: u32, name: &'static str, r: Result<Outcome>| {
        let line = match &r {
            Ok(o) => format!("[{}] {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => format!("[FAIL] {id:>2} {name}: error: {e}"),
        };
        println!("{line}");
        results.push((id, name, r));
    };

    report(1, "gradient oracle", gradient_oracle());
    report(2, "detector micro-facts", detector_facts());
    report(3, "switch detection quality", switch_detection(&cfg));
    report(4, "Hoeffding dominance", hoeffding_dominance(&cfg));
    report(5, "contraction", contraction());
    report(6, "regret behaviour on quadratics", regret_behaviour(&cfg));
    report(7, "branch correctness", branch_correctness());
    match directional(&cfg, dir.path()) {
        Ok((o, res)) => {
            report(8, "directional reproduction", Ok(o));
            report(9, "determinism", determinism(&cfg, &res, dir.path()));
        }
        Err(e) => {
            report(8, "directional reproduction", Err(e));
            let mut small = cfg.clone();
            small.n_steps = 500;
            small.output_dir = dir.path().join("small");
            let r = harness::run_experiment(&small).and_then(|res| determinism(&small, &res, dir.path()));
            report(9, "determinism", r);
        }
    }
    report(10, "tau calibration", tau_calibration(&cfg));

    let failed: Vec<u32> = results
        .iter()
        .filter(|(_, _, r)| !matches!(r, Ok(o) if o.pass))
        .map(|(id, _, _)| *id)
        .collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
