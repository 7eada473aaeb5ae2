//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 13 and 14 run the bundled desk configuration twice through the
//! `uasml` binary, which takes several minutes on one core. Criterion numbers
//! given as arguments restrict the run to those criteria. Set
//! `UASML_ACCEPTANCE_STRICT=1` to turn any FAIL into a non-zero exit status.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use uasml_cli::stages::{read_toml, LagsFile, ValidationFile};
use uasml_core::bayes::variance::posterior_parameters;
use uasml_core::bayes::{
    coverage_region_xy, geweke_series, run_dram, Chain, DramConfig, Evaluation, InverseGamma,
    RegionGeometry, RegionKind, SpectralWindow, Target, VarianceMode, VariancePrior,
};
use uasml_core::excitation::{bounds_from_steady, correlation_matrix, lhs_sample, lhs_sample_min_correlation};
use uasml_core::mc_train::{summarize, EnsembleModel};
use uasml_core::narx::{lipschitz_surface, select_lags, IoSeries, LipschitzOptions};
use uasml_core::neural::{count_params, loss_and_grads, train, Activation, Mlp, MlpSpec, TrainConfig};
use uasml_core::narx::{NarxConfig, NarxDataset, NarxScalers, Scaler};
use uasml_core::ode::Dopri5;
use uasml_core::reactor::{
    algebraic_outputs, find_steady_state, integrate, normalized_residual, rate_constants, viscosity,
};
use uasml_core::rng::stream;
use uasml_core::stats;
use uasml_core::tuner::preset;
use uasml_core::{InputSchedule, ModelVariant, OdeOptions, ReactorInputs, ReactorParameters, ReactorState};

const DESK_CONFIG: &str = "configs/paper-desk.config";
const REFERENCE_MEDIAN_TEST_MSE: [(&str, f64); 2] = [("T", 2.37e-5), ("eta", 5.87e-5)];
const DESK_TIME_LIMIT_S: f64 = 1800.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn rate_and_algebra() -> Verdict {
    let p = ReactorParameters::nominal();
    let t = 330.0;
    let k = rate_constants(t, &p).unwrap();
    let kd = p.ad * (-p.ed / t).exp();
    let kp = p.ap * (-p.ep / t).exp();
    let kt = p.at * (-p.et / t).exp();
    let mut worst = rel(k.kd, kd).max(rel(k.kp, kp)).max(rel(k.kt, kt));
    let u = ReactorInputs::steady_default();
    let x = ReactorState { i: 0.05, m: 3.0, t, tc: 305.0, d0: 2.5e-4, d1: 15.0, d2: 5000.0 };
    for variant in [ModelVariant::as_printed(), ModelVariant::physical()] {
        let a = algebraic_outputs(&x, &u, &p, &variant).unwrap();
        worst = worst.max(rel(a.qt, u.qi + u.qs + u.qm));
        let mw = a.mw.unwrap();
        worst = worst.max(rel(mw, p.mm * x.d2 / x.d1));
        worst = worst.max(rel(a.eta.unwrap(), 0.0012 * mw.powf(0.71)));
    }
    worst = worst.max(rel(viscosity(104.14), 0.0012 * 104.14f64.powf(0.71)));
    let spot = (kd, kp, viscosity(104.14), u.total_flow());
    let pass = worst < 1e-12 && rel(kd, 5.31e-3) < 1e-2 && rel(kp, 7.94e5) < 1e-2 && spot.3 == 945.0;
    verdict(
        pass,
        format!(
            "max rel err {worst:.1e}; kd(330)={:.4e}, kp(330)={:.4e}, eta(104.14)={:.4e}, Qt={}",
            spot.0, spot.1, spot.2, spot.3
        ),
    )
}

fn integrator() -> Verdict {
    let tol = 1e-8;
    let solve = |rtol: f64| {
        let mut s = Dopri5::<1>::new(OdeOptions { rtol, atol: rtol * 1e-2, ..OdeOptions::default() });
        s.integrate(&mut |_, y| [-y[0]], 0.0, [1.0], 1.0).unwrap()[0]
    };
    let y = solve(tol);
    let err = rel(y, (-1.0f64).exp());
    let half = (solve(tol / 2.0) - y).abs() / y;

    let p = ReactorParameters::nominal();
    let u = ReactorInputs::steady_default();
    let v = ModelVariant::physical();
    let x0 = ReactorState { i: 0.06, m: 3.0, t: 320.0, tc: 303.0, d0: 2.0e-4, d1: 14.0, d2: 4000.0 };
    let sched = InputSchedule::constant(u, 50.0);
    let endpoint = |rtol: f64| {
        integrate(&x0, &sched, &p, &v, &[0.0, 50.0], OdeOptions::with_rtol(rtol)).unwrap().states[1].to_array()
    };
    let (a, b) = (endpoint(1e-6), endpoint(5e-7));
    let reactor_half = a.iter().zip(&b).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max);
    verdict(
        err < tol && half < 10.0 * tol && reactor_half < 1e-5,
        format!("|y(1)-e^-1|/e^-1={err:.1e}; halving tol moves y by {half:.1e} (exp), {reactor_half:.1e} (reactor)"),
    )
}

fn steady_state() -> Verdict {
    let p = ReactorParameters::nominal();
    let u = ReactorInputs::steady_default();
    let sched = InputSchedule::constant(u, 2000.0);
    let mut worst_res: f64 = 0.0;
    let mut gaps = Vec::new();
    for v in [ModelVariant::physical(), ModelVariant::as_printed()] {
        let x = find_steady_state(&p, &u, &v, &ReactorState::nominal_guess()).unwrap();
        worst_res = worst_res.max(normalized_residual(&x, &u, &p, &v));
        let end = integrate(&ReactorState::nominal_guess(), &sched, &p, &v, &[0.0, 2000.0], OdeOptions::default())
            .unwrap()
            .states[1]
            .to_array();
        gaps.push(end.iter().zip(x.to_array()).map(|(a, b)| rel(*a, b)).fold(0.0, f64::max));
    }
    verdict(
        worst_res < 1e-9 && gaps[0] < 1e-5,
        format!(
            "normalized residual {worst_res:.1e}; 2000 h endpoint gap {:.1e} (as-printed variant, whose steady state is unstable: {:.1e})",
            gaps[0], gaps[1]
        ),
    )
}

fn lhs() -> Verdict {
    let mut rng = stream(40, "combos", 0);
    let mut exact = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=60);
        let d = rng.gen_range(1..=8);
        let seed: u64 = rng.gen();
        let bounds: Vec<(f64, f64)> = (0..d).map(|j| (j as f64, j as f64 + 1.0 + rng.gen_range(0.0..10.0))).collect();
        let plain = lhs_sample(n, &bounds, &mut stream(seed, "lhs", 0)).unwrap();
        let screened = lhs_sample_min_correlation(n, &bounds, 5, &mut stream(seed, "lhs", 1)).unwrap();
        if (0..d).all(|j| {
            plain.stratum_counts(j).iter().all(|&c| c == 1) && screened.stratum_counts(j).iter().all(|&c| c == 1)
        }) {
            exact += 1;
        }
    }
    let bounds = bounds_from_steady(&ReactorInputs::steady_default(), 0.15).unwrap();
    let mut total = 0.0;
    let mut count = 0usize;
    for seed in 0..200 {
        let design = lhs_sample_min_correlation(30, &bounds, 5, &mut stream(seed, "lhs", 0)).unwrap();
        let c = correlation_matrix(&design).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    total += c[i][j].abs();
                    count += 1;
                }
            }
        }
    }
    let mean = total / count as f64;
    verdict(exact == 1000 && mean < 0.15, format!("{exact}/1000 designs stratified; mean |r| = {mean:.4} over 200 seeds"))
}

struct Normal1;

impl Target for Normal1 {
    fn dim(&self) -> usize {
        1
    }

    fn evaluate(&self, x: &[f64]) -> Evaluation {
        Evaluation { log_density: -0.5 * x[0] * x[0], sse: Vec::new() }
    }
}

fn ks_normal(x: &[f64]) -> f64 {
    let s = stats::sorted(x);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, v)| {
            let f = stats::normal_cdf(*v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn dram(desk: &Path) -> Verdict {
    let cfg = DramConfig { n_samples: 21_000, burn_in: 1_000, initial_sigma: 1.0, seed: 41, ..DramConfig::default() };
    let chain = run_dram(&Normal1, &[(-50.0, 50.0)], &[0.0], &["x".to_string()], &[], &cfg).unwrap();
    let x = chain.column(0);
    let (m, sd, ks) = (stats::mean(&x), stats::std_dev(&x), ks_normal(&x));
    let reactor = Chain::read_csv(&desk.join("mcmc/chain.csv"), 0);
    let (inside, total) = match &reactor {
        Ok(c) => (c.draws.iter().filter(|d| d.iter().all(|v| (0.95..=1.05).contains(v))).count(), c.draws.len()),
        Err(_) => (0, 0),
    };
    verdict(
        x.len() == 20_000 && m.abs() < 0.05 && (0.93..=1.07).contains(&sd) && ks < 0.02 && total > 0 && inside == total,
        format!("mean {m:.4}, std {sd:.4}, KS {ks:.4}; reactor draws in box {inside}/{total}"),
    )
}

fn conjugate() -> Verdict {
    let prior = VariancePrior::default();
    let exact = [10usize, 100, 4501]
        .iter()
        .all(|&n| posterior_parameters(2.0, n, &prior, VarianceMode::Standard).unwrap().0 == n as f64 / 2.0);
    let ig = InverseGamma::new(50.0, 50.0).unwrap();
    let mut rng = stream(42, "ig", 0);
    let draws: Vec<f64> = (0..100_000).map(|_| ig.sample(&mut rng)).collect();
    let m = stats::mean(&draws);
    let target = 50.0 / 49.0;
    verdict(exact && rel(m, target) < 0.02, format!("alpha = N/2: {exact}; sampler mean {m:.5} vs {target:.5}"))
}

fn geweke() -> Verdict {
    let n = 2000;
    let iid = |seed: u64| -> Vec<f64> {
        let mut rng = stream(seed, "geweke", 0);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    let ok = (0..100).filter(|&s| geweke_series(&iid(s), 0.1, 0.5, SpectralWindow::ZeroLag).unwrap().p > 0.05).count();
    let trend: Vec<f64> = iid(1000).iter().enumerate().map(|(k, v)| v + 5.0 * k as f64 / n as f64).collect();
    let p = geweke_series(&trend, 0.1, 0.5, SpectralWindow::ZeroLag).unwrap().p;
    verdict(ok >= 95 && p < 0.01, format!("{ok}/100 i.i.d. chains with p > 0.05; trend chain p = {p:.2e}"))
}

fn coverage() -> Verdict {
    let mut rng = stream(43, "bivariate", 0);
    let (x, y): (Vec<f64>, Vec<f64>) =
        (0..100_000).map(|_| -> (f64, f64) { (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)) }).unzip();
    let e = coverage_region_xy(&x, &y, 0.95, RegionKind::GaussianEllipse).unwrap();
    let axes = match &e.geometry {
        RegionGeometry::Ellipse(el) => el.semi_axes,
        _ => [f64::NAN; 2],
    };
    let target = 5.991f64.sqrt();
    let axis_err = axes.iter().map(|a| rel(*a, target)).fold(0.0, f64::max);
    let hdr = coverage_region_xy(&x, &y, 0.95, RegionKind::PossoloHdr).unwrap();
    let inside = x.iter().zip(&y).filter(|(a, b)| hdr.contains([**a, **b])).count() as f64 / x.len() as f64;
    verdict(
        axis_err < 0.03 && (0.93..=0.97).contains(&inside),
        format!("semi-axes {:.4}, {:.4} (max rel err {axis_err:.4}); HDR encloses {inside:.4}", axes[0], axes[1]),
    )
}

fn lipschitz(desk: &Path) -> Verdict {
    let mut rng = stream(44, "linear", 0);
    let n = 600;
    let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut y = vec![0.0; n];
    for k in 1..n {
        y[k] = 0.5 * y[k - 1] + u[k - 1];
    }
    let data = [IoSeries { inputs: u.into_iter().map(|v| vec![v]).collect(), output: y }];
    let surface = lipschitz_surface(&data, 4, 4, &LipschitzOptions::default()).unwrap();
    let planted = select_lags(&surface, 0.05).map(|c| (c.input_lags, c.output_lags)).ok();
    let lags: Option<LagsFile> = read_toml(&desk.join("lipschitz/lags.toml")).ok();
    let mut reactor = Vec::new();
    let mut reactor_ok = lags.is_some();
    if let Some(l) = &lags {
        for (t, r) in &l.targets {
            match &r.selected {
                Some(c) => {
                    reactor_ok &= c.input_lags == 4;
                    reactor.push(format!("{t}: ({}, {})", c.input_lags, c.output_lags));
                }
                None => {
                    reactor_ok = false;
                    reactor.push(format!("{t}: none ({})", r.selection_error.as_deref().unwrap_or("?")));
                }
            }
        }
    }
    verdict(planted == Some((1, 1)) && reactor_ok, format!("planted system -> {planted:?}; reactor {}", reactor.join(", ")))
}

fn parameter_counts() -> Verdict {
    let a = preset("reference-t", 18).map(|s| count_params(&s));
    let b = preset("reference-eta", 18).map(|s| count_params(&s));
    verdict(a == Some(11_081) && b == Some(71_011), format!("{a:?}, {b:?}"))
}

fn gradients() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut cases = Vec::new();
    for depth in 1..=7 {
        for act in [Activation::Tanh, Activation::Relu] {
            cases.push(MlpSpec::uniform(4, vec![6; depth], act, 1e-3));
        }
    }
    cases.push(MlpSpec::uniform(18, vec![10, 10], Activation::Tanh, 1e-3));
    for (c, spec) in cases.iter().enumerate() {
        let mut rng = stream(45, "grad", c as u64);
        let mut model = Mlp::init(spec, &mut rng).unwrap();
        for l in 0..model.n_layers() {
            model.layer_mut(l).1.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        }
        let rows = 8;
        let x: Vec<f64> = (0..rows * spec.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, g) = loss_and_grads(&model, &x, &y).unwrap();
        let h = 1e-6;
        for i in 0..model.n_params() {
            let mut plus = model.clone();
            plus.params[i] += h;
            let mut minus = model.clone();
            minus.params[i] -= h;
            let fd = (loss_and_grads(&plus, &x, &y).unwrap().0 - loss_and_grads(&minus, &x, &y).unwrap().0) / (2.0 * h);
            let scale = g[i].abs().max(fd.abs()).max(1e-4);
            worst = worst.max((g[i] - fd).abs() / scale);
        }
    }
    verdict(worst < 1e-5, format!("max relative error {worst:.2e} over {} networks", cases.len()))
}

fn dataset(x: Vec<f64>, y: Vec<f64>) -> NarxDataset {
    let unit = Scaler { min: -1.0, max: 1.0 };
    let cfg = NarxConfig { input_lags: 1, output_lags: 0, include_current_input: false };
    let n = y.len();
    NarxDataset {
        n_features: 1,
        x,
        y,
        blocks: vec![0; n],
        sample_index: (0..n).collect(),
        config: cfg,
        scalers: NarxScalers { inputs: vec![unit], output: unit },
    }
}

fn early_stopping() -> Verdict {
    let mut rng = stream(46, "plateau", 0);
    let x: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
    let xv: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let yv: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (train_set, val_set) = (dataset(x, y), dataset(xv, yv));
    let spec = MlpSpec::uniform(1, vec![4], Activation::Tanh, 1e-2);
    let patience = 20;
    let cfg = TrainConfig { max_epochs: 300, patience, ..TrainConfig::default() };
    let out = train(Mlp::init(&spec, &mut stream(46, "init", 0)).unwrap(), &train_set, &val_set, &cfg).unwrap();
    let best = out.history.best_epoch().unwrap();
    let exact = out.stopped_early && out.epochs_trained == best + 1 + patience;

    let mut bounded = true;
    for s in 0..5 {
        let xs: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|v| v.sin()).collect();
        let d = dataset(xs, ys);
        let cfg = TrainConfig { seed: s, ..TrainConfig::default() };
        let m = Mlp::init(&MlpSpec::uniform(1, vec![5], Activation::Tanh, 1e-3), &mut stream(46, "b", s)).unwrap();
        bounded &= train(m, &d, &d, &cfg).unwrap().epochs_trained <= 300;
    }
    verdict(
        exact && bounded,
        format!("best epoch {best}, stopped after {} epochs (patience {patience}); all runs <= 300: {bounded}", out.epochs_trained),
    )
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

struct DeskRun {
    dir: PathBuf,
    code: Option<i32>,
    seconds: f64,
}

fn desk_run(dir: &Path) -> DeskRun {
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_uasml"))
        .current_dir(workspace_root())
        .args(["run", "--config", DESK_CONFIG, "--out"])
        .arg(dir)
        .env("RUST_LOG", "warn")
        .status();
    DeskRun { dir: dir.to_path_buf(), code: status.ok().and_then(|s| s.code()), seconds: start.elapsed().as_secs_f64() }
}

fn desk_end_to_end(run: &DeskRun) -> Verdict {
    let mut parts = vec![format!("exit {:?} in {:.0} s", run.code, run.seconds)];
    let mut pass = run.code == Some(0) && run.seconds <= DESK_TIME_LIMIT_S;
    for (t, reference) in REFERENCE_MEDIAN_TEST_MSE {
        match EnsembleModel::read_dir(&run.dir.join("mctrain").join(t)).and_then(|m| summarize(&m)) {
            Ok(s) => {
                let median = s.test_mse.median;
                let decades = (median / reference).log10().abs();
                pass &= decades <= 1.0;
                parts.push(format!("{t} median test MSE {median:.3e} (ref {reference:.2e})"));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{t}: {e}"));
            }
        }
    }
    match read_toml::<ValidationFile>(&run.dir.join("validate/overlap.toml")) {
        Ok(v) => {
            pass &= v.pass;
            for (t, r) in &v.targets {
                parts.push(format!("{t} overlap {:.4}", r.fraction));
            }
        }
        Err(_) => {
            pass = false;
            parts.push("no overlap report".into());
        }
    }
    verdict(pass, parts.join("; "))
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
                if rel != "timings.toml" && rel != "run.lock" {
                    out.insert(rel, fs::read(&p).unwrap_or_default());
                }
            }
        }
    }
    out
}

fn determinism(a: &DeskRun, b: &DeskRun) -> Verdict {
    let (ta, tb) = (tree(&a.dir), tree(&b.dir));
    let differing: Vec<&String> = ta.keys().filter(|k| tb.get(*k) != ta.get(*k)).collect();
    let missing = tb.keys().filter(|k| !ta.contains_key(*k)).count();
    let manifest_same = ta.get("manifest.toml").is_some() && ta.get("manifest.toml") == tb.get("manifest.toml");
    let pass = a.code.is_some() && a.code == b.code && differing.is_empty() && missing == 0 && manifest_same;
    let first = differing.first().map(|s| format!(", first: {s}")).unwrap_or_default();
    verdict(
        pass,
        format!(
            "{} artifacts, {} differ{first}, {missing} only in rerun; manifest identical: {manifest_same}; rerun {:.0} s",
            ta.len(),
            differing.len(),
            b.seconds
        ),
    )
}

fn main() {
    let strict = std::env::var("UASML_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |i: usize| only.is_empty() || only.contains(&i);
    let tmp = tempfile::tempdir().expect("temporary directory");
    let (first_dir, second_dir) = (tmp.path().join("first"), tmp.path().join("second"));
    let first = [5, 9, 13, 14].iter().any(|&i| wanted(i)).then(|| {
        eprintln!("acceptance: running the desk pipeline; this takes a while");
        desk_run(&first_dir)
    });
    let second = wanted(14).then(|| desk_run(&second_dir));

    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("Arrhenius and algebraic spot checks", Box::new(rate_and_algebra)),
        ("integrator oracle and self-convergence", Box::new(integrator)),
        ("steady state residual and long-horizon agreement", Box::new(steady_state)),
        ("LHS stratification and input correlation", Box::new(lhs)),
        ("DRAM on a standard normal; reactor draws inside the box", Box::new(|| dram(&first_dir))),
        ("conjugate variance update", Box::new(conjugate)),
        ("Geweke null and trend behavior", Box::new(geweke)),
        ("coverage regions", Box::new(coverage)),
        ("Lipschitz lag recovery", Box::new(|| lipschitz(&first_dir))),
        ("parameter counts of the reference architectures", Box::new(parameter_counts)),
        ("gradient check", Box::new(gradients)),
        ("early stopping", Box::new(early_stopping)),
        ("desk-scale end-to-end run", Box::new(|| desk_end_to_end(first.as_ref().unwrap()))),
        ("determinism audit", Box::new(|| determinism(first.as_ref().unwrap(), second.as_ref().unwrap()))),
    ];
    let (mut run, mut failed) = (0, 0);
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !wanted(i + 1) {
            continue;
        }
        let v = check();
        run += 1;
        if !v.pass {
            failed += 1;
        }
        println!("{} {:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, i + 1, v.detail);
    }
    println!("{}/{run} criteria passed", run - failed);
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
