//! Acceptance criteria 1 to 11. Runs as a plain binary and prints one
//! pass/fail line per criterion; exits nonzero if any criterion fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use distgap::bounds::{
    bound_report, check_gronwall_eq, compute_cp, compute_kf_kg, estimate_an, estimate_errors_lq, BoundInputs,
    BoundKnobs,
};
use distgap::dynamics::{
    simulate_check_flow, Ensemble, IntegratorConfig, NoiseSource, PolicyHandle, TimeConvention,
};
use distgap::experiments::{gap_slope, scan_records, RunConfig};
use distgap::hamiltonian::{
    envelope_grad_h, hamiltonian_full, phi_grad, solve_check_a, solve_hat_a, FixedPointConfig, SiteField,
};
use distgap::model::catalog::{CatalogTerm, Instance};
use distgap::model::{audit_assumptions, AuditConfig, ProblemSpec};
use distgap::numerics::{central_grad, dot, norm};
use distgap::value::{
    build_check_policy, grid_hjb_full, lift_value, mc_cost, riccati_full, GridConfig, RiccatiFeedback,
    ValueFunction, RICCATI_STEPS,
};
use distgap::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = (&'static str, fn() -> Result<Outcome>, f64);

fn lq(kappa: f64) -> Instance {
    Instance {
        pairwise: CatalogTerm::new("quadratic_pairwise", &[kappa]),
        ..Instance::default()
    }
}

/// Non-quadratic terminal cost and a nonzero `f_0`.
fn compliant() -> Instance {
    Instance {
        f0: CatalogTerm::new("lipschitz_f0", &[0.3, 0.5]),
        terminal: CatalogTerm::new("huber_terminal", &[1.0, 0.5]),
        ..Instance::default()
    }
}

fn audited(inst: &Instance, n: usize) -> Result<ProblemSpec> {
    let spec = inst.build(n)?;
    let report = audit_assumptions(&spec, &AuditConfig::new(500, 17))?;
    if let Some(f) = report.failures().next() {
        return Err(distgap::Error::config(format!("audit item `{}` failed: {}", f.name, f.note)));
    }
    Ok(spec)
}

fn random_p(rng: &mut ChaCha8Rng, spec: &ProblemSpec) -> Vec<f64> {
    let s = (2.0 * spec.terminal.c_g()).max(1.0) / spec.n_agents as f64;
    (0..spec.state_len()).map(|_| rng.random_range(-s..s)).collect()
}

/// Covector field with every block in the closed ball of radius `r`.
fn random_field(rng: &mut ChaCha8Rng, sites: usize, n: usize, d: usize, r: f64) -> SiteField {
    SiteField::from_fn(sites, n, d, |_, _, out| {
        for v in out.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let len = norm(out);
        let target = r * rng.random_range(0.0..1.0_f64);
        if len > 0.0 {
            out.iter_mut().for_each(|v| *v *= target / len);
        }
    })
}

fn criterion_1() -> Result<Outcome> {
    let inst = lq(0.0);
    let spec = audited(&inst, 8)?;
    let fp = FixedPointConfig::default();
    let sol = riccati_full(&spec, RICCATI_STEPS)?;
    let v = sol.lift(spec.start_time, &spec.initial_law);
    let noise = NoiseSource::new(101, false);
    let ens = Ensemble::sample(&spec.initial_law, spec.start_time, 10_000, &noise)?;
    let check = build_check_policy(
        &spec,
        &sol,
        &ens,
        10_000,
        &IntegratorConfig::new(50, noise.seed()),
        &fp,
        TimeConvention::default(),
    )?
    .estimate;
    let inputs = BoundInputs::from_spec(&spec, BoundKnobs::default())?;
    let err = estimate_errors_lq(&spec, &sol, spec.start_time, &ens, &fp, &inputs)?;
    let diff = check.value - v;
    let pass = diff.abs() <= 3.0 * check.std_err && err.e1.value.abs() <= 1e-10 && err.an.value.abs() <= 1e-10;
    Ok(Outcome::new(
        pass,
        format!(
            "V {v:.6}, V_dist {:.6} ± {:.1e} (z {:.2}), E1 {:.1e}, AN {:.1e}",
            check.value,
            check.std_err,
            diff / check.std_err,
            err.e1.value,
            err.an.value
        ),
    ))
}

fn criterion_2() -> Result<Outcome> {
    let inst = Instance {
        initial: CatalogTerm::new("dirac_init", &[0.0]),
        ..lq(0.0)
    };
    let spec = inst.build(2)?;
    let exact = std::f64::consts::LN_2 / 2.0;
    let sol = riccati_full(&spec, RICCATI_STEPS)?;
    let v = sol.lift(0.0, &spec.initial_law);
    let grid = grid_hjb_full(&spec, &GridConfig::default(), &FixedPointConfig::default())?;
    let vg = lift_value(ValueFunction::Grid(&grid), 0.0, &spec.initial_law)?;
    // Euler weak error is about 0.16 / steps; 400 steps keeps it well below σ.
    let steps = 400;
    let fb = RiccatiFeedback::new(&sol, 0.0, spec.horizon, steps);
    let ens = Ensemble::sample(&spec.initial_law, 0.0, 100_000, &NoiseSource::new(202, false))?;
    let mc = mc_cost(&spec, &PolicyHandle::FullInfo(&fb), &ens, &IntegratorConfig::new(steps, 203))?;
    let grid_rel = (vg - exact).abs() / exact;
    let z = (mc.value - exact) / mc.std_err;
    let pass = (v - exact).abs() <= 1e-6 && grid_rel <= 0.01 && z.abs() <= 3.0;
    Ok(Outcome::new(
        pass,
        format!(
            "Riccati {v:.8} vs ln2/2 {exact:.8}, grid {vg:.6} ({:.3}%), MC {:.6} ± {:.1e} (z {z:.2})",
            100.0 * grid_rel,
            mc.value,
            mc.std_err
        ),
    ))
}

fn criterion_3() -> Result<Outcome> {
    let cfg = RunConfig {
        n_list: vec![2, 4, 8, 16],
        seed: 303,
        instance: lq(0.5),
        ..RunConfig::default()
    };
    let recs = scan_records(&cfg);
    let mut pass = true;
    let mut parts = Vec::new();
    for r in &recs {
        if let Some(e) = &r.error {
            pass = false;
            parts.push(format!("N={} failed: {e}", r.n));
            continue;
        }
        for g in [r.gap, r.check_gap] {
            match g {
                Some(g) => pass &= g.value >= -3.0 * g.std_err,
                None => pass = false,
            }
        }
        parts.push(format!(
            "N={} gap {:.5} check {:.5}",
            r.n,
            r.gap.map_or(f64::NAN, |g| g.value),
            r.check_gap.map_or(f64::NAN, |g| g.value)
        ));
    }
    let slope = gap_slope(&recs);
    pass &= slope.is_some_and(|s| s <= -0.4);
    parts.push(format!("slope {:.3}", slope.unwrap_or(f64::NAN)));
    Ok(Outcome::new(pass, parts.join(", ")))
}

fn criterion_4() -> Result<Outcome> {
    let fp = FixedPointConfig::default();
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for (label, inst) in [(0_u64, lq(0.5)), (1, compliant())] {
        for n in [2, 4, 8] {
            let spec = audited(&inst, n)?;
            let nf = n as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(400 + 10 * label + n as u64);
            for _ in 0..1000 {
                let (p, pt) = (random_p(&mut rng, &spec), random_p(&mut rng, &spec));
                let a = solve_hat_a(&spec, &p, &fp)?.controls;
                let at = solve_hat_a(&spec, &pt, &fp)?.controls;
                let da: f64 = a.iter().zip(&at).map(|(x, y)| (x - y).powi(2)).sum();
                let dp: f64 = p.iter().zip(&pt).map(|(x, y)| (x - y).powi(2)).sum();
                let ratio = da / (nf * nf * dp);
                worst = worst.max(ratio);
                if ratio > 1.0 + 1e-8 {
                    violations += 1;
                }
            }
        }
    }
    Ok(Outcome::new(
        violations == 0,
        format!("{violations} violations in 6000 pairs, worst Σ|Δâ|²/(N²Σ|Δp|²) {worst:.6}"),
    ))
}

fn criterion_5() -> Result<Outcome> {
    let fp = FixedPointConfig::default();
    let mut violations = 0;
    let mut worst_margin = f64::NEG_INFINITY;
    for (label, inst) in [(0_u64, lq(0.5)), (1, compliant())] {
        for n in [2, 4, 8] {
            let spec = audited(&inst, n)?;
            let (c_g, df0) = (spec.terminal.c_g(), spec.f0.grad_sup());
            let mut rng = ChaCha8Rng::seed_from_u64(500 + 10 * label + n as u64);
            let noise = NoiseSource::new(501 + 10 * label + n as u64, false);
            for e in 0..100 {
                let ens = Ensemble::sample(&spec.initial_law, spec.start_time, 64, &noise.derive(e))?;
                let q = random_field(&mut rng, 64, n, spec.dim, c_g / n as f64);
                let a = solve_check_a(&spec, &q, &ens, &fp)?.controls;
                let max = (0..64)
                    .flat_map(|k| (0..n).map(move |i| (k, i)))
                    .map(|(k, i)| norm(a.get(k, i)))
                    .fold(0.0, f64::max);
                worst_margin = worst_margin.max(max - (c_g + df0));
                if max > c_g + df0 + 1e-8 {
                    violations += 1;
                }
            }
        }
    }
    Ok(Outcome::new(
        violations == 0,
        format!("{violations} violations in 600 ensembles, worst max|ǎ| - (C_G + ‖Df_0‖) {worst_margin:.4}"),
    ))
}

fn criterion_6() -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [2, 4, 8, 16] {
        let spec = lq(0.5).build(n)?;
        let sol = riccati_full(&spec, RICCATI_STEPS)?;
        let cap = spec.terminal.c_g() / n as f64;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in 0..50 {
            let t = spec.start_time + (spec.horizon - spec.start_time) * r as f64 / 49.0;
            let e = sol.p_at(t).symmetric_eigenvalues();
            lo = lo.min(e.min());
            hi = hi.max(e.max());
        }
        pass &= lo >= -1e-10 && hi <= cap + 1e-10;
        parts.push(format!("N={n} [{lo:.4}, {hi:.4}] vs C_G/N {cap:.4}"));
    }
    Ok(Outcome::new(pass, parts.join(", ")))
}

fn criterion_7() -> Result<Outcome> {
    let tight = FixedPointConfig {
        tolerance: 1e-14,
        ..FixedPointConfig::default()
    };
    let fp = FixedPointConfig::default();
    let mut worst_env = 0.0_f64;
    let mut worst_phi = f64::INFINITY;
    for (label, inst) in [(0_u64, lq(0.5)), (1, compliant())] {
        for n in [2, 4] {
            let spec = audited(&inst, n)?;
            let mut rng = ChaCha8Rng::seed_from_u64(700 + 10 * label + n as u64);
            for _ in 0..100 {
                let p = random_p(&mut rng, &spec);
                let g = envelope_grad_h(&spec, &p, &tight)?;
                let mut fd = vec![0.0; p.len()];
                central_grad(|x| hamiltonian_full(&spec, x, &tight).unwrap_or(f64::NAN), &p, &mut fd);
                let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
                let rel = norm(&diff) / norm(&g).max(1e-8);
                worst_env = if rel.is_nan() { f64::INFINITY } else { worst_env.max(rel) };
            }
            for _ in 0..1000 {
                let (y, yt) = (random_p(&mut rng, &spec), random_p(&mut rng, &spec));
                let g = phi_grad(&spec, &y, &fp)?;
                let gt = phi_grad(&spec, &yt, &fp)?;
                let dg: Vec<f64> = g.iter().zip(&gt).map(|(a, b)| a - b).collect();
                let dy: Vec<f64> = y.iter().zip(&yt).map(|(a, b)| a - b).collect();
                worst_phi = worst_phi.min(dot(&dg, &dy));
            }
        }
    }
    Ok(Outcome::new(
        worst_env <= 1e-4 && worst_phi >= -1e-9,
        format!("worst envelope error {worst_env:.2e}, min φ monotonicity {worst_phi:.3e}"),
    ))
}

fn criterion_8() -> Result<Outcome> {
    let fp = FixedPointConfig::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [2, 4, 8] {
        let spec = audited(&lq(0.5), n)?;
        let inputs = BoundInputs::from_spec(&spec, BoundKnobs::default())?;
        let m = 10_000;
        let ens = Ensemble::sample(&spec.initial_law, spec.start_time, m, &NoiseSource::new(800 + n as u64, false))?;

        let mut rng = ChaCha8Rng::seed_from_u64(810 + n as u64);
        let q = random_field(&mut rng, m, n, spec.dim, inputs.c_g / n as f64);
        let an = estimate_an(&spec, &q, &ens, &fp, inputs.c_g)?;
        let bound = inputs.an_bound();
        pass &= an.value <= bound + 3.0 * an.std_err;

        let sol = riccati_full(&spec, RICCATI_STEPS)?;
        let err = estimate_errors_lq(&spec, &sol, spec.start_time, &ens, &fp, &inputs)?;
        pass &= err.an.value <= err.an_bound + 3.0 * err.an.std_err;
        parts.push(format!(
            "N={n} random {:.4} ≤ {bound:.4}, Riccati {:.4} ≤ {:.4} (C_G {:.3})",
            an.value, err.an.value, err.an_bound, err.an_c_g
        ));
    }
    Ok(Outcome::new(pass, parts.join(", ")))
}

fn criterion_9() -> Result<Outcome> {
    let spec = lq(0.5).build(4)?;
    let fp = FixedPointConfig::default();
    let sol = riccati_full(&spec, RICCATI_STEPS)?;
    let inputs = BoundInputs::from_spec(&spec, BoundKnobs::default())?;
    let ens = Ensemble::sample(&spec.initial_law, spec.start_time, 2000, &NoiseSource::new(900, false))?;
    let cfg = IntegratorConfig::new(100, 901).record_every(1);
    let flow = simulate_check_flow(&spec, &sol, &ens, &cfg, &fp, TimeConvention::default(), None)?;
    let table = check_gronwall_eq(&sol, &flow.trajectory.snapshots, &inputs)?;
    let worst = table
        .rows
        .iter()
        .map(|r| (r.eq.value - r.rhs) / r.sigma.max(f64::MIN_POSITIVE))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Outcome::new(
        table.all_pass() && table.rows.len() == 101,
        format!("{} grid times, worst (Ê_Q - envelope)/σ {worst:.2}", table.rows.len()),
    ))
}

fn criterion_10() -> Result<Outcome> {
    let mut pass = true;
    for (c_p, c_g) in [(1.0, 1.0), (4.0, 0.0), (0.3, 2.5)] {
        pass &= compute_cp(c_p, c_g, 0.0)? == c_p;
    }
    let mut parts = Vec::new();
    for inst in [lq(0.5), compliant()] {
        let spec = inst.build(4)?;
        let inputs = BoundInputs::from_spec(&spec, BoundKnobs::default())?;
        let rhs = compute_kf_kg(&inputs, spec.horizon)?.rhs;
        pass &= rhs == 0.0;
    }
    let inst = Instance {
        terminal: CatalogTerm::new("huber_mean_terminal", &[1.0, 0.5]),
        ..lq(0.5)
    };
    for n in [4, 16, 64] {
        let spec = inst.build(n)?;
        let inputs = BoundInputs::from_spec(&spec, BoundKnobs::default())?;
        let k_g = inputs.k_g.expect("declared K_G");
        let (c_g, t) = (inputs.c_g, spec.horizon);
        let c_p_t = ((2.0 * c_g * t).exp() - 1.0) / (2.0 * c_g) + inputs.c_p * (2.0 * c_g * t).exp();
        let expected = k_g * (c_p_t / n as f64).sqrt();
        let root = inputs.kg_root()?;
        let report = bound_report(&inputs, spec.start_time)?;
        let hyp = report.m_over_sqrt_n.unwrap_or(f64::NAN);
        let ok = (root - expected).abs() <= 1e-12 * expected && (hyp - report.rhs_theorem).abs() <= 1e-12 * hyp;
        pass &= ok;
        parts.push(format!("N={n} root {root:.6} vs K_G√(C_p/N) {expected:.6}"));
    }
    Ok(Outcome::new(pass, format!("C_p(T=0) = c_p, RHS(T) = 0, {}", parts.join(", "))))
}

fn run_cli(args: &[&str], out: &Path) -> std::io::Result<std::process::Output> {
    Command::new(env!("CARGO_BIN_EXE_distgap"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
}

fn csv_files(dir: &Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            files.push((name, std::fs::read(&path)?));
        }
    }
    files.sort();
    Ok(files)
}

fn criterion_11() -> Result<Outcome> {
    let tmp = tempfile::tempdir().map_err(|e| distgap::Error::io("tempdir", e))?;
    let config = tmp.path().join("small.toml");
    std::fs::write(
        &config,
        "n_list = [2, 3]\npaths = 200\neval_paths = 400\nsteps = 20\n\n[probes]\naudit = 200\nhat_a_pairs = 50\n\
         envelope_points = 10\nphi_pairs = 50\ncheck_a_ensembles = 10\nensemble_paths = 16\nerror_paths = 200\n\
         lipschitz_pairs = 50\n",
    )
    .map_err(|e| distgap::Error::io(&config, e))?;
    let cfg = config.to_string_lossy().into_owned();
    let commands: [&[&str]; 5] = [
        &["gap-scan", "--seed", "11", "--config", &cfg],
        &["simulate", "--seed", "11", "--config", &cfg, "--policy", "check"],
        &["simulate", "--seed", "11", "--config", &cfg, "--policy", "riccati"],
        &["audit", "--seed", "11", "--config", &cfg],
        &["properties", "--seed", "11", "--config", &cfg],
    ];
    let mut pass = true;
    let mut compared = 0;
    for (k, args) in commands.iter().enumerate() {
        let dirs = [tmp.path().join(format!("{k}a")), tmp.path().join(format!("{k}b"))];
        let mut outputs = Vec::new();
        for d in &dirs {
            let out = run_cli(args, d).map_err(|e| distgap::Error::io(d, e))?;
            if !out.status.success() {
                return Ok(Outcome::new(
                    false,
                    format!("`{}` exited with {}: {}", args[0], out.status, String::from_utf8_lossy(&out.stderr)),
                ));
            }
            outputs.push(csv_files(d).map_err(|e| distgap::Error::io(d, e))?);
        }
        pass &= !outputs[0].is_empty() && outputs[0] == outputs[1];
        compared += outputs[0].len();
    }
    Ok(Outcome::new(
        pass,
        format!("{} subcommands rerun, {compared} CSV files byte-identical", commands.len()),
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("decoupled zero gap", criterion_1, 10.0),
        ("LQ cross-validation", criterion_2, 30.0),
        ("gap positivity and decay", criterion_3, 600.0),
        ("â Lipschitz", criterion_4, f64::INFINITY),
        ("ǎ bounded", criterion_5, f64::INFINITY),
        ("Riccati eigenvalue range", criterion_6, f64::INFINITY),
        ("envelope gradient and φ monotonicity", criterion_7, f64::INFINITY),
        ("A^N bound", criterion_8, f64::INFINITY),
        ("Gronwall envelope", criterion_9, f64::INFINITY),
        ("constant formulas", criterion_10, f64::INFINITY),
        ("determinism", criterion_11, f64::INFINITY),
    ];
    let mut failed = 0;
    for (k, (name, run, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        let in_time = secs < *budget;
        let pass = outcome.pass && in_time;
        if !pass {
            failed += 1;
        }
        let timing = if budget.is_finite() {
            format!("{secs:.1} s of {budget} s")
        } else {
            format!("{secs:.1} s")
        };
        println!(
            "criterion {:2} {}: {name}: {} ({timing})",
            k + 1,
            if pass { "PASS" } else { "FAIL" },
            outcome.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
