use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::gap_scan::{seed_for, MAX_GRID_DIMS};
use super::report::{cell, csv_with_notes, write_json};
use super::RunConfig;
use crate::bounds::{
    bound_report, check_gronwall_eq, estimate_diff_f, estimate_errors_lq, lq_fields, BoundInputs,
};
use crate::dynamics::{
    simulate, simulate_check_flow, Ensemble, IntegratorConfig, NoiseSource, PolicyHandle, ZeroPolicy,
};
use crate::error::{Error, Result};
use crate::hamiltonian::{
    envelope_grad_h, hamiltonian_dist, hamiltonian_full, phi_grad, solve_check_a, solve_hat_a, FixedPointConfig,
    SiteField,
};
use crate::model::{audit_assumptions, AuditConfig, AuditReport, ProblemSpec};
use crate::numerics::{central_grad, dot, linear_fit, norm, Estimate, BATCHES};
use crate::value::{
    build_check_policy, grid_hjb_full, lift_value, mc_cost, riccati_full, solve_dist_lq, GridCovector,
    ValueFunction, RICCATI_STEPS,
};

/// Relative slack of the Lipschitz checks for solver tolerance.
const LIP_REL: f64 = 1e-8;
/// Tolerance of the envelope-gradient comparison.
const ENVELOPE_REL: f64 = 1e-4;
/// Floor of the `φ`-monotonicity check.
const PHI_FLOOR: f64 = -1e-9;
/// Slack of the eigenvalue range of `P(t)`.
const EIGEN_SLACK: f64 = 1e-10;
/// Allowance for interpolation error in the grid Lipschitz check.
const GRID_LIP_REL: f64 = 0.02;
const GRID_LIP_ABS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Not applicable to this regime.
    Exempt,
    /// Logged, never fails.
    Info,
}

/// One property at one `N`. `worst` is the observed extreme of the checked
/// quantity and `bound` the value it is compared against.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyCheck {
    pub name: String,
    pub n: usize,
    pub status: CheckStatus,
    pub worst: f64,
    pub bound: f64,
    pub note: String,
    /// Exit code of the error that stopped the check, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_code: Option<i32>,
}

impl PropertyCheck {
    fn new(name: &str, n: usize, pass: bool, worst: f64, bound: f64, note: impl Into<String>) -> Self {
        PropertyCheck {
            name: name.to_string(),
            n,
            status: if pass { CheckStatus::Pass } else { CheckStatus::Fail },
            worst,
            bound,
            note: note.into(),
            error_code: None,
        }
    }

    /// `worst <= bound`.
    fn upper(name: &str, n: usize, worst: f64, bound: f64, note: impl Into<String>) -> Self {
        Self::new(name, n, worst <= bound, worst, bound, note)
    }

    /// `worst >= bound`.
    fn lower(name: &str, n: usize, worst: f64, bound: f64, note: impl Into<String>) -> Self {
        Self::new(name, n, worst >= bound, worst, bound, note)
    }

    fn with_status(name: &str, n: usize, status: CheckStatus, note: impl Into<String>) -> Self {
        PropertyCheck {
            name: name.to_string(),
            n,
            status,
            worst: 0.0,
            bound: 0.0,
            note: note.into(),
            error_code: None,
        }
    }

    fn errored(name: &str, n: usize, e: &Error) -> Self {
        PropertyCheck {
            error_code: Some(e.exit_code()),
            ..Self::with_status(name, n, CheckStatus::Fail, e.to_string())
        }
    }

    pub fn failed(&self) -> bool {
        self.status == CheckStatus::Fail
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditRecord {
    pub n: usize,
    pub report: AuditReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct PropertySummary {
    pub audits: Vec<AuditRecord>,
    /// True when an audit failed and no property was run.
    pub aborted: bool,
    pub checks: Vec<PropertyCheck>,
}

impl PropertySummary {
    pub fn passed(&self) -> bool {
        !self.aborted && self.checks.iter().all(|c| !c.failed())
    }

    /// 0 when everything passed, 3 when a failure came from solver
    /// non-convergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else if self.checks.iter().any(|c| c.error_code == Some(3)) {
            3
        } else {
            1
        }
    }
}

/// Writes `properties.csv` and `properties.json` into `dir`.
pub fn write_properties(summary: &PropertySummary, dir: &Path) -> Result<Vec<PathBuf>> {
    let path = dir.join("properties.csv");
    let mut w = csv_with_notes(
        &path,
        &["worst = observed extreme of the checked quantity; bound = the value it is compared against"],
    )?;
    w.write_record(["N", "name", "status", "worst", "bound", "note"])?;
    for c in &summary.checks {
        let status = match c.status {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "fail",
            CheckStatus::Exempt => "exempt",
            CheckStatus::Info => "info",
        };
        w.write_record([
            c.n.to_string(),
            c.name.clone(),
            status.to_string(),
            cell(Some(c.worst).filter(|v| v.is_finite())),
            cell(Some(c.bound).filter(|v| v.is_finite())),
            c.note.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let json = dir.join("properties.json");
    write_json(summary, &json)?;
    Ok(vec![path, json])
}

/// Stream labels for the individual checks.
mod stream {
    pub const AUDIT: u64 = 1;
    pub const HAT_A: u64 = 2;
    pub const CHECK_A: u64 = 3;
    pub const ENVELOPE: u64 = 4;
    pub const PHI: u64 = 5;
    pub const DIRAC: u64 = 6;
    pub const ERRORS: u64 = 7;
    pub const ORDERING: u64 = 8;
    pub const LIP_V: u64 = 9;
    pub const MC: u64 = 10;
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    spec: ProblemSpec,
    n: usize,
    noise: NoiseSource,
    c_g: f64,
    df0: f64,
}

impl Ctx<'_> {
    fn rng(&self, label: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.noise.derive(label).seed())
    }

    fn seed(&self, label: u64) -> u64 {
        self.noise.derive(label).seed()
    }

    fn fp(&self) -> &FixedPointConfig {
        &self.cfg.fixed_point
    }

    /// Uniform covector in `[-s, s]^{Nd}` with `s = 2 C_G / N` (at least 1/N).
    fn random_p(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = (2.0 * self.c_g).max(1.0) / self.n as f64;
        (0..self.spec.state_len()).map(|_| rng.random_range(-s..s)).collect()
    }

    fn is_lq(&self) -> bool {
        self.spec.lq_form().is_some()
    }
}

/// Builds the problem at a given `N`.
pub type SpecBuilder<'a> = dyn Fn(usize) -> Result<ProblemSpec> + Sync + 'a;

/// Audits the configured instance at every `N`, then runs every property
/// check. Stops before the properties when any audit fails.
pub fn run_property_suite(cfg: &RunConfig) -> Result<PropertySummary> {
    cfg.validate()?;
    run_property_suite_with(cfg, &|n| cfg.instance.build(n))
}

/// [`run_property_suite`] on instances from `build` instead of the catalog.
pub fn run_property_suite_with(cfg: &RunConfig, build: &SpecBuilder<'_>) -> Result<PropertySummary> {
    let mut audits = Vec::new();
    for &n in &cfg.n_list {
        let spec = build(n)?;
        let seed = NoiseSource::new(seed_for(cfg.seed, n), false).derive(stream::AUDIT).seed();
        let report = audit_assumptions(&spec, &AuditConfig::new(cfg.probes.audit, seed))?;
        for f in report.failures() {
            log::error!("N={n}: audit item `{}` failed: {}", f.name, f.note);
        }
        audits.push(AuditRecord { n, report });
    }
    if audits.iter().any(|a| !a.report.passed()) {
        return Ok(PropertySummary {
            audits,
            aborted: true,
            checks: Vec::new(),
        });
    }
    let per_n: Vec<Vec<PropertyCheck>> = if cfg.parallel {
        cfg.n_list.par_iter().map(|&n| checks_for(cfg, build(n)?, n)).collect::<Result<_>>()?
    } else {
        cfg.n_list.iter().map(|&n| checks_for(cfg, build(n)?, n)).collect::<Result<_>>()?
    };
    let mut checks: Vec<PropertyCheck> = per_n.into_iter().flatten().collect();
    checks.push(mc_rate(cfg, build(cfg.n_list[0])?)?);
    for c in checks.iter().filter(|c| c.failed()) {
        log::error!("N={}: property `{}` failed: worst {} vs {} ({})", c.n, c.name, c.worst, c.bound, c.note);
    }
    Ok(PropertySummary {
        audits,
        aborted: false,
        checks,
    })
}

type Check = fn(&Ctx<'_>) -> Result<Vec<PropertyCheck>>;

const CHECKS: [(&str, Check); 10] = [
    ("hat_a_lipschitz", hat_a_lipschitz),
    ("check_a", check_a_properties),
    ("envelope_gradient", envelope_gradient),
    ("phi_monotone", phi_monotone),
    ("dirac_consistency", dirac_consistency),
    ("riccati_eigen_range", riccati_eigen_range),
    ("value_ordering", value_ordering),
    ("error_functionals", error_functionals),
    ("bound_purity", bound_purity),
    ("simulation", simulation_properties),
];

fn checks_for(cfg: &RunConfig, spec: ProblemSpec, n: usize) -> Result<Vec<PropertyCheck>> {
    let ctx = Ctx {
        cfg,
        n,
        c_g: spec.terminal.c_g(),
        df0: spec.f0.grad_sup(),
        noise: NoiseSource::new(seed_for(cfg.seed, n), false),
        spec,
    };
    let mut out = Vec::new();
    for (name, check) in CHECKS {
        match check(&ctx) {
            Ok(c) => out.extend(c),
            Err(e) => out.push(PropertyCheck::errored(name, n, &e)),
        }
    }
    Ok(out)
}

fn hat_a_lipschitz(ctx: &Ctx<'_>) -> Result<Vec<PropertyCheck>> {
    let nf = ctx.n as f64;
    let mut rng = ctx.rng(stream::HAT_A);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..ctx.cfg.probes.hat_a_pairs)
        .map(|_| (ctx.random_p(&mut rng), ctx.random_p(&mut rng)))
        .collect();
    let results = pairs
        .par_iter()
        .map(|(p, pt)| {
            let a = solve_hat_a(&ctx.spec, p, ctx.fp())?;
            let at = solve_hat_a(&ctx.spec, pt, ctx.fp())?;
            let da: f64 = a.controls.iter().zip(&at.controls).map(|(x, y)| (x - y).powi(2)).sum();
            let dp: f64 = p.iter().zip(pt).map(|(x, y)| (x - y).powi(2)).sum();
            Ok((da / (nf * nf * dp) - 1.0, a.report.monotone && at.report.monotone))
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = results.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let non_monotone = results.iter().filter(|r| !r.1).count();
    let mut diag = PropertyCheck::with_status(
        "fixed_point_monotone",
        ctx.n,
        CheckStatus::Info,
        format!("{non_monotone} of {} solves had a residual increase", 2 * results.len()),
    );
    diag.worst = non_monotone as f64;
    Ok(vec![
        PropertyCheck::upper(
            "hat_a_lipschitz",
            ctx.n,
            worst,
            LIP_REL,
            "max over pairs of Σ|Δâ|² / (N² Σ|Δp|²) - 1",
        ),
        diag,
    ])
}

/// Random covector field with every block in the closed ball of radius `r`.
fn random_field(rng: &mut ChaCha8Rng, sites: usize, n: usize, d: usize, r: f64) -> SiteField {
    SiteField::from_fn(sites, n, d, |_, _, out| {
        for v in out.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let len = norm(out);
        let target = r * rng.random_range(0.0..1.0_f64).powf(1.0 / d as f64);
        if len > 0.0 {
            out.iter_mut().for_each(|v| *v *= target / len);
        }
    })
}

fn check_a_properties(ctx: &Ctx<'_>) -> Result<Vec<PropertyCheck>> {
    let (n, d) = (ctx.spec.n_agents, ctx.spec.dim);
    let nf = n as f64;
    let m = ctx.cfg.probes.ensemble_paths;
    let mut rng = ctx.rng(stream::CHECK_A);
    let law_noise = ctx.noise.derive(stream::CHECK_A);
    let mut worst_bound = 0.0_f64;
    let mut worst_lip = f64::NEG_INFINITY;
    for e in 0..ctx.cfg.probes.check_a_ensembles {
        let ens = Ensemble::sample(&ctx.spec.initial_law, ctx.spec.start_time, m, &law_noise.derive(e as u64))?;
        let q = random_field(&mut rng, m, n, d, ctx.c_g / nf);
        let a = solve_check_a(&ctx.spec, &q, &ens, ctx.fp())?.controls;
        for k in 0..m {
            for i in 0..n {
                worst_bound = worst_bound.max(norm(a.get(k, i)));
                for l in (k + 1)..m {
                    let dq: f64 = q.get(k, i).iter().zip(q.get(l, i)).map(|(x, y)| (x - y).powi(2)).sum();
                    let da: f64 = a.get(k, i).iter().zip(a.get(l, i)).map(|(x, y)| (x - y).powi(2)).sum();
                    let excess = da.sqrt() - nf * dq.sqrt() * (1.0 + LIP_REL);
                    worst_lip = worst_lip.max(excess);
                }
            }
        }
    }
    let lip_abs = 10.0 * nf * ctx.fp().tolerance;
    Ok(vec![
        PropertyCheck::upper(
            "check_a_bounded",
            ctx.n,
            worst_bound,
            ctx.c_g + ctx.df0 + 1e-8,
            "max site |ǎ^i| with |q^i| <= C_G/N; bound C_G + ‖Df_0‖ + 1e-8",
        ),
        PropertyCheck::upper(
            "check_a_lipschitz",
            ctx.n,
            worst_lip,
            lip_abs,
            "max over site pairs of |Δǎ^i| - N|Δq^i|",
        ),
    ])
}

fn envelope_gradient(ctx: &Ctx<'_>) -> Result<Vec<PropertyCheck>> {
    let tight = FixedPointConfig {
        tolerance: 1e-14,
        ..ctx.fp().clone()
    };
    let mut rng = ctx.rng(stream::ENVELOPE);
    let points: Vec<Vec<f64>> = (0..ctx.cfg.probes.envelope_points)
        .map(|_| ctx.random_p(&mut rng))
        .collect();
    let errs = points
        .par_iter()
        .map(|p| {
            let g = envelope_grad_h(&ctx.spec, p, &tight)?;
            let mut fd = vec![0.0; p.len()];
            central_grad(|x| hamiltonian_full(&ctx.spec, x, &tight).unwrap_or(f64::NAN), p, &mut fd);
            let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
            Ok(norm(&diff) / norm(&g).max(1e-8))
        })
        .collect::<Result<Vec<f64>>>()?;
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    Ok(vec![PropertyCheck::upper(
        "envelope_gradient",
        ctx.n,
        if worst.is_nan() { f64::INFINITY } else { worst },
        ENVELOPE_REL,
        "relative distance between -â(p) and the central-difference gradient of H^N",
    )])
}

fn phi_monotone(ctx: &Ctx<'_>) -> Result<Vec<PropertyCheck>> {
    let mut rng = ctx.rng(stream::PHI);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..ctx.cfg.probes.phi_pairs)
        .map(|_| (ctx.random_p(&mut rng), ctx.random_p(&mut rng)))
        .collect();
    let vals = pairs
        .par_iter()
        .map(|(y, yt)| {
            let g = phi_grad(&ctx.spec, y, ctx.fp())?;
            let gt = phi_grad(&ctx.spec, yt, ctx.fp())?;
            let dg: Vec<f64> = g.iter().zip(&gt).map(|(a, b)| a - b).collect();
            let dy: Vec<f64> = y.iter().zip(yt).map(|(a, b)| a - b).collect();
            Ok(dot(&dg, &dy))
        })
        .collect::<Result<Vec<f64>>>()?;
    let worst = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(vec![PropertyCheck::lower(
        "phi_monotone",
        ctx.n,
        worst,
        PHI_FLOOR,
        "min over pairs of (∇φ(y) - ∇φ(ỹ))·(y - ỹ)",
    )])
}

fn dirac_consistency(ctx: &Ctx<'_>) -> Result<Vec<PropertyCheck>> {
    let (n, d) = (ctx.spec.n_agents, ctx.spec.dim);
    let mut rng = ctx.rng(stream::DIRAC);
    let mut worst = 0.0_f64;
    for _ in 0..ctx.cfg.probes.check_a_ensembles {
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = ctx.random_p(&mut rng);
        let ens = Ensemble::from_point(ctx.spec.start_time, &x, 1, n, d)?;
        let q = SiteField::from_values(1, n, d, p.clone())?;
        let hd = hamiltonian_dist(&ctx.spec, &q, &ens, ctx.fp())?;
        let hf = hamiltonian_full(&ctx.spec, &p, ctx.fp())?;
        worst = worst.max((hd - hf).abs() / hf.abs().max(1.0));
    }
    Ok(vec![PropertyCheck::upper(
        "dirac_consistency",
        ctx.n,
        worst,
        1e-8,
        "relative |ℋ^N - H^N| with one site per agent",
    )])
}

fn riccati_eigen_range(ctx: &Ctx<'_>) -> Result<Vec<PropertyCheck>> {
    if !ctx.is_lq() {
        return Ok(vec![PropertyCheck::with_status(
            "riccati_eigen_range",
            ctx.n,
            CheckStatus::Exempt,
            "not an LQ instance",
        )]);
    }
    let sol = riccati_full(&ctx.spec, RICCATI_STEPS)?;
    let k = ctx.cfg.probes.riccati_times;
    let (t0, t1) = (ctx.spec.start_time, ctx.spec.horizon);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in 0..k {
        let t = if k == 1 { t0 } else { t0 + (t1 - t0) * r as f64 / (k - 1) as f64 };
        let e = sol.p_at(t).symmetric_eigenvalues();
        lo = lo.min(e.min());
        hi = hi.max(e.max());
    }
    let cap = ctx.c_g / ctx.n as f64;
    Ok(vec![
        PropertyCheck::lower("riccati_eigen_min", ctx.n, lo, -EIGEN_SLACK, "smallest eigenvalue of P(t)"),
        PropertyCheck::upper(
            "riccati_eigen_max",
            ctx.n,
            hi,
            cap + EIGEN_SLACK,
            "largest eigenvalue of P(t) against C_G/N",
        ),
    ])
}

fn value_ordering(ctx: &Ctx<'_>) -> Result<Vec<PropertyCheck>> {
    let spec = &ctx.spec;
    let cfg = ctx.cfg;
    let noise = ctx.noise.derive(stream::ORDERING);
    let ens0 = Ensemble::sample(&spec.initial_law, spec.start_time, cfg.eval_paths, &noise)?;
    let zero = mc_cost(spec, &PolicyHandle::Distributed(&ZeroPolicy), &ens0, &IntegratorConfig::new(cfg.steps, noise.seed()))?;
    let mut out = Vec::new();
    if ctx.is_lq() {
        let sol = riccati_full(spec, RICCATI_STEPS)?;
        let v = sol.lift(spec.start_time, &spec.initial_law);
        let affine = solve_dist_lq(spec, &cfg.dist_lq)?.value.value;
        out.push(PropertyCheck::upper(
            "ordering_full_affine",
            ctx.n,
            v - affine,
            1e-9 * v.abs().max(1.0),
            "V_full - V_dist_affine",
        ));
        out.push(PropertyCheck::upper(
            "ordering_affine_zero",
            ctx.n,
            affine - zero.value,
            3.0 * zero.std_err,
            "V_dist_affine - cost of the zero policy, against 3σ",
        ));
        out.push(PropertyCheck::with_status(
            "lipschitz_v",
            ctx.n,
            CheckStatus::Exempt,
            "quadratic terminal cost has no global Lipschitz constant",
        ));
    } else if spec.state_len() <= MAX_GRID_DIMS {
        let grid = grid_hjb_full(spec, &cfg.grid, ctx.fp())?;
        let v = lift_value(ValueFunction::Grid(&grid), spec.start_time, &spec.initial_law)?;
        let source = GridCovector {
            grid: &grid,
            inner: cfg.fixed_point.inner_samples.unwrap_or(cfg.paths),
        };
        let flow_noise = noise.derive(1);
        let flow0 = Ensemble::sample(&spec.initial_law, spec.start_time, cfg.paths, &flow_noise)?;
        let check = build_check_policy(
            spec,
            &source,
            &flow0,
            cfg.eval_paths,
            &IntegratorConfig::new(cfg.steps, flow_noise.seed()),
            ctx.fp(),
            cfg.time_convention,
        )?
        .estimate;
        out.push(PropertyCheck::upper(
            "ordering_full_check",
            ctx.n,
            v - check.value,
            3.0 * check.std_err,
            "V_full - V_dist_check, against 3σ",
        ));
        out.push(PropertyCheck::upper(
            "ordering_full_zero",
            ctx.n,
            v - zero.value,
            3.0 * zero.std_err,
            "V_full - cost of the zero policy, against 3σ",
        ));
        out.push(lipschitz_v(ctx, &grid)?);
    } else {
        out.push(PropertyCheck::with_status(
            "value_ordering",
            ctx.n,
            CheckStatus::Exempt,
            format!("no full-information solver for N·d > {MAX_GRID_DIMS}"),
        ));
    }
    Ok(out)
}

/// `|V(t, y) - V(t, x)| <= (C_G/N) Σ|y_i - x_i|` on the middle half of the
/// grid box at every stored time.
fn lipschitz_v(ctx: &Ctx<'_>, grid: &crate::value::GridSolution) -> Result<PropertyCheck> {
    let mut rng = ctx.rng(stream::LIP_V);
    let lo = grid.lower.clone();
    let hi = grid.upper();
    let dims = grid.dims();
    let d = ctx.spec.dim;
    let cap = ctx.c_g / ctx.n as f64;
    let mut worst = f64::NEG_INFINITY;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dims)
            .map(|k| {
                let (c, w) = (0.5 * (lo[k] + hi[k]), 0.25 * (hi[k] - lo[k]));
                rng.random_range(c - w..c + w)
            })
            .collect()
    };
    for _ in 0..ctx.cfg.probes.lipschitz_pairs {
        let (x, y) = (draw(&mut rng), draw(&mut rng));
        let l1: f64 = (0..ctx.n)
            .map(|i| {
                let diff: Vec<f64> = (0..d).map(|c| y[i * d + c] - x[i * d + c]).collect();
                norm(&diff)
            })
            .sum();
        for &t in &grid.times {
            let dv = (grid.value(t, &y)? - grid.value(t, &x)?).abs();
            worst = worst.max(dv - cap * l1 * (1.0 + GRID_LIP_REL));
        }
    }
    Ok(PropertyCheck::upper(
        "lipschitz_v",
        ctx.n,
        worst,
        GRID_LIP_ABS,
        "max of |ΔV| - (C_G/N)Σ|Δx_i|, with a 2% interpolation allowance",
    ))
}

fn error_functionals(ctx: &Ctx<'_>) -> Result<Vec<PropertyCheck>> {
    if !ctx.is_lq() {
        return Ok(vec![PropertyCheck::with_status(
            "error_functionals",
            ctx.n,
            CheckStatus::Exempt,
            "analytic gradients are only available for LQ instances",
        )]);
    }
    let spec = &ctx.spec;
    let cfg = ctx.cfg;
    let sol = riccati_full(spec, RICCATI_STEPS)?;
    let inputs = BoundInputs::from_spec(spec, cfg.bounds)?;
    let noise = ctx.noise.derive(stream::ERRORS);
    let ens = Ensemble::sample(&spec.initial_law, spec.start_time, cfg.probes.error_paths, &noise)?;
    let est = estimate_errors_lq(spec, &sol, spec.start_time, &ens, ctx.fp(), &inputs)?;
    let k1 = crate::bounds::compute_k1(&inputs);
    let n = ctx.n;
    let mut out = vec![
        PropertyCheck::upper("e1_nonpositive", n, est.e1.value, 3.0 * est.e1.std_err, "Ê_1 against 3σ"),
        PropertyCheck::upper(
            "e1_k1",
            n,
            est.e1.value.abs(),
            k1 + 3.0 * est.e1.std_err,
            "|Ê_1| against K_1 + 3σ",
        ),
        PropertyCheck::upper(
            "an_bound",
            n,
            est.an.value,
            est.an_bound + 3.0 * est.an.std_err,
            format!("Â^N against its bound + 3σ at C_G = {}", est.an_c_g),
        ),
        PropertyCheck::lower("eq_nonnegative", n, est.eq.value, -3.0 * est.eq.std_err, "Ê_Q against -3σ"),
        PropertyCheck::lower(
            "e2_lower",
            n,
            est.e2_band.e2.value,
            est.e2_band.lower - 3.0 * est.e2_band.e2.std_err,
            "Ê_2 against -K_1 - 3σ",
        ),
        PropertyCheck::upper(
            "e2_upper",
            n,
            est.e2_band.e2.value,
            est.e2_band.upper + 3.0 * est.e2_band.e2.std_err,
            "Ê_2 against Ê_Q + 2(C_G + ‖Df_0‖)√Ê_Q + 3σ",
        ),
    ];

    let (_, q) = lq_fields(&sol, spec.start_time, &ens)?;
    let controls = solve_check_a(spec, &q, &ens, ctx.fp())?.controls;
    let diff_inputs = BoundInputs::with_c_g(spec, cfg.bounds, est.an_c_g)?;
    let diffs = estimate_diff_f(spec, &controls, ctx.fp().inner_samples);
    let worst = diffs
        .iter()
        .enumerate()
        .map(|(i, e)| e.value - diff_inputs.diff_f_bound(i) - 3.0 * e.std_err)
        .fold(f64::NEG_INFINITY, f64::max);
    out.push(PropertyCheck::upper(
        "diff_f_bound",
        n,
        worst,
        0.0,
        "max over agents of the conditional variance of ∂_i f^N minus its bound and 3σ",
    ));

    let stride = (cfg.steps / 20).max(1);
    let flow_cfg = IntegratorConfig::new(cfg.steps, noise.seed()).record_every(stride);
    let flow = simulate_check_flow(spec, &sol, &ens, &flow_cfg, ctx.fp(), cfg.time_convention, None)?;
    let table = check_gronwall_eq(&sol, &flow.trajectory.snapshots, &inputs)?;
    let worst = table
        .rows
        .iter()
        .map(|r| r.eq.value - r.rhs - 3.0 * r.sigma)
        .fold(f64::NEG_INFINITY, f64::max);
    out.push(PropertyCheck::upper(
        "gronwall",
        n,
        worst,
        0.0,
        format!("max over {} flow times of Ê_Q(s) - envelope - 3σ", table.rows.len()),
    ));
    Ok(out)
}

fn bound_purity(ctx: &Ctx<'_>) -> Result<Vec<PropertyCheck>> {
    let inputs = match BoundInputs::from_spec(&ctx.spec, ctx.cfg.bounds) {
        Ok(i) => i,
        Err(e) => {
            return Ok(vec![PropertyCheck::with_status(
                "bound_purity",
                ctx.n,
                CheckStatus::Exempt,
                e.to_string(),
            )])
        }
    };
    let a = bound_report(&inputs, ctx.spec.start_time)?;
    let b = bound_report(&inputs.clone(), ctx.spec.start_time)?;
    let nonneg = [a.k1, a.k_f, a.k_g_t, a.rhs_theorem, a.c_p_propagated]
        .iter()
        .all(|v| *v >= 0.0 && v.is_finite());
    Ok(vec![PropertyCheck::new(
        "bound_purity",
        ctx.n,
        a == b && nonneg,
        0.0,
        0.0,
        "repeated constant evaluation is identical and nonnegative",
    )])
}

/// Determinism, antithetic symmetry and the weak error of the zero policy.
fn simulation_properties(ctx: &Ctx<'_>) -> Result<Vec<PropertyCheck>> {
    let spec = &ctx.spec;
    let (n, d) = (spec.n_agents, spec.dim);
    let steps = ctx.cfg.steps;
    let paths = ctx.cfg.eval_paths.max(2) & !1;
    let seed = ctx.seed(stream::MC);
    let zero = PolicyHandle::Distributed(&ZeroPolicy);
    let mut rng = ctx.rng(stream::MC);
    let x0: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ens0 = Ensemble::from_point(spec.start_time, &x0, paths, n, d)?;

    let run = |antithetic: bool| simulate(spec, &zero, &ens0, &IntegratorConfig::new(steps, seed).antithetic(antithetic));
    let a = run(false)?;
    let b = run(false)?;
    let identical = a.terminal().states.values.iter().zip(&b.terminal().states.values).all(|(x, y)| x.to_bits() == y.to_bits());

    let anti = run(true)?;
    let means = anti.terminal().states.column_means();
    let drift = means.iter().zip(&x0).map(|(m, x)| (m - x).abs()).fold(0.0, f64::max);

    let tau = spec.horizon - spec.start_time;
    let exact = dot(&x0, &x0) + (n * d) as f64 * tau;
    let samples: Vec<f64> = (0..paths).map(|k| dot(a.terminal().row(k), a.terminal().row(k))).collect();
    let est = Estimate::batch_means(&samples, BATCHES);
    Ok(vec![
        PropertyCheck::new(
            "determinism",
            ctx.n,
            identical,
            0.0,
            0.0,
            "two zero-policy runs with one seed give identical bits",
        ),
        PropertyCheck::upper(
            "antithetic_mean",
            ctx.n,
            drift,
            1e-12 * (1.0 + x0.iter().map(|v| v.abs()).fold(0.0, f64::max)),
            "max |mean X_T - x_0| under antithetic pairing",
        ),
        PropertyCheck::upper(
            "weak_error",
            ctx.n,
            (est.value - exact).abs(),
            3.0 * est.std_err,
            "|Ê|X_T|² - (|x_0|² + N d (T - t))| against 3σ",
        ),
    ])
}

/// Standard-error scaling of `mc_cost` across 10³, 10⁴ and 10⁵ paths at the
/// smallest `N`.
fn mc_rate(cfg: &RunConfig, spec: ProblemSpec) -> Result<PropertyCheck> {
    let n = spec.n_agents;
    let noise = NoiseSource::new(seed_for(cfg.seed, n), false).derive(stream::MC).derive(1);
    let steps = cfg.steps.min(20);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for paths in [1_000usize, 10_000, 100_000] {
        let ens0 = Ensemble::sample(&spec.initial_law, spec.start_time, paths, &noise)?;
        let v = mc_cost(&spec, &PolicyHandle::Distributed(&ZeroPolicy), &ens0, &IntegratorConfig::new(steps, noise.seed()))?;
        x.push((paths as f64).ln());
        y.push(v.std_err.ln());
    }
    let slope = linear_fit(&x, &y).map(|(s, _)| s).unwrap_or(f64::NAN);
    Ok(PropertyCheck::new(
        "mc_rate",
        n,
        (slope + 0.5).abs() <= 0.15,
        slope,
        -0.5,
        "slope of ln(std_err) on ln(paths), within 0.15 of -1/2",
    ))
}
