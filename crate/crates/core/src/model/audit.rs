//! Sampling-based audit of the standing assumptions on `f^N`, `g^N` and the
//! initial law.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{ProblemSpec, TerminalKind};
use crate::error::{Error, Result};
use crate::numerics::{central_grad, norm, operator_norm};

/// Relative slack allowed over a declared constant.
const REL_TOL: f64 = 1e-6;
/// Absolute slack for checks computed from analytic handles.
const ABS_TOL: f64 = 1e-9;
/// Absolute slack (scaled by the declared constant) for checks that rely on
/// finite differences.
const FD_TOL: f64 = 1e-6;
/// Radial grid resolution for the profile checks.
const RADIAL_GRID: usize = 200;

#[derive(Clone, Debug)]
pub struct AuditConfig {
    pub n_probes: usize,
    pub seed: u64,
    /// Probes are drawn uniformly from `[-w, w]^dim`.
    pub box_half_width: f64,
}

impl AuditConfig {
    pub fn new(n_probes: usize, seed: u64) -> Self {
        AuditConfig {
            n_probes,
            seed,
            box_half_width: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditStatus {
    Pass,
    Fail,
    /// Not applicable in the LQ regime (quadratic `g^N` has an unbounded
    /// gradient by construction).
    Exempt,
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditItem {
    pub name: String,
    pub status: AuditStatus,
    /// Worst observed value of the audited quantity.
    pub worst: f64,
    /// Declared bound it is compared against.
    pub declared: f64,
    pub note: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditReport {
    pub items: Vec<AuditItem>,
    pub n_probes: usize,
    pub box_half_width: f64,
    pub lq_regime: bool,
    /// `N · max_i |D_{x_i} g^N|` over the probes.
    pub measured_c_g_gradient: f64,
    /// `N · max` Rayleigh quotient of `D²g^N` over the probes.
    pub measured_c_g_hessian: f64,
    pub poincare_constant: Option<f64>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.status != AuditStatus::Fail)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AuditItem> {
        self.items.iter().filter(|i| i.status == AuditStatus::Fail)
    }

    pub fn item(&self, name: &str) -> Option<&AuditItem> {
        self.items.iter().find(|i| i.name == name)
    }
}

fn upper_check(name: &str, worst: f64, declared: f64, abs: f64, note: impl Into<String>) -> AuditItem {
    let ok = worst <= declared * (1.0 + REL_TOL) + abs;
    AuditItem {
        name: name.to_string(),
        status: if ok { AuditStatus::Pass } else { AuditStatus::Fail },
        worst,
        declared,
        note: note.into(),
    }
}

fn lower_check(name: &str, worst: f64, abs: f64, note: impl Into<String>) -> AuditItem {
    AuditItem {
        name: name.to_string(),
        status: if worst >= -abs { AuditStatus::Pass } else { AuditStatus::Fail },
        worst,
        declared: 0.0,
        note: note.into(),
    }
}

fn finite_or(handle: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(format!("handle `{handle}` is not evaluable on the probe box")))
    }
}

/// Per-probe measurements, reduced across probes afterwards.
#[derive(Clone, Copy, Default)]
struct ProbeStats {
    f0_grad: f64,
    f0_hess: f64,
    f0_min_eig: f64,
    f0_grad_mismatch: f64,
    g_grad: f64,
    g_rayleigh_max: f64,
    g_rayleigh_min: f64,
    g_cross_excess: f64,
    g_grad_mismatch: f64,
    h_grad_mismatch: f64,
    h_asymmetry: f64,
    fn_deficit: f64,
}

impl ProbeStats {
    fn merge(self, o: ProbeStats) -> ProbeStats {
        ProbeStats {
            f0_grad: self.f0_grad.max(o.f0_grad),
            f0_hess: self.f0_hess.max(o.f0_hess),
            f0_min_eig: self.f0_min_eig.min(o.f0_min_eig),
            f0_grad_mismatch: self.f0_grad_mismatch.max(o.f0_grad_mismatch),
            g_grad: self.g_grad.max(o.g_grad),
            g_rayleigh_max: self.g_rayleigh_max.max(o.g_rayleigh_max),
            g_rayleigh_min: self.g_rayleigh_min.min(o.g_rayleigh_min),
            g_cross_excess: self.g_cross_excess.max(o.g_cross_excess),
            g_grad_mismatch: self.g_grad_mismatch.max(o.g_grad_mismatch),
            h_grad_mismatch: self.h_grad_mismatch.max(o.h_grad_mismatch),
            h_asymmetry: self.h_asymmetry.max(o.h_asymmetry),
            fn_deficit: self.fn_deficit.max(o.fn_deficit),
        }
    }
}

fn rel_mismatch(an: &[f64], fd: &[f64]) -> f64 {
    an.iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

fn probe(spec: &ProblemSpec, cfg: &AuditConfig, k: usize) -> Result<ProbeStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (n, d) = (spec.n_agents, spec.dim);
    let nd = n * d;
    let w = cfg.box_half_width;
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-w..=w)).collect() };
    let x = draw(nd);
    let y = draw(nd);
    let a = draw(nd);
    let z = draw(d);
    let mut s = ProbeStats {
        f0_min_eig: f64::INFINITY,
        g_rayleigh_min: f64::INFINITY,
        ..Default::default()
    };

    // f_0
    let mut g0 = vec![0.0; d];
    let mut fd0 = vec![0.0; d];
    finite_or("f0", spec.f0.value(&z))?;
    spec.f0.grad(&z, &mut g0);
    s.f0_grad = finite_or("f0 gradient", norm(&g0))?;
    if spec.f0.has_analytic_grad() {
        central_grad(|v| spec.f0.value(v), &z, &mut fd0);
        s.f0_grad_mismatch = rel_mismatch(&g0, &fd0);
    }
    let h0 = spec.f0.hessian(&z);
    let hm = nalgebra::DMatrix::from_row_slice(d, d, &h0);
    let eig = hm.symmetric_eigenvalues();
    s.f0_min_eig = finite_or("f0 hessian", eig.min())?;
    s.f0_hess = eig.iter().fold(0.0_f64, |m, e| m.max(e.abs()));

    // pairwise profiles on a random difference vector
    for i in 0..n {
        for j in (i + 1)..n {
            let h = spec.pairwise.get(i, j);
            let diff = &a[i * d..(i + 1) * d];
            let val = finite_or("pairwise", h.eval(diff))?;
            let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
            s.h_asymmetry = s.h_asymmetry.max((val - h.eval(&neg)).abs());
            let mut an = vec![0.0; d];
            let mut fd = vec![0.0; d];
            h.grad(diff, &mut an);
            central_grad(|v| h.eval(v), diff, &mut fd);
            s.h_grad_mismatch = s.h_grad_mismatch.max(rel_mismatch(&an, &fd));
        }
    }

    // f^N(a) >= f_0(mean a)
    let mut mean = vec![0.0; d];
    for ai in a.chunks(d) {
        for (m, v) in mean.iter_mut().zip(ai) {
            *m += v / n as f64;
        }
    }
    let fn_val = crate::hamiltonian::eval_fn(spec, &a);
    s.fn_deficit = (spec.f0.value(&mean) - fn_val).max(0.0);

    // g^N
    let t = &spec.terminal;
    finite_or("terminal", t.value(&x))?;
    let mut gg = vec![0.0; nd];
    t.grad(&x, &mut gg);
    for gi in gg.chunks(d) {
        s.g_grad = s.g_grad.max(finite_or("terminal gradient", norm(gi))?);
    }
    if !matches!(t.kind(), TerminalKind::Custom { .. }) {
        let mut fd = vec![0.0; nd];
        central_grad(|v| t.value(v), &x, &mut fd);
        s.g_grad_mismatch = rel_mismatch(&gg, &fd);
    }
    let yn = norm(&y).max(1e-300);
    let dir: Vec<f64> = y.iter().map(|v| v / yn).collect();
    let rayleigh = match t.kind() {
        TerminalKind::Custom { .. } => {
            let eps = 1e-3 * (1.0 + norm(&x));
            let shifted = |sgn: f64| -> Vec<f64> { x.iter().zip(&dir).map(|(a, b)| a + sgn * eps * b).collect() };
            (t.value(&shifted(1.0)) - 2.0 * t.value(&x) + t.value(&shifted(-1.0))) / (eps * eps)
        }
        _ => {
            let hess = t.hessian(&x);
            let mut acc = 0.0;
            for r in 0..nd {
                for c in 0..nd {
                    acc += dir[r] * hess[r * nd + c] * dir[c];
                }
            }
            acc
        }
    };
    s.g_rayleigh_max = finite_or("terminal hessian", rayleigh)?;
    s.g_rayleigh_min = rayleigh;
    if t.k_g().is_some() || matches!(t.kind(), TerminalKind::Custom { .. }) {
        let hess = t.hessian(&x);
        let table = t.cross_norms();
        for i in 0..n {
            for j in 0..n {
                let block: Vec<f64> = (0..d)
                    .flat_map(|r| (0..d).map(move |c| (r, c)))
                    .map(|(r, c)| hess[(i * d + r) * nd + j * d + c])
                    .collect();
                let norm_ij = operator_norm(&block, d, d);
                let mut excess = norm_ij - table[i * n + j] * (1.0 + REL_TOL);
                if let Some(k) = t.k_g() {
                    excess = excess.max(norm_ij - k / (n * n) as f64 * (1.0 + REL_TOL));
                }
                s.g_cross_excess = s.g_cross_excess.max(excess);
            }
        }
    }
    Ok(s)
}

/// Audits every assumption on `spec` with `n_probes` random probes.
pub fn audit_assumptions(spec: &ProblemSpec, cfg: &AuditConfig) -> Result<AuditReport> {
    if cfg.n_probes == 0 {
        return Err(Error::config("audit needs at least one probe"));
    }
    let (n, d) = (spec.n_agents, spec.dim);
    let nf = n as f64;
    let stats = (0..cfg.n_probes)
        .into_par_iter()
        .map(|k| probe(spec, cfg, k))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .reduce(ProbeStats::merge)
        .expect("at least one probe");

    let mut items = Vec::new();

    // pairwise profiles on a radial grid
    let r_max = cfg.box_half_width * 2.0 * (d as f64).sqrt();
    let mut origin = 0.0_f64;
    let mut min_deriv = f64::INFINITY;
    let mut min_second = f64::INFINITY;
    let mut hess_excess = f64::NEG_INFINITY;
    let mut max_declared = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let h = spec.pairwise.get(i, j);
            origin = origin.max(finite_or("pairwise", h.value(0.0))?.abs()).max(h.deriv(0.0).abs());
            let declared = h.hessian_sup();
            max_declared = max_declared.max(declared);
            for k in 0..=RADIAL_GRID {
                let r = r_max * k as f64 / RADIAL_GRID as f64;
                let d1 = h.deriv(r);
                let d2 = h.second(r);
                min_deriv = min_deriv.min(d1);
                min_second = min_second.min(d2);
                let curv = if r > 0.0 { d2.max(d1 / r) } else { d2 };
                hess_excess = hess_excess.max(curv - declared);
            }
        }
    }
    if n < 2 {
        min_deriv = 0.0;
        min_second = 0.0;
        hess_excess = 0.0;
    }
    items.push(upper_check(
        "pairwise.origin",
        origin,
        0.0,
        FD_TOL,
        "max |ĥ(0)|, |ĥ'(0)| over pairs",
    ));
    items.push(lower_check("pairwise.nondecreasing", min_deriv, FD_TOL, "min ĥ' on the radial grid"));
    items.push(lower_check("pairwise.convex", min_second, FD_TOL, "min ĥ'' on the radial grid"));
    items.push(upper_check(
        "pairwise.hessian_bound",
        max_declared + hess_excess.max(-max_declared),
        max_declared,
        FD_TOL * (1.0 + max_declared),
        "max(ĥ'', ĥ'/r) against the declared ‖D²h‖",
    ));
    items.push(upper_check(
        "pairwise.gradient_consistency",
        stats.h_grad_mismatch,
        0.0,
        1e-5,
        "relative mismatch of Dh against central differences",
    ));
    items.push(upper_check("pairwise.symmetry", stats.h_asymmetry, 0.0, ABS_TOL, "|h(a) - h(-a)|"));

    // f_0
    items.push(lower_check("f0.convex", stats.f0_min_eig, FD_TOL, "min eigenvalue of D²f0"));
    items.push(upper_check(
        "f0.lipschitz",
        stats.f0_grad,
        spec.f0.grad_sup(),
        ABS_TOL,
        "max |Df0| against the declared Lipschitz constant",
    ));
    items.push(upper_check(
        "f0.hessian_bound",
        stats.f0_hess,
        spec.f0.hessian_sup(),
        if spec.f0.has_analytic_grad() { ABS_TOL } else { FD_TOL * (1.0 + spec.f0.hessian_sup()) },
        "max ‖D²f0‖ against the declared bound",
    ));
    items.push(upper_check(
        "f0.gradient_consistency",
        stats.f0_grad_mismatch,
        0.0,
        1e-5,
        "relative mismatch of Df0 against central differences",
    ));
    items.push(upper_check(
        "fN.nonnegative_pairwise",
        stats.fn_deficit,
        0.0,
        ABS_TOL,
        "max (f0(mean a) - f^N(a))",
    ));

    // g^N
    let t = &spec.terminal;
    let c_g = t.c_g();
    let lq_regime = spec.lq_form().is_some();
    let mut grad_item = upper_check(
        "terminal.gradient_bound",
        stats.g_grad,
        c_g / nf,
        ABS_TOL,
        "sup_i |D_{x_i} g^N| against C_G/N",
    );
    if !t.has_bounded_gradient() {
        grad_item.status = AuditStatus::Exempt;
        grad_item.note = "quadratic terminal cost: gradient unbounded (LQ regime)".into();
    }
    items.push(grad_item);
    let fd_based = matches!(t.kind(), TerminalKind::Custom { .. });
    let slack = if fd_based { FD_TOL * (1.0 + c_g / nf) } else { ABS_TOL };
    items.push(lower_check("terminal.convex", stats.g_rayleigh_min, slack, "min Rayleigh quotient of D²g^N"));
    items.push(upper_check(
        "terminal.hessian_bound",
        stats.g_rayleigh_max,
        c_g / nf,
        slack,
        "max Rayleigh quotient of D²g^N against C_G/N",
    ));
    items.push(upper_check(
        "terminal.cross_bound",
        stats.g_cross_excess.max(0.0),
        0.0,
        slack,
        "excess of ‖D_ij g^N‖ over the declared table and K_G/N²",
    ));
    if !fd_based {
        items.push(upper_check(
            "terminal.gradient_consistency",
            stats.g_grad_mismatch,
            0.0,
            1e-5,
            "relative mismatch of Dg^N against central differences",
        ));
    }

    let poincare = spec.initial_law.poincare_constant();
    items.push(AuditItem {
        name: "initial.poincare".into(),
        status: if poincare.is_ok() { AuditStatus::Pass } else { AuditStatus::Fail },
        worst: *poincare.as_ref().unwrap_or(&f64::NAN),
        declared: f64::NAN,
        note: match &poincare {
            Ok(_) => "product-law Poincaré constant".into(),
            Err(e) => e.to_string(),
        },
    });

    Ok(AuditReport {
        items,
        n_probes: cfg.n_probes,
        box_half_width: cfg.box_half_width,
        lq_regime,
        measured_c_g_gradient: nf * stats.g_grad,
        measured_c_g_hessian: nf * stats.g_rayleigh_max.max(0.0),
        poincare_constant: poincare.ok(),
    })
}
