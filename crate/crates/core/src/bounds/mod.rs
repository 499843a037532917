//! Constants of the gap bound and Monte Carlo estimates of the error terms
//! `E_1`, `E_2`, `E_Q` and `A^N` on particle ensembles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{CovectorSource, Ensemble};
use crate::error::{Error, Result};
use crate::hamiltonian::{
    dist_objective_rows, grad_fn, hamiltonian_full, solve_check_a, solve_hat_a, FixedPointConfig, OthersAverager,
    SiteField,
};
use crate::model::ProblemSpec;
use crate::numerics::{dot, norm, Estimate, BATCHES};
use crate::value::RiccatiSolution;

/// The unspecified universal constants `K_1'` and `K_f'`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundKnobs {
    pub k1_prime: f64,
    pub kf_prime: f64,
}

impl Default for BoundKnobs {
    fn default() -> Self {
        BoundKnobs {
            k1_prime: 1.0,
            kf_prime: 1.0,
        }
    }
}

impl BoundKnobs {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1_prime >= 0.0 && self.kf_prime >= 0.0) || !self.k1_prime.is_finite() || !self.kf_prime.is_finite() {
            return Err(Error::config("K_1' and K_f' must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// `C_p = (e^{2 C_G T} - 1) / (2 C_G) + c_p e^{2 C_G T}`, with the limit
/// `T + c_p` at `C_G = 0`.
pub fn compute_cp(c_p: f64, c_g: f64, horizon: f64) -> Result<f64> {
    for (name, v) in [("c_p", c_p), ("C_G", c_g), ("T", horizon)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::config(format!("{name} must be finite and nonnegative, got {v}")));
        }
    }
    let growth = if c_g == 0.0 {
        horizon
    } else {
        (2.0 * c_g * horizon).exp_m1() / (2.0 * c_g)
    };
    Ok(growth + c_p * (2.0 * c_g * horizon).exp())
}

/// Everything the closed-form constants depend on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub n_agents: usize,
    pub horizon: f64,
    pub c_g: f64,
    pub k_g: Option<f64>,
    /// Poincaré constant of the initial law.
    pub c_p: f64,
    /// `‖Df_0‖_∞`.
    pub df0: f64,
    /// `‖D²f_0‖_∞`.
    pub d2f0: f64,
    /// `‖D²h_ij‖_∞`, row-major `N x N`.
    pub h_hessian: Vec<f64>,
    /// `max_ij sup_{|x| <= C_G + ‖Df_0‖} |Dh_ij(x)|`.
    pub max_dh_ball: f64,
    /// `‖D_ij g^N‖_∞`, row-major `N x N`.
    pub g_cross: Vec<f64>,
    pub knobs: BoundKnobs,
}

impl BoundInputs {
    pub fn from_spec(spec: &ProblemSpec, knobs: BoundKnobs) -> Result<Self> {
        Self::with_c_g(spec, knobs, spec.terminal.c_g())
    }

    /// Same as [`from_spec`](Self::from_spec) with `C_G` replaced.
    pub fn with_c_g(spec: &ProblemSpec, knobs: BoundKnobs, c_g: f64) -> Result<Self> {
        knobs.validate()?;
        if !(c_g >= 0.0) || !c_g.is_finite() {
            return Err(Error::config(format!("C_G must be finite and nonnegative, got {c_g}")));
        }
        let n = spec.n_agents;
        let df0 = spec.f0.grad_sup();
        let h_hessian = (0..n * n)
            .map(|k| spec.pairwise.get(k / n, k % n).hessian_sup())
            .collect();
        Ok(BoundInputs {
            n_agents: n,
            horizon: spec.horizon,
            c_g,
            k_g: spec.terminal.k_g(),
            c_p: spec.initial_law.poincare_constant()?,
            df0,
            d2f0: spec.f0.hessian_sup(),
            h_hessian,
            max_dh_ball: spec.pairwise.max_grad_on_ball(c_g + df0),
            g_cross: spec.terminal.cross_norms().to_vec(),
            knobs,
        })
    }

    fn nf(&self) -> f64 {
        self.n_agents as f64
    }

    /// `C_G + ‖Df_0‖_∞`, the bound on distributed controls.
    pub fn control_radius(&self) -> f64 {
        self.c_g + self.df0
    }

    /// `Σ_ij ‖D²h_ij‖²_∞`.
    pub fn h_hessian_sq_sum(&self) -> f64 {
        self.h_hessian.iter().map(|v| v * v).sum()
    }

    /// `Σ_ij ‖D_ij g^N‖²_∞`.
    pub fn g_cross_sq_sum(&self) -> f64 {
        self.g_cross.iter().map(|v| v * v).sum()
    }

    /// `(4/N²) Σ_ij ‖D²h_ij‖² + ‖D²f_0‖²`.
    pub fn interaction_factor(&self) -> f64 {
        let n = self.nf();
        4.0 / (n * n) * self.h_hessian_sq_sum() + self.d2f0 * self.d2f0
    }

    /// `C_p` over the whole horizon.
    pub fn poincare_propagated(&self) -> Result<f64> {
        compute_cp(self.c_p, self.c_g, self.horizon)
    }

    /// `sqrt(N C_p Σ_ij ‖D_ij g‖²)`.
    pub fn kg_root(&self) -> Result<f64> {
        Ok((self.nf() * self.poincare_propagated()? * self.g_cross_sq_sum()).sqrt())
    }

    /// `K_G` when it is declared and `‖D_ij g‖ <= K_G / N²` for every pair.
    pub fn cross_hypothesis(&self) -> Option<f64> {
        let k_g = self.k_g?;
        let n2 = self.nf() * self.nf();
        let cap = k_g / n2 * (1.0 + 1e-12) + 1e-300;
        self.g_cross.iter().all(|v| *v <= cap).then_some(k_g)
    }

    /// `8 (c_g + ‖Df_0‖)² ((4/N²) Σ‖D²h‖² + ‖D²f_0‖²)`.
    pub fn an_bound_at(&self, c_g: f64) -> f64 {
        8.0 * (c_g + self.df0).powi(2) * self.interaction_factor()
    }

    pub fn an_bound(&self) -> f64 {
        self.an_bound_at(self.c_g)
    }

    /// `(8 (C_G + ‖Df_0‖)² / N³) ((4/N) Σ_j ‖D²h_ij‖² + ‖D²f_0‖²)` for agent `i`.
    pub fn diff_f_bound(&self, i: usize) -> f64 {
        let n = self.nf();
        let row: f64 = self.h_hessian[i * self.n_agents..(i + 1) * self.n_agents]
            .iter()
            .map(|v| v * v)
            .sum();
        8.0 * self.control_radius().powi(2) / n.powi(3) * (4.0 / n * row + self.d2f0 * self.d2f0)
    }

    /// `N C_p Σ_ij ‖D_ij g‖²`, the terminal bound on `E_Q`.
    pub fn eq_terminal_bound(&self) -> Result<f64> {
        Ok(self.nf() * self.poincare_propagated()? * self.g_cross_sq_sum())
    }

    /// Right-hand side of the Gronwall estimate for `E_Q(s)` given `E_Q(T)`.
    pub fn gronwall_rhs(&self, eq_terminal: f64, s: f64) -> f64 {
        let growth = 3.0 * self.c_g * (self.horizon - s) / self.nf();
        growth.exp() * eq_terminal
            + self.control_radius().powi(2) / self.nf() * self.interaction_factor() * growth.exp_m1()
    }
}

/// `K_1 = (K_1'/√N) (2 max‖Dh‖_ball + ‖Df_0‖) (C_G + ‖Df_0‖) (sqrt((4/N²)Σ‖D²h‖²) + ‖D²f_0‖)²`.
pub fn compute_k1(inp: &BoundInputs) -> f64 {
    let n = inp.nf();
    let h = (4.0 / (n * n) * inp.h_hessian_sq_sum()).sqrt();
    inp.knobs.k1_prime / n.sqrt()
        * (2.0 * inp.max_dh_ball + inp.df0)
        * inp.control_radius()
        * (h + inp.d2f0).powi(2)
}

/// `K_f(t)`, `K_g(t)` and the theorem's right-hand side `(T - t)(K_f + K_g)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KfKg {
    pub k_f: f64,
    pub k_g: f64,
    pub rhs: f64,
}

pub fn compute_kf_kg(inp: &BoundInputs, t: f64) -> Result<KfKg> {
    if !(0.0..=inp.horizon).contains(&t) {
        return Err(Error::config(format!("time {t} lies outside [0, {}]", inp.horizon)));
    }
    let n = inp.nf();
    let tau = inp.horizon - t;
    let k_f = compute_k1(inp)
        + inp.knobs.kf_prime * inp.control_radius().powi(2) / n.sqrt()
            * (inp.interaction_factor() * (3.0 * inp.c_g * tau / n).exp_m1()).sqrt();
    let k_g = kg_from_root(inp, tau, inp.kg_root()?);
    Ok(KfKg {
        k_f,
        k_g,
        rhs: tau * (k_f + k_g),
    })
}

fn kg_from_root(inp: &BoundInputs, tau: f64, root: f64) -> f64 {
    let e = (1.5 * inp.c_g * tau / inp.nf()).exp();
    e * root * (2.0 * inp.c_g + e * root)
}

/// All constants of the gap bound at the instance's start time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n_agents: usize,
    pub time: f64,
    pub c_g: f64,
    pub k_g: Option<f64>,
    pub c_p: f64,
    pub c_p_propagated: f64,
    pub df0: f64,
    pub d2f0: f64,
    pub h_hessian: Vec<f64>,
    pub max_dh_ball: f64,
    pub k1: f64,
    pub k_f: f64,
    pub k_g_t: f64,
    pub rhs_theorem: f64,
    /// `(T - t)(K_f + K_g)` with `‖D_ij g‖` replaced by `K_G/N²`, when that
    /// hypothesis holds.
    pub m_over_sqrt_n: Option<f64>,
    pub m: Option<f64>,
    pub knobs: BoundKnobs,
}

pub fn bound_report(inp: &BoundInputs, t: f64) -> Result<BoundReport> {
    let kk = compute_kf_kg(inp, t)?;
    let c_p_prop = inp.poincare_propagated()?;
    let tau = inp.horizon - t;
    let m_over_sqrt_n = inp.cross_hypothesis().map(|k_g| {
        let root = k_g * (c_p_prop / inp.nf()).sqrt();
        tau * (kk.k_f + kg_from_root(inp, tau, root))
    });
    Ok(BoundReport {
        n_agents: inp.n_agents,
        time: t,
        c_g: inp.c_g,
        k_g: inp.k_g,
        c_p: inp.c_p,
        c_p_propagated: c_p_prop,
        df0: inp.df0,
        d2f0: inp.d2f0,
        h_hessian: inp.h_hessian.clone(),
        max_dh_ball: inp.max_dh_ball,
        k1: compute_k1(inp),
        k_f: kk.k_f,
        k_g_t: kk.k_g,
        rhs_theorem: kk.rhs,
        m_over_sqrt_n,
        m: m_over_sqrt_n.map(|v| v * inp.nf().sqrt()),
        knobs: inp.knobs,
    })
}

fn check_field(spec: &ProblemSpec, q: &SiteField, ens: &Ensemble) -> Result<()> {
    if q.agents != spec.n_agents || q.dim != spec.dim || !q.same_shape(&ens.states) {
        return Err(Error::config("covector field does not match the ensemble"));
    }
    Ok(())
}

/// `Ê_1 = ℋ^N(q, m) - Ê H^N(q(X))`, nonpositive in exact arithmetic.
pub fn estimate_e1(spec: &ProblemSpec, q: &SiteField, ens: &Ensemble, fp: &FixedPointConfig) -> Result<Estimate> {
    check_field(spec, q, ens)?;
    let ctrl = solve_check_a(spec, q, ens, fp)?;
    let dist = dist_objective_rows(spec, q, &ctrl.controls, fp.inner_samples);
    let samples = (0..q.sites)
        .into_par_iter()
        .map(|k| Ok(dist[k] - hamiltonian_full(spec, q.row(k), fp)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::batch_means(&samples, BATCHES))
}

/// `Ê_Q` from tabulated gradients `p` and conditional means `cond`.
fn eq_from_tables(p: &SiteField, cond: &SiteField) -> Estimate {
    let (n, d) = (p.agents, p.dim);
    let samples: Vec<f64> = (0..p.sites)
        .into_par_iter()
        .map(|k| {
            let pk = p.row(k);
            let ck = cond.row(k);
            let s: f64 = (0..n * d).map(|r| pk[r] * pk[r] - ck[r] * ck[r]).sum();
            n as f64 * s
        })
        .collect();
    Estimate::batch_means(&samples, BATCHES)
}

/// `Ê_Q = N Σ_i (Ê|p_i(X)|² - Ê|Ê[p_i(X) | X_i]|²)` for a full-information
/// gradient field `p`. The conditional mean at row `k` averages `p_i` over
/// the first `inner` rows with agent `i`'s block replaced by row `k`'s.
pub fn estimate_eq(
    spec: &ProblemSpec,
    p: &(dyn Fn(&[f64], &mut [f64]) + Sync),
    ens: &Ensemble,
    inner: Option<usize>,
) -> Result<Estimate> {
    let (m, n, d) = (ens.paths(), spec.n_agents, spec.dim);
    if ens.agents() != n || ens.dim() != d || m == 0 {
        return Err(Error::config("ensemble does not match the instance"));
    }
    let inner = inner.unwrap_or(m).clamp(1, m);
    let nd = n * d;
    let mut grad = SiteField::zeros(m, n, d);
    grad.values
        .par_chunks_mut(nd)
        .enumerate()
        .for_each(|(k, out)| p(ens.row(k), out));
    let mut cond = SiteField::zeros(m, n, d);
    cond.values.par_chunks_mut(nd).enumerate().for_each(|(k, out)| {
        let own = ens.row(k);
        let mut x = vec![0.0; nd];
        let mut g = vec![0.0; nd];
        for i in 0..n {
            let blk = i * d..(i + 1) * d;
            for l in 0..inner {
                x.copy_from_slice(ens.row(l));
                x[blk.clone()].copy_from_slice(&own[blk.clone()]);
                p(&x, &mut g);
                for c in blk.clone() {
                    out[c] += g[c] / inner as f64;
                }
            }
        }
    });
    Ok(eq_from_tables(&grad, &cond))
}

/// `Ê_Q` for the LQ gradient `P(t)x`, whose conditional mean given `X_i`
/// under the product of the empirical columns is the lifted covector
/// `D_{m^i}𝒱`.
pub fn estimate_eq_lq(sol: &RiccatiSolution, t: f64, ens: &Ensemble) -> Result<Estimate> {
    let (p, q) = lq_fields(sol, t, ens)?;
    Ok(eq_from_tables(&p, &q))
}

/// `(DV(t, X), D_{m^i}𝒱(t, m)(X_i))` at every site, for the LQ value.
pub fn lq_fields(sol: &RiccatiSolution, t: f64, ens: &Ensemble) -> Result<(SiteField, SiteField)> {
    let (m, n, d) = (ens.paths(), ens.agents(), ens.dim());
    if n != sol.n_agents || d != sol.dim {
        return Err(Error::config("ensemble does not match the Riccati solution"));
    }
    let pm = sol.p_at(t);
    let nd = n * d;
    let mut p = SiteField::zeros(m, n, d);
    p.values.par_chunks_mut(nd).enumerate().for_each(|(k, out)| {
        let x = ens.row(k);
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..nd).map(|c| pm[(r, c)] * x[c]).sum();
        }
    });
    Ok((p, sol.field(t, ens)?))
}

/// `Â^N = Ê Σ_i |â(q(X))_i - ǎ^i(X_i)|²`.
///
/// Refused with [`Error::Hypothesis`] unless `|q^i| <= c_g / N` at every
/// site.
pub fn estimate_an(
    spec: &ProblemSpec,
    q: &SiteField,
    ens: &Ensemble,
    fp: &FixedPointConfig,
    c_g: f64,
) -> Result<Estimate> {
    check_field(spec, q, ens)?;
    let cap = c_g / spec.n_agents as f64;
    let worst = max_block_norm(q);
    if worst > cap * (1.0 + 1e-12) {
        return Err(Error::Hypothesis(format!(
            "covector norm {worst:.6e} exceeds C_G/N = {cap:.6e}"
        )));
    }
    let ctrl = solve_check_a(spec, q, ens, fp)?;
    let samples = (0..q.sites)
        .into_par_iter()
        .map(|k| {
            let hat = solve_hat_a(spec, q.row(k), fp)?;
            Ok(hat
                .controls
                .iter()
                .zip(ctrl.controls.row(k))
                .map(|(a, b)| (a - b).powi(2))
                .sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::batch_means(&samples, BATCHES))
}

/// `max_{k,i} |q^i(X^k_i)|`.
pub fn max_block_norm(q: &SiteField) -> f64 {
    (0..q.sites)
        .flat_map(|k| (0..q.agents).map(move |i| (k, i)))
        .map(|(k, i)| norm(q.get(k, i)))
        .fold(0.0, f64::max)
}

/// `Ê_2 = Ê H^N(q(X)) - Ê H^N(p(X))`, with `p` the full-information
/// gradient.
pub fn estimate_e2(
    spec: &ProblemSpec,
    p: &SiteField,
    q: &SiteField,
    ens: &Ensemble,
    fp: &FixedPointConfig,
) -> Result<Estimate> {
    check_field(spec, q, ens)?;
    check_field(spec, p, ens)?;
    let samples = (0..q.sites)
        .into_par_iter()
        .map(|k| Ok(hamiltonian_full(spec, q.row(k), fp)? - hamiltonian_full(spec, p.row(k), fp)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::batch_means(&samples, BATCHES))
}

/// Two-sided check `-K_1 <= Ê_2 <= Ê_Q + 2 (C_G + ‖Df_0‖) sqrt(Ê_Q)`, each
/// arm with three standard errors of slack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct E2Band {
    pub e2: Estimate,
    pub lower: f64,
    pub upper: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
}

impl E2Band {
    pub fn new(e2: Estimate, eq: Estimate, k1: f64, radius: f64) -> Self {
        let eq_hi = (eq.value + 3.0 * eq.std_err).max(0.0);
        let upper = eq_hi + 2.0 * radius * eq_hi.sqrt();
        let lower = -k1;
        E2Band {
            e2,
            lower,
            upper,
            lower_ok: e2.value >= lower - 3.0 * e2.std_err,
            upper_ok: e2.value <= upper + 3.0 * e2.std_err,
        }
    }

    pub fn passed(&self) -> bool {
        self.lower_ok && self.upper_ok
    }
}

/// Per-agent `Ê|∂_i f^N(ǎ(X)) - Ê_{-i} ∂_i f^N(ǎ^i(X_i), ǎ^{-i}(Y^{-i}))|²`.
pub fn estimate_diff_f(spec: &ProblemSpec, controls: &SiteField, inner: Option<usize>) -> Vec<Estimate> {
    let (n, d) = (spec.n_agents, spec.dim);
    let avg = OthersAverager::new(spec, controls, inner);
    let per_row: Vec<Vec<f64>> = (0..controls.sites)
        .into_par_iter()
        .map(|k| {
            let row = controls.row(k);
            let mut g = vec![0.0; n * d];
            grad_fn(spec, row, &mut g);
            let mut c = vec![0.0; d];
            (0..n)
                .map(|i| {
                    avg.cond_grad(i, controls.get(k, i), &mut c);
                    let diff: Vec<f64> = (0..d).map(|r| g[i * d + r] - c[r]).collect();
                    dot(&diff, &diff)
                })
                .collect()
        })
        .collect();
    (0..n)
        .map(|i| {
            let s: Vec<f64> = per_row.iter().map(|r| r[i]).collect();
            Estimate::batch_means(&s, BATCHES)
        })
        .collect()
}

/// The error functionals at one time on one ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimates {
    pub time: f64,
    pub e1: Estimate,
    pub eq: Estimate,
    pub an: Estimate,
    /// The `C_G` the `A^N` bound was evaluated with: the declared one, or
    /// `N max|q^i|` over the ensemble when the covector is larger.
    pub an_c_g: f64,
    pub an_bound: f64,
    pub e2_band: E2Band,
}

/// Every error functional for an LQ instance at time `t`, with `q` the
/// lifted covector and `p = P(t)x`.
pub fn estimate_errors_lq(
    spec: &ProblemSpec,
    sol: &RiccatiSolution,
    t: f64,
    ens: &Ensemble,
    fp: &FixedPointConfig,
    inputs: &BoundInputs,
) -> Result<ErrorEstimates> {
    let (p, q) = lq_fields(sol, t, ens)?;
    let eq = eq_from_tables(&p, &q);
    let e1 = estimate_e1(spec, &q, ens, fp)?;
    let an_c_g = inputs.c_g.max(spec.n_agents as f64 * max_block_norm(&q));
    let an = estimate_an(spec, &q, ens, fp, an_c_g)?;
    let e2 = estimate_e2(spec, &p, &q, ens, fp)?;
    Ok(ErrorEstimates {
        time: t,
        e1,
        eq,
        an,
        an_c_g,
        an_bound: inputs.an_bound_at(an_c_g),
        e2_band: E2Band::new(e2, eq, compute_k1(inputs), inputs.control_radius()),
    })
}

/// One row of the Gronwall comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GronwallRow {
    pub time: f64,
    pub eq: Estimate,
    pub rhs: f64,
    /// Combined standard error of `Ê_Q(s)` and the `Ê_Q(T)` term of the
    /// right-hand side.
    pub sigma: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GronwallTable {
    pub rows: Vec<GronwallRow>,
}

impl GronwallTable {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Compares `Ê_Q(s, m_s)` along recorded flow snapshots with the Gronwall
/// envelope anchored at the last snapshot, which must sit at the horizon.
pub fn check_gronwall_eq(sol: &RiccatiSolution, snapshots: &[Ensemble], inputs: &BoundInputs) -> Result<GronwallTable> {
    let last = snapshots
        .last()
        .ok_or_else(|| Error::config("no flow snapshots to check"))?;
    if (last.time - inputs.horizon).abs() > 1e-9 * inputs.horizon.max(1.0) {
        return Err(Error::config("last snapshot is not at the horizon"));
    }
    let eqs = snapshots
        .iter()
        .map(|e| estimate_eq_lq(sol, e.time, e))
        .collect::<Result<Vec<_>>>()?;
    let eq_t = *eqs.last().expect("nonempty");
    let rows = snapshots
        .iter()
        .zip(&eqs)
        .map(|(e, eq)| {
            let growth = (3.0 * inputs.c_g * (inputs.horizon - e.time) / inputs.n_agents as f64).exp();
            let rhs = inputs.gronwall_rhs(eq_t.value, e.time);
            let sigma = eq.std_err.hypot(growth * eq_t.std_err);
            GronwallRow {
                time: e.time,
                eq: *eq,
                rhs,
                sigma,
                pass: eq.value <= rhs + 3.0 * sigma,
            }
        })
        .collect();
    Ok(GronwallTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate_check_flow, IntegratorConfig, NoiseSource, TimeConvention};
    use crate::model::{AgentLaw, InitialLaw, PairwiseTable, RadialProfile, ScalarCost, TerminalCost};
    use crate::value::test_support::lq;
    use crate::value::{riccati_full, RICCATI_STEPS};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian() -> AgentLaw {
        AgentLaw::Gaussian {
            mean: vec![0.0],
            cov: vec![1.0],
        }
    }

    fn inputs(n: usize, kappa: f64) -> BoundInputs {
        BoundInputs::from_spec(&lq(n, 1, kappa, 1.0, gaussian()), BoundKnobs::default()).unwrap()
    }

    #[test]
    fn cp_examples() {
        assert_eq!(compute_cp(0.7, 0.5, 0.0).unwrap(), 0.7);
        assert_eq!(compute_cp(1.0, 0.0, 1.0).unwrap(), 2.0);
        let e = std::f64::consts::E;
        assert!((compute_cp(1.0, 0.5, 1.0).unwrap() - (2.0 * e - 1.0)).abs() < 1e-12);
        assert!((compute_cp(1.0, 1e-9, 1.0).unwrap() - 2.0).abs() < 1e-8);
        assert!(compute_cp(-1.0, 0.5, 1.0).is_err());
        assert!(compute_cp(1.0, -0.5, 1.0).is_err());
        assert!(compute_cp(1.0, 0.5, f64::NAN).is_err());
    }

    #[test]
    fn lq_inputs_are_read_from_the_instance() {
        let inp = inputs(4, 0.5);
        assert_eq!(inp.c_g, 1.0);
        assert_eq!(inp.c_p, 1.0);
        assert_eq!(inp.df0, 0.0);
        assert!((inp.max_dh_ball - 0.5).abs() < 1e-15);
        assert!((inp.h_hessian_sq_sum() - 12.0 * 0.25).abs() < 1e-15);
        // G = I/N has no cross blocks
        assert_eq!(inp.g_cross_sq_sum(), 4.0 * 0.0625);
    }

    #[test]
    fn k1_examples() {
        assert_eq!(compute_k1(&inputs(4, 0.0)), 0.0);
        // (1/2)(2·0.5)(1)(sqrt(4/16 · 12 · 0.25))² = 0.375
        let inp = inputs(4, 0.5);
        assert!((compute_k1(&inp) - 0.375).abs() < 1e-14);
        let mut twice = inp.clone();
        twice.knobs.k1_prime = 2.0;
        assert!((compute_k1(&twice) - 2.0 * compute_k1(&inp)).abs() < 1e-14);
    }

    /// Independent evaluation of `K_f` and `K_g` with every factor written out.
    fn kf_kg_oracle(inp: &BoundInputs, t: f64) -> (f64, f64) {
        let n = inp.n_agents as f64;
        let (cg, t_end) = (inp.c_g, inp.horizon);
        let big_cp = (f64::exp(2.0 * cg * t_end) - 1.0) / (2.0 * cg) + inp.c_p * f64::exp(2.0 * cg * t_end);
        let sum_g: f64 = inp.g_cross.iter().map(|v| v.powi(2)).sum();
        let root = (n * big_cp * sum_g).sqrt();
        let e = f64::exp(3.0 * cg / (2.0 * n) * (t_end - t));
        let k_g = e * root * (2.0 * cg + e * root);
        let sum_h: f64 = inp.h_hessian.iter().map(|v| v.powi(2)).sum();
        let r = cg + inp.df0;
        let k1 = inp.knobs.k1_prime / n.sqrt()
            * (2.0 * inp.max_dh_ball + inp.df0)
            * r
            * ((4.0 / n / n * sum_h).sqrt() + inp.d2f0).powi(2);
        let k_f = k1
            + inp.knobs.kf_prime * r * r / n.sqrt()
                * ((4.0 / n / n * sum_h + inp.d2f0.powi(2)) * (f64::exp(3.0 * cg / n * (t_end - t)) - 1.0)).sqrt();
        (k_f, k_g)
    }

    #[test]
    fn kf_kg_match_oracle() {
        let mut inp = inputs(4, 0.5);
        inp.df0 = 0.3;
        inp.d2f0 = 0.2;
        inp.knobs = BoundKnobs {
            k1_prime: 0.7,
            kf_prime: 1.3,
        };
        for t in [0.0, 0.25, 0.9] {
            let got = compute_kf_kg(&inp, t).unwrap();
            let (kf, kg) = kf_kg_oracle(&inp, t);
            assert!((got.k_f - kf).abs() < 1e-12 * kf.max(1.0), "{} vs {kf}", got.k_f);
            assert!((got.k_g - kg).abs() < 1e-12 * kg.max(1.0));
            assert!((got.rhs - (1.0 - t) * (kf + kg)).abs() < 1e-12 * got.rhs.max(1.0));
        }
        assert!(compute_kf_kg(&inp, 1.5).is_err());
    }

    #[test]
    fn rhs_vanishes_at_horizon() {
        let inp = inputs(8, 0.5);
        assert_eq!(compute_kf_kg(&inp, inp.horizon).unwrap().rhs, 0.0);
    }

    #[test]
    fn kg_vanishes_without_cross_terms() {
        let mut inp = inputs(4, 0.5);
        inp.g_cross.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(compute_kf_kg(&inp, 0.0).unwrap().k_g, 0.0);
    }

    #[test]
    fn kg_root_under_cross_hypothesis() {
        for n in [4_usize, 16, 64] {
            let mut inp = inputs(n, 0.5);
            let k_g = 0.8;
            inp.k_g = Some(k_g);
            inp.g_cross = vec![k_g / (n * n) as f64; n * n];
            let cp = inp.poincare_propagated().unwrap();
            let want = k_g * (cp / n as f64).sqrt();
            assert!((inp.kg_root().unwrap() - want).abs() < 1e-12 * want);
            assert_eq!(inp.cross_hypothesis(), Some(k_g));
            let rep = bound_report(&inp, 0.0).unwrap();
            assert!((rep.m_over_sqrt_n.unwrap() - rep.rhs_theorem).abs() < 1e-9 * rep.rhs_theorem);
        }
    }

    #[test]
    fn report_is_nonnegative_and_deterministic() {
        let s = lq(4, 1, 0.5, 1.0, gaussian());
        let inp = BoundInputs::from_spec(&s, BoundKnobs::default()).unwrap();
        let a = serde_json::to_string(&bound_report(&inp, 0.0).unwrap()).unwrap();
        let b = serde_json::to_string(&bound_report(&inp, 0.0).unwrap()).unwrap();
        assert_eq!(a, b);
        let r = bound_report(&inp, 0.0).unwrap();
        for v in [r.c_g, r.c_p, r.c_p_propagated, r.k1, r.k_f, r.k_g_t, r.rhs_theorem, r.max_dh_ball] {
            assert!(v >= 0.0 && v.is_finite());
        }
        assert!(r.m.is_some());
    }

    proptest! {
        #[test]
        fn kg_decreases_as_cross_norms_shrink(scale in 0.0..1.0_f64, t in 0.0..1.0_f64) {
            let inp = inputs(4, 0.5);
            let mut small = inp.clone();
            small.g_cross.iter_mut().for_each(|v| *v *= scale);
            let a = compute_kf_kg(&inp, t).unwrap().k_g;
            let b = compute_kf_kg(&small, t).unwrap().k_g;
            prop_assert!(b <= a);
        }
    }

    fn ensemble(s: &ProblemSpec, m: usize, seed: u64) -> Ensemble {
        Ensemble::sample(&s.initial_law, s.start_time, m, &NoiseSource::new(seed, false)).unwrap()
    }

    fn random_q(m: usize, n: usize, d: usize, scale: f64, seed: u64) -> SiteField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SiteField::from_fn(m, n, d, |_, _, out| {
            for v in out {
                *v = scale * rng.random_range(-1.0..1.0);
            }
        })
    }

    #[test]
    fn decoupled_errors_vanish() {
        let s = lq(3, 1, 0.0, 1.0, gaussian());
        let ens = ensemble(&s, 200, 1);
        let q = random_q(200, 3, 1, 1.0 / 3.0, 2);
        let fp = FixedPointConfig::default();
        let e1 = estimate_e1(&s, &q, &ens, &fp).unwrap();
        assert!(e1.value.abs() < 1e-10, "{e1:?}");
        let an = estimate_an(&s, &q, &ens, &fp, 1.0).unwrap();
        assert!(an.value.abs() < 1e-10);
    }

    #[test]
    fn single_site_errors_vanish() {
        let s = lq(3, 1, 0.5, 1.0, gaussian());
        let ens = ensemble(&s, 1, 4);
        let q = random_q(1, 3, 1, 0.3, 5);
        let fp = FixedPointConfig::default();
        assert!(estimate_e1(&s, &q, &ens, &fp).unwrap().value.abs() < 1e-10);
        assert!(estimate_an(&s, &q, &ens, &fp, 1.0).unwrap().value < 1e-18);
        let p = |x: &[f64], out: &mut [f64]| {
            out[0] = x[0] + x[1];
            out[1] = x[1] * x[2];
            out[2] = x[0];
        };
        assert_eq!(estimate_eq(&s, &p, &ens, None).unwrap().value, 0.0);
    }

    #[test]
    fn e1_is_nonpositive_with_interaction() {
        let s = lq(3, 1, 2.0, 1.0, gaussian());
        let ens = ensemble(&s, 400, 6);
        let q = SiteField::from_fn(400, 3, 1, |k, i, out| out[0] = 0.3 * ens.states.get(k, i)[0]);
        let e1 = estimate_e1(&s, &q, &ens, &FixedPointConfig::default()).unwrap();
        assert!(e1.value <= 1e-12, "{e1:?}");
    }

    #[test]
    fn an_refuses_large_covectors() {
        let s = lq(3, 1, 0.5, 1.0, gaussian());
        let ens = ensemble(&s, 10, 1);
        let q = random_q(10, 3, 1, 5.0, 2);
        let err = estimate_an(&s, &q, &ens, &FixedPointConfig::default(), 1.0).unwrap_err();
        assert!(matches!(err, Error::Hypothesis(_)));
    }

    #[test]
    fn eq_of_separable_gradient_is_small() {
        let s = lq(3, 1, 0.5, 1.0, gaussian());
        let ens = ensemble(&s, 2000, 3);
        let p = |x: &[f64], out: &mut [f64]| {
            for (o, v) in out.iter_mut().zip(x) {
                *o = v.sin();
            }
        };
        let eq = estimate_eq(&s, &p, &ens, Some(200)).unwrap();
        assert!(eq.value.abs() < 1e-12, "{eq:?}");
    }

    #[test]
    fn eq_of_coupled_gradient_matches_variance() {
        // p_0 = x_0 + x_1: E|p_0|² - E|E[p_0|X_0]|² = Var(X_1) = 1; N = 2
        let s = lq(2, 1, 0.0, 1.0, gaussian());
        let ens = ensemble(&s, 4000, 8);
        let p = |x: &[f64], out: &mut [f64]| {
            out[0] = x[0] + x[1];
            out[1] = x[1];
        };
        let eq = estimate_eq(&s, &p, &ens, None).unwrap();
        assert!((eq.value - 2.0).abs() < 3.0 * eq.std_err + 0.01, "{eq:?}");
    }

    #[test]
    fn lq_eq_agrees_with_sampled_conditional_mean() {
        let s = lq(3, 1, 0.5, 1.0, gaussian());
        let sol = riccati_full(&s, 200).unwrap();
        let ens = ensemble(&s, 300, 9);
        let pm = sol.p_at(0.0);
        let p = move |x: &[f64], out: &mut [f64]| {
            for r in 0..3 {
                out[r] = (0..3).map(|c| pm[(r, c)] * x[c]).sum();
            }
        };
        let a = estimate_eq(&s, &p, &ens, None).unwrap();
        let b = estimate_eq_lq(&sol, 0.0, &ens).unwrap();
        assert!((a.value - b.value).abs() < 1e-12 * a.value.abs().max(1e-6), "{a:?} {b:?}");
    }

    fn coupled_terminal(n: usize, k_g: f64) -> ProblemSpec {
        let nf = n as f64;
        let g = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 / nf } else { k_g / (nf * nf) });
        ProblemSpec::new(
            n,
            1,
            1.0,
            0.0,
            ScalarCost::Zero,
            PairwiseTable::uniform(n, RadialProfile::Quadratic { kappa: 0.5 }),
            TerminalCost::quadratic(n, 1, g),
            InitialLaw::iid(n, gaussian()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn terminal_eq_is_below_poincare_bound() {
        let s = coupled_terminal(4, 0.8);
        let inp = BoundInputs::from_spec(&s, BoundKnobs::default()).unwrap();
        let sol = riccati_full(&s, 100).unwrap();
        let ens = ensemble(&s.with_start_time(1.0).unwrap(), 4000, 11);
        let eq = estimate_eq_lq(&sol, 1.0, &ens).unwrap();
        assert!(eq.value > 0.0);
        assert!(eq.value <= inp.eq_terminal_bound().unwrap() + 3.0 * eq.std_err);
    }

    #[test]
    fn gronwall_holds_along_flow_with_equality_at_horizon() {
        let s = coupled_terminal(4, 0.8);
        let inp = BoundInputs::from_spec(&s, BoundKnobs::default()).unwrap();
        let sol = riccati_full(&s, RICCATI_STEPS).unwrap();
        let ens = ensemble(&s, 1000, 12);
        let cfg = IntegratorConfig::new(20, 13).record_every(5);
        let flow = simulate_check_flow(
            &s,
            &sol,
            &ens,
            &cfg,
            &FixedPointConfig::default(),
            TimeConvention::StepTime,
            None,
        )
        .unwrap();
        let table = check_gronwall_eq(&sol, &flow.trajectory.snapshots, &inp).unwrap();
        assert_eq!(table.rows.len(), 5);
        assert!(table.all_pass(), "{table:?}");
        let last = table.rows.last().unwrap();
        assert!((last.eq.value - last.rhs).abs() < 1e-12);
    }

    #[test]
    fn diff_f_below_lemma_bound() {
        let s = ProblemSpec::new(
            3,
            1,
            1.0,
            0.0,
            ScalarCost::PseudoHuber {
                lipschitz: 0.5,
                delta: 0.5,
            },
            PairwiseTable::uniform(3, RadialProfile::Quadratic { kappa: 1.0 }),
            TerminalCost::separable_huber(3, 1, 1.0, 1.0),
            InitialLaw::iid(3, gaussian()).unwrap(),
        )
        .unwrap();
        let inp = BoundInputs::from_spec(&s, BoundKnobs::default()).unwrap();
        let ens = ensemble(&s, 500, 14);
        let q = random_q(500, 3, 1, inp.c_g / 3.0, 15);
        let ctrl = solve_check_a(&s, &q, &ens, &FixedPointConfig::default()).unwrap();
        for (i, e) in estimate_diff_f(&s, &ctrl.controls, None).iter().enumerate() {
            assert!(e.value >= 0.0);
            assert!(e.value <= inp.diff_f_bound(i) + 3.0 * e.std_err, "{i}: {e:?}");
        }
        let an = estimate_an(&s, &q, &ens, &FixedPointConfig::default(), inp.c_g).unwrap();
        assert!(an.value <= inp.an_bound() + 3.0 * an.std_err);
    }

    #[test]
    fn lq_error_estimates_sit_inside_their_bands() {
        let s = lq(3, 1, 0.5, 1.0, gaussian());
        let inp = BoundInputs::from_spec(&s, BoundKnobs::default()).unwrap();
        let sol = riccati_full(&s, 200).unwrap();
        let ens = ensemble(&s, 2000, 16);
        let est = estimate_errors_lq(&s, &sol, 0.0, &ens, &FixedPointConfig::default(), &inp).unwrap();
        assert!(est.e1.value <= 1e-12);
        assert!(est.eq.value >= -3.0 * est.eq.std_err);
        assert!(est.an.value <= est.an_bound + 3.0 * est.an.std_err);
        assert!(est.e2_band.passed(), "{est:?}");
    }
}
