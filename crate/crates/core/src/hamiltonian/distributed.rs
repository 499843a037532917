use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FixedPointConfig, FixedPointReport, ResidualTrace};
use crate::dynamics::Ensemble;
use crate::error::{Error, Result};
use crate::model::{ProblemSpec, RadialProfile};
use crate::numerics::dot;

/// Per-agent values at particle sites, laid out `[site k][agent i][coord]`.
/// Row `k` holds one sample of every agent, so the product-empirical law
/// of agent `i` is column `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteField {
    pub sites: usize,
    pub agents: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

/// Covectors `q^i` at the particle sites of agent `i`.
pub type CovectorFieldDist = SiteField;

impl SiteField {
    pub fn zeros(sites: usize, agents: usize, dim: usize) -> Self {
        SiteField {
            sites,
            agents,
            dim,
            values: vec![0.0; sites * agents * dim],
        }
    }

    pub fn from_values(sites: usize, agents: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if sites == 0 || agents == 0 || dim == 0 {
            return Err(Error::config("site field needs at least one site, agent and dimension"));
        }
        if values.len() != sites * agents * dim {
            return Err(Error::config(format!(
                "site field has {} values, expected {sites}x{agents}x{dim}",
                values.len()
            )));
        }
        Ok(SiteField {
            sites,
            agents,
            dim,
            values,
        })
    }

    /// Fills every `(site, agent)` block from `f(k, i, out)`.
    pub fn from_fn(sites: usize, agents: usize, dim: usize, mut f: impl FnMut(usize, usize, &mut [f64])) -> Self {
        let mut s = Self::zeros(sites, agents, dim);
        for k in 0..sites {
            for i in 0..agents {
                f(k, i, s.get_mut(k, i));
            }
        }
        s
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize) -> &[f64] {
        let o = (k * self.agents + i) * self.dim;
        &self.values[o..o + self.dim]
    }

    #[inline]
    pub fn get_mut(&mut self, k: usize, i: usize) -> &mut [f64] {
        let o = (k * self.agents + i) * self.dim;
        &mut self.values[o..o + self.dim]
    }

    /// All agents at site `k` as one vector of length `N d`.
    #[inline]
    pub fn row(&self, k: usize) -> &[f64] {
        let w = self.agents * self.dim;
        &self.values[k * w..(k + 1) * w]
    }

    pub fn same_shape(&self, other: &SiteField) -> bool {
        self.sites == other.sites && self.agents == other.agents && self.dim == other.dim
    }

    /// Column means, `N d` values.
    pub fn column_means(&self) -> Vec<f64> {
        let w = self.agents * self.dim;
        let mut m = vec![0.0; w];
        for k in 0..self.sites {
            for (mc, v) in m.iter_mut().zip(self.row(k)) {
                *mc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.sites as f64);
        m
    }

    /// Per-agent empirical second moments `Ê|v^i|²`.
    pub fn column_second_moments(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.agents];
        for k in 0..self.sites {
            for (i, si) in s.iter_mut().enumerate() {
                *si += self.get(k, i).iter().map(|v| v * v).sum::<f64>();
            }
        }
        s.iter_mut().for_each(|v| *v /= self.sites as f64);
        s
    }
}

/// `ǎ` tabulated at the particle sites.
#[derive(Clone, Debug)]
pub struct ControlFieldDist {
    pub controls: SiteField,
    pub report: FixedPointReport,
}

/// Averages of `∂_i f^N(a, (ǎ^j(Y^j))_{j≠i})` over the other agents' columns
/// for a frozen control table.
///
/// Pairwise terms only involve one other column at a time and are averaged
/// over that column (in closed form for quadratic `ĥ`). The `f_0` term
/// involves all other agents jointly; it is averaged over ensemble rows with
/// agent `i`'s entry replaced by the argument, which samples the product of
/// the other columns.
pub struct OthersAverager<'a> {
    spec: &'a ProblemSpec,
    controls: &'a SiteField,
    col_means: Vec<f64>,
    row_totals: Vec<f64>,
    inner: usize,
}

impl<'a> OthersAverager<'a> {
    pub fn new(spec: &'a ProblemSpec, controls: &'a SiteField, inner_samples: Option<usize>) -> Self {
        let inner = inner_samples.unwrap_or(controls.sites).clamp(1, controls.sites);
        let d = controls.dim;
        let mut row_totals = Vec::new();
        if !spec.f0.is_zero() {
            row_totals = vec![0.0; inner * d];
            for l in 0..inner {
                for i in 0..controls.agents {
                    for c in 0..d {
                        row_totals[l * d + c] += controls.get(l, i)[c];
                    }
                }
            }
        }
        OthersAverager {
            spec,
            controls,
            col_means: controls.column_means(),
            row_totals,
            inner,
        }
    }

    /// `s` such that `a ↦ Ê_{-i}[∂_i f^N]` is `a ↦ s a + const`, when row `i`
    /// has only quadratic or zero pairwise terms and `f_0 ≡ 0`.
    pub fn affine_slope(&self, i: usize) -> Option<f64> {
        if !self.spec.f0.is_zero() {
            return None;
        }
        let nf = self.spec.n_agents as f64;
        let mut s = 0.0;
        for j in (0..self.spec.n_agents).filter(|j| *j != i) {
            match self.spec.pairwise.get(i, j) {
                RadialProfile::Zero => {}
                RadialProfile::Quadratic { kappa } => s += 2.0 * kappa / (nf * nf),
                _ => return None,
            }
        }
        Some(s)
    }

    /// `Ê_{-i}[∂_i f^N]` with agent `i` playing `a`.
    pub fn cond_grad(&self, i: usize, a: &[f64], out: &mut [f64]) {
        let spec = self.spec;
        let (n, d) = (spec.n_agents, spec.dim);
        let nf = n as f64;
        let scale = 2.0 / (nf * nf);
        out.fill(0.0);
        let mut diff = vec![0.0; d];
        let mut g = vec![0.0; d];
        for j in 0..n {
            if j == i {
                continue;
            }
            match spec.pairwise.get(i, j) {
                RadialProfile::Zero => {}
                RadialProfile::Quadratic { kappa } => {
                    let mj = &self.col_means[j * d..(j + 1) * d];
                    for c in 0..d {
                        out[c] += scale * kappa * (a[c] - mj[c]);
                    }
                }
                h => {
                    let w = scale / self.inner as f64;
                    for l in 0..self.inner {
                        let yj = self.controls.get(l, j);
                        for c in 0..d {
                            diff[c] = a[c] - yj[c];
                        }
                        h.grad(&diff, &mut g);
                        for c in 0..d {
                            out[c] += w * g[c];
                        }
                    }
                }
            }
        }
        if !spec.f0.is_zero() {
            let w = 1.0 / (nf * self.inner as f64);
            let mut z = vec![0.0; d];
            for l in 0..self.inner {
                let own = self.controls.get(l, i);
                for c in 0..d {
                    z[c] = (self.row_totals[l * d + c] - own[c] + a[c]) / nf;
                }
                spec.f0.grad(&z, &mut g);
                for c in 0..d {
                    out[c] += w * g[c];
                }
            }
        }
    }
}

fn validate_field(spec: &ProblemSpec, q: &SiteField, what: &str) -> Result<()> {
    if q.agents != spec.n_agents || q.dim != spec.dim || q.sites == 0 {
        return Err(Error::config(format!(
            "{what} has shape {}x{}x{}, expected Mx{}x{}",
            q.sites, q.agents, q.dim, spec.n_agents, spec.dim
        )));
    }
    if !q.values.iter().all(|v| v.is_finite()) {
        return Err(Error::config(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Solves the distributed fixed point at every particle site of `ens`.
pub fn solve_check_a(
    spec: &ProblemSpec,
    q: &CovectorFieldDist,
    ens: &Ensemble,
    cfg: &FixedPointConfig,
) -> Result<ControlFieldDist> {
    cfg.validate()?;
    validate_field(spec, q, "covector field")?;
    if !q.same_shape(&ens.states) {
        return Err(Error::config("covector sites do not align with the ensemble"));
    }
    let nf = spec.n_agents as f64;
    let theta = cfg.damping_for(spec);
    let mut a = q.clone();
    a.values.iter_mut().for_each(|v| *v *= -nf);
    let mut target = a.clone();
    let width = spec.state_len();
    let mut trace = ResidualTrace::new();
    for _ in 0..=cfg.max_iters {
        let residual = {
            let avg = OthersAverager::new(spec, &a, cfg.inner_samples);
            target
                .values
                .par_chunks_mut(width)
                .enumerate()
                .map(|(k, t_row)| {
                    let mut g = vec![0.0; spec.dim];
                    let mut r: f64 = 0.0;
                    for i in 0..spec.n_agents {
                        let ai = a.get(k, i);
                        avg.cond_grad(i, ai, &mut g);
                        let qi = q.get(k, i);
                        for c in 0..spec.dim {
                            let t = -nf * qi[c] - nf * g[c];
                            t_row[i * spec.dim + c] = t;
                            r = r.max((ai[c] - t).abs());
                        }
                    }
                    r
                })
                .reduce(|| 0.0, f64::max)
        };
        trace.push(residual);
        if residual <= nf * cfg.tolerance {
            return Ok(ControlFieldDist {
                controls: a,
                report: trace.report(),
            });
        }
        if !residual.is_finite() {
            break;
        }
        for (x, t) in a.values.iter_mut().zip(&target.values) {
            *x = (1.0 - theta) * *x + theta * t;
        }
    }
    let rep = trace.report();
    Err(Error::NonConvergence {
        iterations: rep.iterations,
        residual: rep.residual,
    })
}

/// Evaluates `ǎ^i` at an off-support covector `q_i` with the other agents'
/// fields frozen in `avg`.
pub fn extend_check_a(
    spec: &ProblemSpec,
    avg: &OthersAverager<'_>,
    i: usize,
    q_i: &[f64],
    cfg: &FixedPointConfig,
) -> Result<Vec<f64>> {
    let nf = spec.n_agents as f64;
    let d = spec.dim;
    let mut g = vec![0.0; d];
    if let Some(slope) = avg.affine_slope(i) {
        // the fixed point is linear: a (1 + N s) = -N q - N c0
        let zero = vec![0.0; d];
        avg.cond_grad(i, &zero, &mut g);
        return Ok((0..d).map(|c| (-nf * q_i[c] - nf * g[c]) / (1.0 + nf * slope)).collect());
    }
    let theta = cfg.damping_for(spec);
    let mut a: Vec<f64> = q_i.iter().map(|v| -nf * v).collect();
    let mut t = vec![0.0; d];
    let mut last = f64::INFINITY;
    for it in 0..=cfg.max_iters {
        avg.cond_grad(i, &a, &mut g);
        let mut r: f64 = 0.0;
        for c in 0..d {
            t[c] = -nf * q_i[c] - nf * g[c];
            r = r.max((a[c] - t[c]).abs());
        }
        last = r;
        if r <= nf * cfg.tolerance {
            return Ok(a);
        }
        if !r.is_finite() {
            return Err(Error::NonConvergence { iterations: it, residual: r });
        }
        for c in 0..d {
            a[c] = (1.0 - theta) * a[c] + theta * t[c];
        }
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iters,
        residual: last,
    })
}

/// The distributed objective
/// `-Ê Σ_i (q^i·a^i + |a^i|²/2N) - Ê f^N(a)` for a tabulated control field.
///
/// The pairwise part is integrated against the product of the empirical
/// column laws; the `f_0` part is averaged over rows.
pub fn dist_objective(spec: &ProblemSpec, q: &SiteField, a: &SiteField, inner_samples: Option<usize>) -> f64 {
    let rows = dist_objective_rows(spec, q, a, inner_samples);
    rows.iter().sum::<f64>() / rows.len() as f64
}

/// Per-row terms whose mean is [`dist_objective`]. Row `k` carries agent
/// `i`'s own terms and, for each pair `i < j`, the average of `ĥ_ij` between
/// row `k`'s `a^i` and the first `inner` entries of column `j`.
pub fn dist_objective_rows(spec: &ProblemSpec, q: &SiteField, a: &SiteField, inner_samples: Option<usize>) -> Vec<f64> {
    let (n, d, m) = (spec.n_agents, spec.dim, a.sites);
    let nf = n as f64;
    let inner = inner_samples.unwrap_or(m).clamp(1, m);
    let means = a.column_means();
    (0..m)
        .into_par_iter()
        .map(|k| {
            let qk = q.row(k);
            let ak = a.row(k);
            let lin: f64 = qk.iter().zip(ak).map(|(x, y)| x * y + y * y / (2.0 * nf)).sum();
            let mut pair = 0.0;
            let mut diff = vec![0.0; d];
            for i in 0..n {
                let ai = a.get(k, i);
                for j in (i + 1)..n {
                    pair += 2.0
                        * match spec.pairwise.get(i, j) {
                            RadialProfile::Zero => 0.0,
                            RadialProfile::Quadratic { kappa } => {
                                // E|a_i - A_j|² with A_j an independent column
                                // draw, written so its row mean is exact
                                let aj = a.get(k, j);
                                let sq = dot(ai, ai) + dot(aj, aj);
                                let cross = dot(ai, &means[j * d..(j + 1) * d]);
                                0.5 * kappa * (sq - 2.0 * cross)
                            }
                            h => {
                                let mut s = 0.0;
                                for l in 0..inner {
                                    let aj = a.get(l, j);
                                    for c in 0..d {
                                        diff[c] = ai[c] - aj[c];
                                    }
                                    s += h.eval(&diff);
                                }
                                s / inner as f64
                            }
                        };
                }
            }
            let f0 = if spec.f0.is_zero() {
                0.0
            } else {
                spec.f0.value(&super::block_mean(ak, n, d))
            };
            -lin - pair / (nf * nf) - f0
        })
        .collect()
}

/// `ℋ^N(q, m)` on the ensemble's empirical laws.
pub fn hamiltonian_dist(spec: &ProblemSpec, q: &CovectorFieldDist, ens: &Ensemble, cfg: &FixedPointConfig) -> Result<f64> {
    let a = solve_check_a(spec, q, ens, cfg)?;
    Ok(dist_objective(spec, q, &a.controls, cfg.inner_samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::tests::spec;
    use crate::hamiltonian::{hamiltonian_full, solve_hat_a};
    use crate::model::ScalarCost;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(m: usize, n: usize, d: usize, scale: f64, seed: u64) -> SiteField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SiteField::from_fn(m, n, d, |_, _, out| {
            for v in out {
                *v = scale * rng.random_range(-1.0..1.0);
            }
        })
    }

    fn ens_for(q: &SiteField) -> Ensemble {
        Ensemble::new(0.0, SiteField::zeros(q.sites, q.agents, q.dim))
    }

    #[test]
    fn decoupled_check_a_is_explicit() {
        let s = spec(3, 2, 0.0, ScalarCost::Zero);
        let q = random_field(5, 3, 2, 0.5, 1);
        let a = solve_check_a(&s, &q, &ens_for(&q), &FixedPointConfig::default()).unwrap();
        for (x, y) in a.controls.values.iter().zip(&q.values) {
            assert_eq!(*x, -3.0 * y);
        }
        let h = hamiltonian_dist(&s, &q, &ens_for(&q), &FixedPointConfig::default()).unwrap();
        let expect: f64 = 1.5 * q.column_second_moments().iter().sum::<f64>();
        assert!((h - expect).abs() < 1e-12);
    }

    #[test]
    fn single_site_matches_full_information() {
        for f0 in [ScalarCost::Zero, ScalarCost::PseudoHuber { lipschitz: 1.0, delta: 0.5 }] {
            let s = spec(3, 1, 0.7, f0);
            let q = random_field(1, 3, 1, 1.0, 2);
            let cfg = FixedPointConfig::default();
            let a = solve_check_a(&s, &q, &ens_for(&q), &cfg).unwrap();
            let hat = solve_hat_a(&s, &q.values, &cfg).unwrap();
            for (x, y) in a.controls.values.iter().zip(&hat.controls) {
                assert!((x - y).abs() < 1e-9);
            }
            let hd = hamiltonian_dist(&s, &q, &ens_for(&q), &cfg).unwrap();
            let hf = hamiltonian_full(&s, &q.values, &cfg).unwrap();
            assert!((hd - hf).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetric_instance_gives_identical_fields() {
        let s = spec(4, 1, 0.5, ScalarCost::PseudoHuber { lipschitz: 1.0, delta: 1.0 });
        let base = random_field(6, 1, 1, 1.0, 3);
        let q = SiteField::from_fn(6, 4, 1, |k, _, out| out[0] = base.values[k]);
        let a = solve_check_a(&s, &q, &ens_for(&q), &FixedPointConfig::default()).unwrap();
        for k in 0..6 {
            for i in 1..4 {
                assert!((a.controls.get(k, i)[0] - a.controls.get(k, 0)[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distributed_hamiltonian_below_product_average_of_full() {
        let s = spec(3, 1, 0.8, ScalarCost::Zero);
        let (m, n) = (4, 3);
        let q = random_field(m, n, 1, 1.0, 4);
        let cfg = FixedPointConfig::default();
        let hd = hamiltonian_dist(&s, &q, &ens_for(&q), &cfg).unwrap();
        let mut total = 0.0;
        for k0 in 0..m {
            for k1 in 0..m {
                for k2 in 0..m {
                    let p = [q.get(k0, 0)[0], q.get(k1, 1)[0], q.get(k2, 2)[0]];
                    total += hamiltonian_full(&s, &p, &cfg).unwrap();
                }
            }
        }
        let avg = total / (m * m * m) as f64;
        assert!(hd <= avg + 1e-10, "{hd} > {avg}");
    }

    #[test]
    fn extension_reproduces_site_values() {
        let s = spec(3, 2, 0.6, ScalarCost::PseudoHuber { lipschitz: 1.0, delta: 1.0 });
        let q = random_field(7, 3, 2, 0.3, 5);
        let cfg = FixedPointConfig::default();
        let a = solve_check_a(&s, &q, &ens_for(&q), &cfg).unwrap();
        let avg = OthersAverager::new(&s, &a.controls, None);
        for k in [0, 3, 6] {
            for i in 0..3 {
                let e = extend_check_a(&s, &avg, i, q.get(k, i), &cfg).unwrap();
                for c in 0..2 {
                    assert!((e[c] - a.controls.get(k, i)[c]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn affine_extension_reproduces_site_values() {
        let s = spec(4, 2, 0.6, ScalarCost::Zero);
        let q = random_field(9, 4, 2, 0.3, 8);
        let cfg = FixedPointConfig::default();
        let a = solve_check_a(&s, &q, &ens_for(&q), &cfg).unwrap();
        let avg = OthersAverager::new(&s, &a.controls, None);
        assert!(avg.affine_slope(0).is_some());
        for k in 0..9 {
            for i in 0..4 {
                let e = extend_check_a(&s, &avg, i, q.get(k, i), &cfg).unwrap();
                for c in 0..2 {
                    assert!((e[c] - a.controls.get(k, i)[c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn custom_pairwise_matches_quadratic_profile() {
        let s = spec(3, 1, 0.6, ScalarCost::Zero);
        let mut c = s.clone();
        c.pairwise = crate::model::PairwiseTable::uniform(
            3,
            RadialProfile::custom("quad", |r| 0.3 * r * r, 0.6),
        );
        let q = random_field(5, 3, 1, 0.5, 6);
        let cfg = FixedPointConfig::default();
        let a = solve_check_a(&s, &q, &ens_for(&q), &cfg).unwrap();
        let b = solve_check_a(&c, &q, &ens_for(&q), &cfg).unwrap();
        for (x, y) in a.controls.values.iter().zip(&b.controls.values) {
            assert!((x - y).abs() < 1e-6);
        }
        let ha = dist_objective(&s, &q, &a.controls, None);
        let hb = dist_objective(&c, &q, &b.controls, None);
        assert!((ha - hb).abs() < 1e-6);
    }

    #[test]
    fn misaligned_sites_are_rejected() {
        let s = spec(2, 1, 0.5, ScalarCost::Zero);
        let q = random_field(3, 2, 1, 1.0, 7);
        let ens = Ensemble::new(0.0, SiteField::zeros(4, 2, 1));
        assert!(matches!(
            solve_check_a(&s, &q, &ens, &FixedPointConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
