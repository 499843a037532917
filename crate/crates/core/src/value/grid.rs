use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{AgentCovectorFn, CovectorSource, Ensemble};
use crate::error::{Error, Result};
use crate::hamiltonian::{eval_fn, solve_hat_a, FixedPointConfig};
use crate::model::ProblemSpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeStep {
    /// Largest stable step times `safety`, recomputed every step.
    Auto { safety: f64 },
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Nodes per axis.
    pub points: usize,
    /// Box half-width per axis; `None` uses three standard deviations of
    /// the uncontrolled state at the horizon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    pub time_step: TimeStep,
    /// Number of stored time slices (at least the two ends).
    pub snapshots: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            points: 61,
            half_width: None,
            time_step: TimeStep::Auto { safety: 0.9 },
            snapshots: 21,
        }
    }
}

/// Tabulated `V(t, ·)` on a tensor grid.
#[derive(Clone, Debug)]
pub struct GridSolution {
    pub lower: Vec<f64>,
    pub spacing: f64,
    pub points: usize,
    /// Ascending times of the stored slices.
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub steps_taken: usize,
}

struct Grid {
    dims: usize,
    points: usize,
    lower: Vec<f64>,
    h: f64,
    strides: Vec<usize>,
}

impl Grid {
    fn len(&self) -> usize {
        self.points.pow(self.dims as u32)
    }

    fn coords(&self, node: usize, out: &mut [f64]) {
        let mut r = node;
        for k in 0..self.dims {
            let ik = r % self.points;
            r /= self.points;
            out[k] = self.lower[k] + ik as f64 * self.h;
        }
    }

    fn index(&self, node: usize, k: usize) -> usize {
        (node / self.strides[k]) % self.points
    }

    /// Neighbour along axis `k`, reflected at the boundary.
    fn neighbour(&self, node: usize, k: usize, up: bool) -> usize {
        let ik = self.index(node, k);
        let last = self.points - 1;
        let target = match (up, ik) {
            (true, i) if i == last => last - 1,
            (true, i) => i + 1,
            (false, 0) => 1,
            (false, i) => i - 1,
        };
        node + target * self.strides[k] - ik * self.strides[k]
    }
}

/// Explicit monotone scheme for `-∂_t V - ½ΔV + H^N(DV) = 0` backward from
/// `V(T) = g^N`, using `-H(p) = min_a {a·p + |a|²/2N + f^N(a)}` with the
/// minimizer taken at the central gradient. The transport term is central
/// where the cell Péclet number `|a_k| h` is at most one and upwinded
/// elsewhere. Reflecting (Neumann) boundary.
pub fn grid_hjb_full(spec: &ProblemSpec, grid_cfg: &GridConfig, fp: &FixedPointConfig) -> Result<GridSolution> {
    let dims = spec.state_len();
    if dims > 3 {
        return Err(Error::Unsupported(format!("grid HJB limited to N·d ≤ 3, got {dims}")));
    }
    if grid_cfg.points < 3 {
        return Err(Error::config("grid needs at least 3 points per axis"));
    }
    let center = spec.initial_law.mean();
    let half = match grid_cfg.half_width {
        Some(w) if w > 0.0 => w,
        Some(_) => return Err(Error::config("grid half-width must be positive")),
        None => {
            let var0 = spec
                .initial_law
                .agents()
                .iter()
                .flat_map(|a| {
                    let d = a.dim();
                    let c = a.covariance();
                    (0..d).map(move |k| c[k * d + k])
                })
                .fold(0.0, f64::max);
            3.0 * (var0 + spec.elapsed()).sqrt()
        }
    };
    let points = grid_cfg.points;
    let h = 2.0 * half / (points - 1) as f64;
    let g = Grid {
        dims,
        points,
        lower: center.iter().map(|c| c - half).collect(),
        h,
        strides: (0..dims).map(|k| points.pow(k as u32)).collect(),
    };
    let nodes = g.len();
    let nf = spec.n_agents as f64;

    let mut v: Vec<f64> = (0..nodes)
        .into_par_iter()
        .map(|node| {
            let mut x = vec![0.0; dims];
            g.coords(node, &mut x);
            spec.terminal.value(&x)
        })
        .collect();
    let mut times = vec![spec.horizon];
    let mut slices = vec![v.clone()];
    let snapshots = grid_cfg.snapshots.max(2);
    let slice_gap = spec.elapsed() / (snapshots - 1) as f64;
    let mut next_slice = spec.horizon - slice_gap;

    let mut t = spec.horizon;
    let mut steps = 0usize;
    let mut controls = vec![0.0; nodes * dims];
    let diffusion: f64 = dims as f64 / (h * h);
    while t > spec.start_time + 1e-14 {
        // optimal controls at the central gradient
        let rates: Vec<f64> = controls
            .par_chunks_mut(dims)
            .enumerate()
            .map(|(node, a)| -> Result<f64> {
                let mut p = vec![0.0; dims];
                for k in 0..dims {
                    let up = g.neighbour(node, k, true);
                    let dn = g.neighbour(node, k, false);
                    p[k] = (v[up] - v[dn]) / (2.0 * h);
                }
                let hat = solve_hat_a(spec, &p, fp)?;
                a.copy_from_slice(&hat.controls);
                let running = a.iter().map(|x| x * x).sum::<f64>() / (2.0 * nf) + eval_fn(spec, a);
                Ok(running)
            })
            .collect::<Result<_>>()?;
        let amax = controls
            .chunks(dims)
            .map(|a| a.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let max_dt = 1.0 / (diffusion + amax / h);
        let mut dt = match grid_cfg.time_step {
            TimeStep::Auto { safety } => safety.clamp(1e-3, 1.0) * max_dt,
            TimeStep::Fixed(dt) => {
                if dt > max_dt * (1.0 + 1e-12) {
                    return Err(Error::Cfl { dt, max_dt });
                }
                dt
            }
        };
        dt = dt.min(t - spec.start_time);
        let v_old = &v;
        let v_new: Vec<f64> = (0..nodes)
            .into_par_iter()
            .map(|node| {
                let a = &controls[node * dims..(node + 1) * dims];
                let mut lap = 0.0;
                let mut transport = 0.0;
                for k in 0..dims {
                    let up = v_old[g.neighbour(node, k, true)];
                    let dn = v_old[g.neighbour(node, k, false)];
                    let c = v_old[node];
                    lap += (up - 2.0 * c + dn) / (h * h);
                    // central differences keep the scheme monotone while |a| h ≤ 1
                    transport += if a[k].abs() * h <= 1.0 {
                        a[k] * (up - dn) / (2.0 * h)
                    } else if a[k] > 0.0 {
                        a[k] * (up - c) / h
                    } else {
                        a[k] * (c - dn) / h
                    };
                }
                v_old[node] + dt * (0.5 * lap + transport + rates[node])
            })
            .collect();
        v = v_new;
        t -= dt;
        steps += 1;
        if t <= next_slice + 1e-12 || t <= spec.start_time + 1e-14 {
            times.push(t.max(spec.start_time));
            slices.push(v.clone());
            while next_slice >= t - 1e-12 {
                next_slice -= slice_gap;
            }
        }
    }
    times.reverse();
    slices.reverse();
    if let Some(t0) = times.first_mut() {
        *t0 = spec.start_time;
    }
    Ok(GridSolution {
        lower: g.lower,
        spacing: h,
        points,
        times,
        values: slices,
        steps_taken: steps,
    })
}

impl GridSolution {
    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.lower
            .iter()
            .map(|l| l + self.spacing * (self.points - 1) as f64)
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let up = self.upper();
        x.iter()
            .zip(self.lower.iter().zip(&up))
            .all(|(v, (lo, hi))| *v >= lo - 1e-12 && *v <= hi + 1e-12)
    }

    /// Multilinear interpolation on slice `r`.
    fn interp(&self, r: usize, x: &[f64]) -> f64 {
        let dims = self.dims();
        let mut base = 0usize;
        let mut frac = vec![0.0; dims];
        let mut stride = 1usize;
        let mut strides = vec![0; dims];
        for k in 0..dims {
            let u = ((x[k] - self.lower[k]) / self.spacing).clamp(0.0, (self.points - 1) as f64);
            let i = (u.floor() as usize).min(self.points - 2);
            frac[k] = u - i as f64;
            base += i * stride;
            strides[k] = stride;
            stride *= self.points;
        }
        let vals = &self.values[r];
        let mut acc = 0.0;
        for corner in 0..(1usize << dims) {
            let mut w = 1.0;
            let mut node = base;
            for k in 0..dims {
                if corner >> k & 1 == 1 {
                    w *= frac[k];
                    node += strides[k];
                } else {
                    w *= 1.0 - frac[k];
                }
            }
            acc += w * vals[node];
        }
        acc
    }

    /// `V(t, x)`, linear in time between stored slices.
    pub fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        if !self.contains(x) {
            return Err(Error::config(format!("point {x:?} lies outside the grid box")));
        }
        Ok(self.value_clamped(t, x))
    }

    /// `DV(t, x)` by central differences one node apart, with `x` clamped
    /// into the box.
    pub fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let up = self.upper();
        let h = self.spacing;
        let mut y: Vec<f64> = x
            .iter()
            .zip(self.lower.iter().zip(&up))
            .map(|(v, (lo, hi))| v.clamp(lo + h, hi - h))
            .collect();
        for k in 0..y.len() {
            let c = y[k];
            y[k] = c + h;
            let fp = self.value_clamped(t, &y);
            y[k] = c - h;
            let fm = self.value_clamped(t, &y);
            y[k] = c;
            out[k] = (fp - fm) / (2.0 * h);
        }
    }

    fn value_clamped(&self, t: f64, x: &[f64]) -> f64 {
        let n = self.times.len();
        let r = self.times.partition_point(|s| *s < t).clamp(1, n - 1);
        let (t0, t1) = (self.times[r - 1], self.times[r]);
        let w = if t1 > t0 { ((t - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 0.0 };
        (1.0 - w) * self.interp(r - 1, x) + w * self.interp(r, x)
    }

    /// Smallest second difference along any grid line of slice `r`,
    /// skipping nodes within `margin` nodes of the boundary (where the
    /// reflecting condition bends the solution).
    pub fn min_second_difference(&self, r: usize, margin: usize) -> f64 {
        let dims = self.dims();
        let vals = &self.values[r];
        let mut worst = f64::INFINITY;
        let total = self.points.pow(dims as u32);
        for node in 0..total {
            let mut stride = 1;
            for _ in 0..dims {
                let i = (node / stride) % self.points;
                let inner = (0..dims).all(|k| {
                    let ik = (node / self.points.pow(k as u32)) % self.points;
                    ik >= margin && ik + margin < self.points
                });
                if inner && i > 0 && i + 1 < self.points {
                    let d2 = vals[node + stride] - 2.0 * vals[node] + vals[node - stride];
                    worst = worst.min(d2);
                }
                stride *= self.points;
            }
        }
        worst
    }
}

/// `q^i(x) = Ê[D_{x_i} V(t, x, Y^{-i})]` for a grid value, with the other
/// agents' states `Y^{-i}` taken from the first `inner` rows of the law's
/// ensemble.
pub struct GridCovector<'g> {
    pub grid: &'g GridSolution,
    pub inner: usize,
}

impl CovectorSource for GridCovector<'_> {
    fn at<'a>(&'a self, t: f64, law: &Ensemble) -> Result<AgentCovectorFn<'a>> {
        let (n, d) = (law.agents(), law.dim());
        if n * d != self.grid.dims() {
            return Err(Error::config("ensemble does not match the grid dimension"));
        }
        let inner = self.inner.clamp(1, law.paths());
        let rows: Vec<Vec<f64>> = (0..inner).map(|k| law.row(k).to_vec()).collect();
        let grid = self.grid;
        Ok(Box::new(move |i, x, out| {
            out.fill(0.0);
            let mut y = vec![0.0; n * d];
            let mut g = vec![0.0; n * d];
            for row in &rows {
                y.copy_from_slice(row);
                y[i * d..(i + 1) * d].copy_from_slice(x);
                grid.gradient(t, &y, &mut g);
                for c in 0..d {
                    out[c] += g[i * d + c] / inner as f64;
                }
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgentLaw, InitialLaw, PairwiseTable, RadialProfile, ScalarCost, TerminalCost};
    use crate::value::riccati_full;

    fn lq2(kappa: f64) -> ProblemSpec {
        ProblemSpec::new(
            2,
            1,
            1.0,
            0.0,
            ScalarCost::Zero,
            PairwiseTable::uniform(2, RadialProfile::Quadratic { kappa }),
            TerminalCost::quadratic_scaled(2, 1, 1.0),
            InitialLaw::iid(2, AgentLaw::Dirac { point: vec![0.0] }).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_costs_give_zero_value() {
        let mut s = lq2(0.0);
        s.terminal = TerminalCost::quadratic_scaled(2, 1, 0.0);
        let sol = grid_hjb_full(&s, &GridConfig { points: 21, ..Default::default() }, &FixedPointConfig::default()).unwrap();
        assert!(sol.values.iter().all(|v| v.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn matches_riccati_with_interaction() {
        let s = lq2(0.5);
        let cfg = GridConfig {
            points: 81,
            half_width: Some(5.0),
            ..Default::default()
        };
        let grid = grid_hjb_full(&s, &cfg, &FixedPointConfig::default()).unwrap();
        let ric = riccati_full(&s, 400).unwrap();
        for x in [[0.0, 0.0], [0.5, -0.5], [1.0, 0.3]] {
            let a = grid.value(0.0, &x).unwrap();
            let b = ric.value(0.0, &x);
            assert!((a - b).abs() <= 0.01 * b.abs(), "{x:?}: {a} vs {b}");
        }
        assert!(grid.min_second_difference(0, 10) >= -1e-8);
    }

    #[test]
    fn grid_covector_matches_riccati_covector() {
        let s = lq2(0.5);
        let cfg = GridConfig {
            points: 81,
            half_width: Some(5.0),
            ..Default::default()
        };
        let grid = grid_hjb_full(&s, &cfg, &FixedPointConfig::default()).unwrap();
        let ric = riccati_full(&s, 400).unwrap();
        let states = crate::hamiltonian::SiteField::from_fn(3, 2, 1, |k, i, out| out[0] = 0.4 * k as f64 - 0.3 * i as f64);
        let ens = Ensemble::new(0.0, states);
        let a = GridCovector { grid: &grid, inner: 3 }.field(0.0, &ens).unwrap();
        let b = ric.field(0.0, &ens).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 5e-3, "{x} vs {y}");
        }
    }

    #[test]
    fn oversized_fixed_step_reports_cfl() {
        let s = lq2(0.0);
        let cfg = GridConfig {
            points: 41,
            time_step: TimeStep::Fixed(0.1),
            ..Default::default()
        };
        match grid_hjb_full(&s, &cfg, &FixedPointConfig::default()) {
            Err(Error::Cfl { dt, max_dt }) => assert!(dt == 0.1 && max_dt < 0.1),
            other => panic!("expected CFL error, got {other:?}"),
        }
    }

    #[test]
    fn too_many_dimensions_are_refused() {
        let s = crate::value::test_support::lq(4, 1, 0.0, 1.0, AgentLaw::Dirac { point: vec![0.0] });
        assert!(matches!(
            grid_hjb_full(&s, &GridConfig::default(), &FixedPointConfig::default()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn outside_points_are_errors() {
        let s = lq2(0.0);
        let sol = grid_hjb_full(&s, &GridConfig { points: 21, ..Default::default() }, &FixedPointConfig::default()).unwrap();
        assert!(sol.value(0.0, &[100.0, 0.0]).is_err());
    }
}
