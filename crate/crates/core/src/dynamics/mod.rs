//! Euler–Maruyama simulation of `dX^i = α^i dt + dW^i` under full-information
//! or distributed feedback, and of the McKean–Vlasov particle flow driven by
//! the distributed optimizer.

mod flow;
mod noise;

pub use flow::{simulate_check_flow, AgentCovectorFn, CovectorSource, FlowOutput, FlowStep, TimeConvention};
pub use noise::NoiseSource;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{eval_fn, FixedPointConfig, SiteField};
use crate::model::{InitialLaw, ProblemSpec};

/// `M` samples of the `N`-agent state at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub time: f64,
    pub states: SiteField,
}

impl Ensemble {
    pub fn new(time: f64, states: SiteField) -> Self {
        Ensemble { time, states }
    }

    /// Draws `paths` samples from the product law. Antithetic mode pairs
    /// each even path with its reflection through the law's transform.
    pub fn sample(law: &InitialLaw, time: f64, paths: usize, noise: &NoiseSource) -> Result<Self> {
        if paths == 0 {
            return Err(Error::config("need at least one path"));
        }
        let (n, d) = (law.n_agents(), law.dim());
        let mut states = SiteField::zeros(paths, n, d);
        states
            .values
            .par_chunks_mut(n * d)
            .enumerate()
            .for_each(|(k, row)| {
                let mut z = vec![0.0; n * d];
                noise.standard_normals(k, noise::INIT_STEP, &mut z);
                for i in 0..n {
                    law.agent(i)
                        .transform(&z[i * d..(i + 1) * d], &mut row[i * d..(i + 1) * d]);
                }
            });
        Ok(Ensemble { time, states })
    }

    /// Every path at the same point.
    pub fn from_point(time: f64, point: &[f64], paths: usize, n: usize, d: usize) -> Result<Self> {
        if point.len() != n * d {
            return Err(Error::config("point does not have length N d"));
        }
        let values = point.iter().cloned().cycle().take(paths * n * d).collect();
        Ok(Ensemble {
            time,
            states: SiteField::from_values(paths, n, d, values)?,
        })
    }

    pub fn paths(&self) -> usize {
        self.states.sites
    }

    pub fn agents(&self) -> usize {
        self.states.agents
    }

    pub fn dim(&self) -> usize {
        self.states.dim
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.states.row(k)
    }
}

/// Uniform time grid and randomness for one simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub n_steps: usize,
    pub seed: u64,
    pub antithetic: bool,
    /// Keep every `k`-th intermediate ensemble; `None` keeps only the ends.
    pub record_every: Option<usize>,
}

impl IntegratorConfig {
    pub fn new(n_steps: usize, seed: u64) -> Self {
        IntegratorConfig {
            n_steps,
            seed,
            antithetic: false,
            record_every: None,
        }
    }

    pub fn antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn record_every(mut self, stride: usize) -> Self {
        self.record_every = Some(stride.max(1));
        self
    }

    pub fn noise(&self) -> NoiseSource {
        NoiseSource::new(self.seed, self.antithetic)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::config("n_steps must be at least 1"));
        }
        Ok(())
    }

    pub(crate) fn records(&self, step: usize) -> bool {
        step == 0 || step == self.n_steps || self.record_every.is_some_and(|s| step % s == 0)
    }
}

/// Feedback that may look at the whole state.
pub trait FullInfoPolicy: Sync {
    fn control(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Feedback where agent `i` sees only its own state.
pub trait DistributedPolicy: Sync {
    fn control(&self, agent: usize, t: f64, x_i: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Wraps a closure as a full-information policy.
pub struct FullInfoFn<F>(pub F);

impl<F> FullInfoPolicy for FullInfoFn<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    fn control(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.0)(t, x, out);
        Ok(())
    }
}

/// Wraps a closure as a distributed policy.
pub struct DistributedFn<F>(pub F);

impl<F> DistributedPolicy for DistributedFn<F>
where
    F: Fn(usize, f64, &[f64], &mut [f64]) + Sync,
{
    fn control(&self, agent: usize, t: f64, x_i: &[f64], out: &mut [f64]) -> Result<()> {
        (self.0)(agent, t, x_i, out);
        Ok(())
    }
}

/// `α ≡ 0`.
pub struct ZeroPolicy;

impl DistributedPolicy for ZeroPolicy {
    fn control(&self, _: usize, _: f64, _: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

/// `α^i ≡ v` for every agent.
pub struct ConstantPolicy(pub Vec<f64>);

impl DistributedPolicy for ConstantPolicy {
    fn control(&self, _: usize, _: f64, _: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.0);
        Ok(())
    }
}

pub enum PolicyHandle<'a> {
    FullInfo(&'a dyn FullInfoPolicy),
    Distributed(&'a dyn DistributedPolicy),
    /// Re-solves `ǎ` on the current ensemble at every step.
    CheckFlow {
        source: &'a dyn CovectorSource,
        fixed_point: FixedPointConfig,
        convention: TimeConvention,
    },
}

impl PolicyHandle<'_> {
    fn eval(&self, spec: &ProblemSpec, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            PolicyHandle::FullInfo(p) => p.control(t, x, out),
            PolicyHandle::Distributed(p) => {
                let d = spec.dim;
                for i in 0..spec.n_agents {
                    p.control(i, t, &x[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d])?;
                }
                Ok(())
            }
            PolicyHandle::CheckFlow { .. } => unreachable!("flow policies are simulated jointly"),
        }
    }
}

/// Simulation output: recorded ensembles (always the first and the last) and
/// the realized running cost of each path.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub snapshots: Vec<Ensemble>,
    pub running_cost: Vec<f64>,
}

impl Trajectory {
    pub fn terminal(&self) -> &Ensemble {
        self.snapshots.last().expect("trajectory is never empty")
    }
}

/// `(1/2N) Σ|α^i|² + f^N(α)`.
pub fn running_cost_rate(spec: &ProblemSpec, alpha: &[f64]) -> f64 {
    let nf = spec.n_agents as f64;
    alpha.iter().map(|v| v * v).sum::<f64>() / (2.0 * nf) + eval_fn(spec, alpha)
}

pub(crate) fn check_start(spec: &ProblemSpec, ens0: &Ensemble) -> Result<()> {
    if ens0.agents() != spec.n_agents || ens0.dim() != spec.dim {
        return Err(Error::config("ensemble shape does not match the problem"));
    }
    if (ens0.time - spec.start_time).abs() > 1e-12 {
        return Err(Error::config(format!(
            "ensemble time {} differs from the start time {}",
            ens0.time, spec.start_time
        )));
    }
    Ok(())
}

/// Euler–Maruyama with left-endpoint running cost.
pub fn simulate(spec: &ProblemSpec, policy: &PolicyHandle<'_>, ens0: &Ensemble, cfg: &IntegratorConfig) -> Result<Trajectory> {
    cfg.validate()?;
    check_start(spec, ens0)?;
    if let PolicyHandle::CheckFlow {
        source,
        fixed_point,
        convention,
    } = policy
    {
        let out = simulate_check_flow(spec, *source, ens0, cfg, fixed_point, *convention, None)?;
        return Ok(out.trajectory);
    }
    let nd = spec.state_len();
    let dt = (spec.horizon - ens0.time) / cfg.n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let noise = cfg.noise();
    let recorded: Vec<usize> = (0..=cfg.n_steps).filter(|s| cfg.records(*s)).collect();
    let per_path: Vec<(Vec<f64>, f64)> = (0..ens0.paths())
        .into_par_iter()
        .map(|k| -> Result<(Vec<f64>, f64)> {
            let mut x = ens0.row(k).to_vec();
            let mut alpha = vec![0.0; nd];
            let mut z = vec![0.0; nd];
            let mut cost = 0.0;
            let mut rec = Vec::with_capacity(recorded.len() * nd);
            rec.extend_from_slice(&x);
            for step in 0..cfg.n_steps {
                let t = ens0.time + step as f64 * dt;
                policy.eval(spec, t, &x, &mut alpha).map_err(|e| e.at_step(step))?;
                if !alpha.iter().all(|v| v.is_finite()) {
                    return Err(Error::config("policy returned non-finite controls").at_step(step));
                }
                cost += running_cost_rate(spec, &alpha) * dt;
                noise.standard_normals(k, step as u64, &mut z);
                for c in 0..nd {
                    x[c] += alpha[c] * dt + sqrt_dt * z[c];
                }
                if step + 1 != cfg.n_steps && cfg.records(step + 1) {
                    rec.extend_from_slice(&x);
                }
            }
            rec.extend_from_slice(&x);
            Ok((rec, cost))
        })
        .collect::<Result<_>>()?;
    let m = ens0.paths();
    let snapshots = recorded
        .iter()
        .enumerate()
        .map(|(r, &step)| {
            let mut values = Vec::with_capacity(m * nd);
            for (rec, _) in &per_path {
                values.extend_from_slice(&rec[r * nd..(r + 1) * nd]);
            }
            Ensemble {
                time: ens0.time + step as f64 * dt,
                states: SiteField {
                    sites: m,
                    agents: spec.n_agents,
                    dim: spec.dim,
                    values,
                },
            }
        })
        .collect();
    Ok(Trajectory {
        snapshots,
        running_cost: per_path.into_iter().map(|(_, c)| c).collect(),
    })
}

/// Empirical per-agent, per-coordinate variances at each recorded time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceTable {
    pub times: Vec<f64>,
    /// `[time][agent][coord]`, flattened.
    pub variances: Vec<f64>,
    pub agents: usize,
    pub dim: usize,
}

impl VarianceTable {
    pub fn at(&self, r: usize, i: usize) -> &[f64] {
        let o = (r * self.agents + i) * self.dim;
        &self.variances[o..o + self.dim]
    }

    /// Largest variance over agents and coordinates at recorded time `r`.
    pub fn max_at(&self, r: usize) -> f64 {
        let w = self.agents * self.dim;
        self.variances[r * w..(r + 1) * w].iter().cloned().fold(0.0, f64::max)
    }
}

pub fn variance_along_flow(snapshots: &[Ensemble]) -> Result<VarianceTable> {
    let first = snapshots.first().ok_or_else(|| Error::config("empty trajectory"))?;
    let (n, d) = (first.agents(), first.dim());
    let mut variances = Vec::with_capacity(snapshots.len() * n * d);
    for ens in snapshots {
        let m = ens.paths() as f64;
        let mean = ens.states.column_means();
        let mut var = vec![0.0; n * d];
        for k in 0..ens.paths() {
            for (c, v) in ens.row(k).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2);
            }
        }
        let denom = if ens.paths() > 1 { m - 1.0 } else { 1.0 };
        variances.extend(var.into_iter().map(|v| v / denom));
    }
    Ok(VarianceTable {
        times: snapshots.iter().map(|e| e.time).collect(),
        variances,
        agents: n,
        dim: d,
    })
}

/// Propagated Poincaré constant `(e^{2C(s-t)} - 1)/(2C) + c e^{2C(s-t)}`
/// of the flow law after time `s - t`.
pub fn propagated_poincare(c_p: f64, c_g: f64, elapsed: f64) -> f64 {
    let e = (2.0 * c_g * elapsed).exp();
    let growth = if c_g.abs() < 1e-12 {
        elapsed
    } else {
        (e - 1.0) / (2.0 * c_g)
    };
    growth + c_p * e
}
