use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_start, running_cost_rate, Ensemble, IntegratorConfig, Trajectory};
use crate::error::{Error, Result};
use crate::hamiltonian::{solve_check_a, ControlFieldDist, FixedPointConfig, SiteField};
use crate::model::ProblemSpec;

/// `q^i(x)` for agent `i` at own state `x`, with the law frozen.
pub type AgentCovectorFn<'a> = Box<dyn Fn(usize, &[f64], &mut [f64]) + Send + Sync + 'a>;

/// Supplies the covector fields `q^i = D_{m^i} 𝒱` that drive the flow.
pub trait CovectorSource: Sync {
    /// Freezes the field at time `t` against the law represented by `law`.
    fn at<'a>(&'a self, t: f64, law: &Ensemble) -> Result<AgentCovectorFn<'a>>;

    /// The field evaluated at every site of `ens`.
    fn field(&self, t: f64, ens: &Ensemble) -> Result<SiteField> {
        let q = self.at(t, ens)?;
        let (n, d) = (ens.agents(), ens.dim());
        let mut out = SiteField::zeros(ens.paths(), n, d);
        out.values
            .par_chunks_mut(n * d)
            .enumerate()
            .for_each(|(k, row)| {
                for i in 0..n {
                    q(i, ens.states.get(k, i), &mut row[i * d..(i + 1) * d]);
                }
            });
        Ok(out)
    }
}

/// Which time the covector source is evaluated at while the flow runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeConvention {
    /// The current step time `s`.
    #[default]
    StepTime,
    /// The flow's start time `t` throughout.
    Frozen,
}

/// What the observer sees at each step, before the state update.
pub struct FlowStep<'a> {
    pub step: usize,
    pub time: f64,
    pub dt: f64,
    pub ensemble: &'a Ensemble,
    pub covector: &'a SiteField,
    pub controls: &'a ControlFieldDist,
    pub covector_fn: &'a AgentCovectorFn<'a>,
}

pub type FlowObserver<'o> = dyn FnMut(&FlowStep<'_>) -> Result<()> + 'o;

#[derive(Clone, Debug)]
pub struct FlowOutput {
    pub trajectory: Trajectory,
    /// Picard iterations used at each step.
    pub iterations: Vec<usize>,
}

/// Interacting particle approximation of the McKean–Vlasov flow: at each
/// step the covector field is frozen on the pre-step ensemble, `ǎ` is solved
/// on it, and every path moves with its own agents' controls.
pub fn simulate_check_flow(
    spec: &ProblemSpec,
    source: &dyn CovectorSource,
    ens0: &Ensemble,
    cfg: &IntegratorConfig,
    fp: &FixedPointConfig,
    convention: TimeConvention,
    mut observer: Option<&mut FlowObserver<'_>>,
) -> Result<FlowOutput> {
    cfg.validate()?;
    check_start(spec, ens0)?;
    log::debug!("check flow: covector evaluated at {convention:?}");
    let nd = spec.state_len();
    let m = ens0.paths();
    let dt = (spec.horizon - ens0.time) / cfg.n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let noise = cfg.noise();
    let mut ens = ens0.clone();
    let mut snapshots = vec![ens.clone()];
    let mut running_cost = vec![0.0; m];
    let mut iterations = Vec::with_capacity(cfg.n_steps);
    for step in 0..cfg.n_steps {
        let t = ens0.time + step as f64 * dt;
        let t_q = match convention {
            TimeConvention::StepTime => t,
            TimeConvention::Frozen => ens0.time,
        };
        let qfn = source.at(t_q, &ens).map_err(|e| e.at_step(step))?;
        let q = {
            let (n, d) = (spec.n_agents, spec.dim);
            let mut out = SiteField::zeros(m, n, d);
            out.values
                .par_chunks_mut(nd)
                .enumerate()
                .for_each(|(k, row)| {
                    for i in 0..n {
                        qfn(i, ens.states.get(k, i), &mut row[i * d..(i + 1) * d]);
                    }
                });
            out
        };
        if !q.values.iter().all(|v| v.is_finite()) {
            return Err(Error::config("covector source returned non-finite values").at_step(step));
        }
        let ctrl = solve_check_a(spec, &q, &ens, fp).map_err(|e| e.at_step(step))?;
        iterations.push(ctrl.report.iterations);
        if let Some(obs) = observer.as_deref_mut() {
            obs(&FlowStep {
                step,
                time: t,
                dt,
                ensemble: &ens,
                covector: &q,
                controls: &ctrl,
                covector_fn: &qfn,
            })
            .map_err(|e| e.at_step(step))?;
        }
        let a = &ctrl.controls;
        running_cost
            .par_iter_mut()
            .enumerate()
            .for_each(|(k, c)| *c += running_cost_rate(spec, a.row(k)) * dt);
        ens.states
            .values
            .par_chunks_mut(nd)
            .enumerate()
            .for_each(|(k, row)| {
                let mut z = vec![0.0; nd];
                noise.standard_normals(k, step as u64, &mut z);
                let ak = a.row(k);
                for c in 0..nd {
                    row[c] += ak[c] * dt + sqrt_dt * z[c];
                }
            });
        ens.time = ens0.time + (step + 1) as f64 * dt;
        if step + 1 != cfg.n_steps && cfg.records(step + 1) {
            snapshots.push(ens.clone());
        }
    }
    snapshots.push(ens);
    Ok(FlowOutput {
        trajectory: Trajectory {
            snapshots,
            running_cost,
        },
        iterations,
    })
}
