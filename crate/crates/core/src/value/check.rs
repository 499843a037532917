use rayon::prelude::*;

use super::{ValueEstimate, ValueMethod};
use crate::dynamics::{
    running_cost_rate, simulate_check_flow, CovectorSource, Ensemble, FlowStep, IntegratorConfig, TimeConvention,
};
use crate::error::{Error, Result};
use crate::hamiltonian::{extend_check_a, FixedPointConfig, OthersAverager};
use crate::model::ProblemSpec;
use crate::numerics::{Estimate, BATCHES};

/// Label for the evaluation paths' noise, independent of the flow's.
const EVAL_STREAM: u64 = 0x6576_616c;

#[derive(Clone, Debug)]
pub struct CheckPolicyResult {
    pub estimate: ValueEstimate,
    /// Picard iterations per flow step.
    pub flow_iterations: Vec<usize>,
}

/// Cost of the distributed policy `α^i(s, x) = ǎ^i(q(s, ·), m_s)(x)` along
/// the particle flow started from `ens0`.
///
/// The flow ensemble defines the laws `m_s`. The cost is measured on
/// `eval_paths` fresh independent paths, where each agent's control is the
/// off-support extension of `ǎ^i` at its own state, so the estimate is an
/// unbiased Monte Carlo evaluation of a distributed policy.
pub fn build_check_policy(
    spec: &ProblemSpec,
    source: &dyn CovectorSource,
    ens0: &Ensemble,
    eval_paths: usize,
    cfg: &IntegratorConfig,
    fp: &FixedPointConfig,
    convention: TimeConvention,
) -> Result<CheckPolicyResult> {
    let noise = cfg.noise().derive(EVAL_STREAM);
    let mut eval = Ensemble::sample(&spec.initial_law, ens0.time, eval_paths, &noise)?;
    let mut cost = vec![0.0; eval_paths];
    let (n, d) = (spec.n_agents, spec.dim);
    let nd = n * d;
    let mut observer = |st: &FlowStep<'_>| -> Result<()> {
        let avg = OthersAverager::new(spec, &st.controls.controls, fp.inner_samples);
        let sqrt_dt = st.dt.sqrt();
        let step = st.step as u64;
        let results: Vec<Result<()>> = eval
            .states
            .values
            .par_chunks_mut(nd)
            .zip(cost.par_iter_mut())
            .enumerate()
            .map(|(k, (row, c))| {
                let mut alpha = vec![0.0; nd];
                let mut q = vec![0.0; d];
                for i in 0..n {
                    (st.covector_fn)(i, &row[i * d..(i + 1) * d], &mut q);
                    let a = extend_check_a(spec, &avg, i, &q, fp)?;
                    alpha[i * d..(i + 1) * d].copy_from_slice(&a);
                }
                *c += running_cost_rate(spec, &alpha) * st.dt;
                let mut z = vec![0.0; nd];
                noise.standard_normals(k, step, &mut z);
                for r in 0..nd {
                    row[r] += alpha[r] * st.dt + sqrt_dt * z[r];
                }
                Ok(())
            })
            .collect();
        results.into_iter().collect::<Result<()>>()?;
        eval.time = st.time + st.dt;
        Ok(())
    };
    let flow = simulate_check_flow(spec, source, ens0, cfg, fp, convention, Some(&mut observer))?;
    let totals: Vec<f64> = (0..eval_paths)
        .into_par_iter()
        .map(|k| cost[k] + spec.terminal.value(eval.row(k)))
        .collect();
    if !totals.iter().all(|v| v.is_finite()) {
        return Err(Error::config("check-policy evaluation produced non-finite costs"));
    }
    Ok(CheckPolicyResult {
        estimate: ValueEstimate::from_estimate(Estimate::batch_means(&totals, BATCHES), eval_paths, ValueMethod::Mc),
        flow_iterations: flow.iterations,
    })
}
