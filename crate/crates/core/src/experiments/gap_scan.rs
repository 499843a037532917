use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::bounds::{
    bound_report, check_gronwall_eq, estimate_errors_lq, BoundInputs, BoundReport, ErrorEstimates, GronwallTable,
};
use crate::dynamics::{simulate_check_flow, CovectorSource, Ensemble, IntegratorConfig, NoiseSource};
use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::numerics::{linear_fit, Estimate};
use crate::value::{
    build_check_policy, grid_hjb_full, lift_value, riccati_full, solve_dist_lq, GridCovector, GridSolution,
    RiccatiSolution, ValueEstimate, ValueFunction, RICCATI_STEPS,
};

/// Stream labels for the per-`N` randomness.
const FLOW_STREAM: u64 = 0x666c_6f77;
const ERROR_STREAM: u64 = 0x6572_7273;

/// Largest state dimension `N·d` the grid solver is used for.
pub const MAX_GRID_DIMS: usize = 3;

/// Which distributed upper bound the gap column is taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapSource {
    Affine,
    Check,
}

/// One value of `N` in a gap scan. Missing values stay `None`; a failed row
/// carries its error message and exit code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub n: usize,
    pub v_full: Option<ValueEstimate>,
    pub v_dist_affine: Option<ValueEstimate>,
    pub affine_converged: Option<bool>,
    pub v_dist_check: Option<ValueEstimate>,
    pub gap: Option<Estimate>,
    pub gap_source: Option<GapSource>,
    /// `V_dist_check - V_full`, kept alongside the headline gap.
    pub check_gap: Option<Estimate>,
    pub bounds: Option<BoundReport>,
    pub errors: Option<ErrorEstimates>,
    pub gronwall: Option<GronwallTable>,
    pub wall_ms: u64,
    pub error: Option<String>,
    pub exit_code: i32,
}

impl GapRecord {
    pub(crate) fn empty(n: usize) -> Self {
        GapRecord {
            n,
            v_full: None,
            v_dist_affine: None,
            affine_converged: None,
            v_dist_check: None,
            gap: None,
            gap_source: None,
            check_gap: None,
            bounds: None,
            errors: None,
            gronwall: None,
            wall_ms: 0,
            error: None,
            exit_code: 0,
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    pub fn rhs_theorem(&self) -> Option<f64> {
        self.bounds.as_ref().map(|b| b.rhs_theorem)
    }
}

/// Least-squares slope of `ln gap` on `ln N` over rows with a positive gap.
pub fn gap_slope(records: &[GapRecord]) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter_map(|r| r.gap.filter(|g| g.value > 0.0).map(|g| ((r.n as f64).ln(), g.value.ln())))
        .unzip();
    linear_fit(&x, &y).map(|(slope, _)| slope)
}

/// Seed of the randomness used at `N`, independent across `N`.
pub fn seed_for(seed: u64, n: usize) -> u64 {
    NoiseSource::new(seed, false).derive(n as u64).seed()
}

enum FullValue {
    Riccati(RiccatiSolution),
    Grid(GridSolution),
}

impl FullValue {
    fn solve(spec: &ProblemSpec, cfg: &RunConfig) -> Result<Self> {
        if spec.lq_form().is_some() {
            Ok(FullValue::Riccati(riccati_full(spec, RICCATI_STEPS)?))
        } else if spec.state_len() <= MAX_GRID_DIMS {
            Ok(FullValue::Grid(grid_hjb_full(spec, &cfg.grid, &cfg.fixed_point)?))
        } else {
            Err(Error::Unsupported(format!(
                "no full-information solver for a non-LQ instance with N·d = {} > {MAX_GRID_DIMS}",
                spec.state_len()
            )))
        }
    }

    fn value(&self, spec: &ProblemSpec) -> Result<ValueEstimate> {
        let (vf, method) = match self {
            FullValue::Riccati(s) => (ValueFunction::Riccati(s), crate::value::ValueMethod::Riccati),
            FullValue::Grid(g) => (ValueFunction::Grid(g), crate::value::ValueMethod::Grid),
        };
        Ok(ValueEstimate::exact(lift_value(vf, spec.start_time, &spec.initial_law)?, method))
    }
}

fn scan_one(cfg: &RunConfig, n: usize, rec: &mut GapRecord) -> Result<()> {
    let spec = cfg.instance.build(n)?;
    let seed = seed_for(cfg.seed, n);
    let full = FullValue::solve(&spec, cfg)?;
    let v_full = full.value(&spec)?;
    rec.v_full = Some(v_full);

    if let Ok(inputs) = BoundInputs::from_spec(&spec, cfg.bounds) {
        rec.bounds = Some(bound_report(&inputs, spec.start_time)?);
    }

    if spec.lq_form().is_some() {
        let res = solve_dist_lq(&spec, &cfg.dist_lq)?;
        if !res.converged {
            log::warn!("N={n}: affine optimizer stopped at gradient norm {:e}", res.grad_norm);
        }
        rec.v_dist_affine = Some(res.value);
        rec.affine_converged = Some(res.converged);
    }

    let grid_source;
    let source: &dyn CovectorSource = match &full {
        FullValue::Riccati(s) => s,
        FullValue::Grid(g) => {
            grid_source = GridCovector {
                grid: g,
                inner: cfg.fixed_point.inner_samples.unwrap_or(cfg.paths),
            };
            &grid_source
        }
    };
    let flow_noise = NoiseSource::new(seed, false).derive(FLOW_STREAM);
    let ens0 = Ensemble::sample(&spec.initial_law, spec.start_time, cfg.paths, &flow_noise)?;
    let int_cfg = IntegratorConfig::new(cfg.steps, flow_noise.seed());
    let check = build_check_policy(
        &spec,
        source,
        &ens0,
        cfg.eval_paths,
        &int_cfg,
        &cfg.fixed_point,
        cfg.time_convention,
    )?;
    rec.v_dist_check = Some(check.estimate);
    rec.check_gap = Some(check.estimate.estimate().minus(v_full.estimate()));
    (rec.gap, rec.gap_source) = match rec.v_dist_affine {
        Some(a) => (Some(a.estimate().minus(v_full.estimate())), Some(GapSource::Affine)),
        None => (rec.check_gap, Some(GapSource::Check)),
    };

    if let FullValue::Riccati(sol) = &full {
        let inputs = BoundInputs::from_spec(&spec, cfg.bounds)?;
        let err_noise = NoiseSource::new(seed, false).derive(ERROR_STREAM);
        let ens = Ensemble::sample(&spec.initial_law, spec.start_time, cfg.probes.error_paths, &err_noise)?;
        rec.errors = Some(estimate_errors_lq(&spec, sol, spec.start_time, &ens, &cfg.fixed_point, &inputs)?);
        let stride = (cfg.steps / 20).max(1);
        let flow_cfg = IntegratorConfig::new(cfg.steps, err_noise.seed()).record_every(stride);
        let flow = simulate_check_flow(&spec, sol, &ens, &flow_cfg, &cfg.fixed_point, cfg.time_convention, None)?;
        rec.gronwall = Some(check_gronwall_eq(sol, &flow.trajectory.snapshots, &inputs)?);
    }
    Ok(())
}

/// Computes one gap-scan row. Solver failures are recorded in the row.
pub fn scan_n(cfg: &RunConfig, n: usize) -> GapRecord {
    let start = Instant::now();
    let mut rec = GapRecord::empty(n);
    if let Err(e) = scan_one(cfg, n, &mut rec) {
        log::error!("N={n}: {e}");
        rec.error = Some(e.to_string());
        rec.exit_code = e.exit_code();
    }
    if cfg.record_timings {
        rec.wall_ms = start.elapsed().as_millis() as u64;
    }
    rec
}

/// Every row of a gap scan, in the order of `n_list`.
pub fn scan_records(cfg: &RunConfig) -> Vec<GapRecord> {
    if cfg.parallel {
        cfg.n_list.par_iter().map(|&n| scan_n(cfg, n)).collect()
    } else {
        cfg.n_list.iter().map(|&n| scan_n(cfg, n)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::catalog::CatalogTerm;

    fn small(kappa: f64) -> RunConfig {
        let mut cfg = RunConfig {
            n_list: vec![2, 3],
            paths: 200,
            eval_paths: 400,
            steps: 20,
            seed: 11,
            ..Default::default()
        };
        cfg.instance.pairwise = CatalogTerm::new("quadratic_pairwise", &[kappa]);
        cfg.probes.error_paths = 100;
        cfg
    }

    fn record(n: usize, gap: Option<f64>) -> GapRecord {
        let mut r = GapRecord::empty(n);
        r.gap = gap.map(Estimate::exact);
        r
    }

    #[test]
    fn slope_skips_missing_and_nonpositive_gaps() {
        let recs = [
            record(2, Some(0.2)),
            record(4, None),
            record(8, Some(-1.0)),
            record(16, Some(0.05)),
        ];
        let s = gap_slope(&recs).unwrap();
        assert!((s - (0.05f64 / 0.2).ln() / 8f64.ln()).abs() < 1e-12);
        assert!(gap_slope(&recs[..2]).is_none());
    }

    #[test]
    fn lq_row_is_complete() {
        let recs = scan_records(&small(0.5));
        for r in &recs {
            assert!(!r.failed(), "{:?}", r.error);
            assert_eq!(r.gap_source, Some(GapSource::Affine));
            let gap = r.gap.unwrap();
            assert!(gap.value > 0.0 && gap.std_err == 0.0);
            assert!(r.check_gap.unwrap().value > -3.0 * r.check_gap.unwrap().std_err);
            assert!(r.rhs_theorem().unwrap() > 0.0);
            assert!(r.gronwall.as_ref().unwrap().rows.len() >= 2);
            assert_eq!(r.wall_ms, 0);
        }
    }

    #[test]
    fn parallel_scan_matches_sequential() {
        let cfg = small(0.5);
        let par = RunConfig {
            parallel: true,
            ..cfg.clone()
        };
        assert_eq!(scan_records(&cfg), scan_records(&par));
    }

    #[test]
    fn unsupported_row_fails_and_scan_continues() {
        let mut cfg = small(0.5);
        cfg.n_list = vec![2, 4];
        cfg.instance.terminal = CatalogTerm::new("huber_terminal", &[1.0, 0.5]);
        cfg.grid.points = 21;
        cfg.eval_paths = 100;
        cfg.paths = 50;
        let recs = scan_records(&cfg);
        assert!(!recs[0].failed(), "{:?}", recs[0].error);
        assert_eq!(recs[0].gap_source, Some(GapSource::Check));
        assert!(recs[1].failed());
        assert_eq!(recs[1].exit_code, 2);
    }
}
