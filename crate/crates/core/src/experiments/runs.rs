use std::path::{Path, PathBuf};

use serde::Serialize;

use super::gap_scan::{seed_for, MAX_GRID_DIMS};
use super::report::{cell, csv_with_notes, write_json};
use super::RunConfig;
use crate::bounds::{bound_report, compute_kf_kg, BoundInputs, BoundReport};
use crate::dynamics::{
    simulate, Ensemble, IntegratorConfig, NoiseSource, PolicyHandle, Trajectory, ZeroPolicy,
};
use crate::error::{Error, Result};
use crate::model::{audit_assumptions, AuditConfig, AuditStatus};
use crate::value::{
    grid_hjb_full, riccati_full, solve_dist_lq, GridCovector, RiccatiFeedback, ValueEstimate, ValueMethod,
    RICCATI_STEPS,
};

use super::properties::AuditRecord;

/// Times per `N` in the bound decomposition table.
const BOUND_TIMES: usize = 11;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRow {
    pub n: usize,
    pub time: f64,
    pub k_f: f64,
    pub k_g: f64,
    pub rhs_theorem: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundsOutput {
    pub reports: Vec<BoundReport>,
    pub rows: Vec<BoundRow>,
}

/// Every constant of the gap bound at the start time, and `K_f(t)`,
/// `K_g(t)` on a uniform grid of `[t, T]`, for each `N`.
pub fn run_bounds(cfg: &RunConfig) -> Result<BoundsOutput> {
    cfg.validate()?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for &n in &cfg.n_list {
        let spec = cfg.instance.build(n)?;
        let inputs = BoundInputs::from_spec(&spec, cfg.bounds)?;
        reports.push(bound_report(&inputs, spec.start_time)?);
        for r in 0..BOUND_TIMES {
            let t = spec.start_time + (spec.horizon - spec.start_time) * r as f64 / (BOUND_TIMES - 1) as f64;
            let kk = compute_kf_kg(&inputs, t.min(spec.horizon))?;
            rows.push(BoundRow {
                n,
                time: t,
                k_f: kk.k_f,
                k_g: kk.k_g,
                rhs_theorem: kk.rhs,
            });
        }
    }
    Ok(BoundsOutput { reports, rows })
}

/// Writes `bounds.csv` and `bounds.json` into `dir`.
pub fn write_bounds(out: &BoundsOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    let path = dir.join("bounds.csv");
    let mut w = csv_with_notes(
        &path,
        &["k_f, k_g = rates of the gap bound at time t; rhs_theorem = (T - t)(k_f + k_g)"],
    )?;
    w.write_record(["N", "t", "k_f", "k_g", "rhs_theorem"])?;
    for r in &out.rows {
        w.write_record([
            r.n.to_string(),
            r.time.to_string(),
            r.k_f.to_string(),
            r.k_g.to_string(),
            r.rhs_theorem.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let json = dir.join("bounds.json");
    write_json(out, &json)?;
    Ok(vec![path, json])
}

/// Policies the `simulate` subcommand can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SimPolicy {
    /// `α ≡ 0`.
    Zero,
    /// The optimal full-information feedback (LQ only).
    Riccati,
    /// The optimized affine distributed feedback (LQ only).
    Affine,
    /// The McKean–Vlasov flow driven by `ǎ`.
    Check,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimRecord {
    pub n: usize,
    pub policy: SimPolicy,
    pub value: ValueEstimate,
}

/// Cost of `policy` at every `N`, and the trajectory of the first `N` when
/// `record_every` is set.
pub fn run_simulate(
    cfg: &RunConfig,
    policy: SimPolicy,
    record_every: Option<usize>,
) -> Result<(Vec<SimRecord>, Option<Trajectory>)> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut first = None;
    for &n in &cfg.n_list {
        let spec = cfg.instance.build(n)?;
        let noise = NoiseSource::new(seed_for(cfg.seed, n), false);
        let ens0 = Ensemble::sample(&spec.initial_law, spec.start_time, cfg.eval_paths, &noise)?;
        let mut int_cfg = IntegratorConfig::new(cfg.steps, noise.derive(1).seed());
        if let Some(k) = record_every.filter(|_| first.is_none()) {
            int_cfg = int_cfg.record_every(k);
        }
        let need_lq = || {
            spec.lq_form()
                .ok_or_else(|| Error::Unsupported(format!("policy {policy:?} needs an LQ instance")))
        };
        let traj = match policy {
            SimPolicy::Zero => simulate(&spec, &PolicyHandle::Distributed(&ZeroPolicy), &ens0, &int_cfg)?,
            SimPolicy::Riccati => {
                need_lq()?;
                let sol = riccati_full(&spec, RICCATI_STEPS)?;
                let fb = RiccatiFeedback::new(&sol, spec.start_time, spec.horizon, cfg.steps);
                simulate(&spec, &PolicyHandle::FullInfo(&fb), &ens0, &int_cfg)?
            }
            SimPolicy::Affine => {
                need_lq()?;
                let res = solve_dist_lq(&spec, &cfg.dist_lq)?;
                simulate(&spec, &PolicyHandle::Distributed(&res.params), &ens0, &int_cfg)?
            }
            SimPolicy::Check => {
                let handle = |source: &dyn crate::dynamics::CovectorSource| -> Result<Trajectory> {
                    simulate(
                        &spec,
                        &PolicyHandle::CheckFlow {
                            source,
                            fixed_point: cfg.fixed_point.clone(),
                            convention: cfg.time_convention,
                        },
                        &ens0,
                        &int_cfg,
                    )
                };
                if spec.lq_form().is_some() {
                    handle(&riccati_full(&spec, RICCATI_STEPS)?)?
                } else if spec.state_len() <= MAX_GRID_DIMS {
                    let grid = grid_hjb_full(&spec, &cfg.grid, &cfg.fixed_point)?;
                    handle(&GridCovector {
                        grid: &grid,
                        inner: cfg.fixed_point.inner_samples.unwrap_or(cfg.eval_paths),
                    })?
                } else {
                    return Err(Error::Unsupported(format!(
                        "no covector source for a non-LQ instance with N·d > {MAX_GRID_DIMS}"
                    )));
                }
            }
        };
        let term = traj.terminal();
        let totals: Vec<f64> = (0..term.paths())
            .map(|k| traj.running_cost[k] + spec.terminal.value(term.row(k)))
            .collect();
        let est = crate::numerics::Estimate::batch_means(&totals, crate::numerics::BATCHES);
        records.push(SimRecord {
            n,
            policy,
            value: ValueEstimate::from_estimate(est, term.paths(), ValueMethod::Mc),
        });
        if first.is_none() {
            first = Some(traj);
        }
    }
    Ok((records, record_every.and(first)))
}

pub fn write_simulation(records: &[SimRecord], path: &Path) -> Result<()> {
    let mut w = csv_with_notes(path, &["value = mean total cost; value_err = one standard error"])?;
    w.write_record(["N", "policy", "value", "value_err", "paths"])?;
    for r in records {
        let policy = serde_json::to_value(r.policy)?;
        w.write_record([
            r.n.to_string(),
            policy.as_str().unwrap_or_default().to_string(),
            r.value.value.to_string(),
            r.value.std_err.to_string(),
            r.value.paths.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Recorded states of the first `max_paths` paths, one line per coordinate.
pub fn write_trajectory(traj: &Trajectory, max_paths: usize, path: &Path) -> Result<()> {
    let mut w = csv_with_notes(path, &["x = state coordinate at time t"])?;
    w.write_record(["t", "path", "agent", "coord", "x"])?;
    for ens in &traj.snapshots {
        for k in 0..ens.paths().min(max_paths) {
            for i in 0..ens.agents() {
                for (c, v) in ens.states.get(k, i).iter().enumerate() {
                    w.write_record([
                        ens.time.to_string(),
                        k.to_string(),
                        i.to_string(),
                        c.to_string(),
                        v.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Assumption audit at every `N`.
pub fn run_audit(cfg: &RunConfig) -> Result<Vec<AuditRecord>> {
    cfg.validate()?;
    cfg.n_list
        .iter()
        .map(|&n| {
            let spec = cfg.instance.build(n)?;
            let seed = NoiseSource::new(seed_for(cfg.seed, n), false).derive(1).seed();
            Ok(AuditRecord {
                n,
                report: audit_assumptions(&spec, &AuditConfig::new(cfg.probes.audit, seed))?,
            })
        })
        .collect()
}

/// Writes `audit.csv` and `audit.json` into `dir`.
pub fn write_audit(audits: &[AuditRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    let path = dir.join("audit.csv");
    let mut w = csv_with_notes(
        &path,
        &["worst = extreme observed over the probes; declared = the bound it is compared against"],
    )?;
    w.write_record(["N", "item", "status", "worst", "declared"])?;
    for a in audits {
        for item in &a.report.items {
            let status = match item.status {
                AuditStatus::Pass => "pass",
                AuditStatus::Fail => "fail",
                AuditStatus::Exempt => "exempt",
            };
            w.write_record([
                a.n.to_string(),
                item.name.clone(),
                status.to_string(),
                cell(Some(item.worst).filter(|v| v.is_finite())),
                cell(Some(item.declared).filter(|v| v.is_finite())),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let json = dir.join("audit.json");
    write_json(&audits, &json)?;
    Ok(vec![path, json])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            n_list: vec![2, 4],
            eval_paths: 2000,
            steps: 20,
            seed: 8,
            ..Default::default()
        }
    }

    #[test]
    fn bound_rows_end_at_zero() {
        let out = run_bounds(&small()).unwrap();
        assert_eq!(out.reports.len(), 2);
        assert_eq!(out.rows.len(), 2 * BOUND_TIMES);
        let last = &out.rows[BOUND_TIMES - 1];
        assert_eq!(last.time, 1.0);
        assert_eq!(last.rhs_theorem, 0.0);
        assert!(out.rows[0].rhs_theorem > 0.0);
    }

    #[test]
    fn simulated_policies_are_ordered() {
        let cfg = small();
        let cost = |p| run_simulate(&cfg, p, None).unwrap().0;
        let (zero, ric, aff, chk) = (
            cost(SimPolicy::Zero),
            cost(SimPolicy::Riccati),
            cost(SimPolicy::Affine),
            cost(SimPolicy::Check),
        );
        for k in 0..2 {
            let spec = cfg.instance.build(cfg.n_list[k]).unwrap();
            let v = riccati_full(&spec, RICCATI_STEPS).unwrap().lift(0.0, &spec.initial_law);
            let r = ric[k].value;
            assert!((r.value - v).abs() < 3.0 * r.std_err + 0.01 * v, "{r:?} vs {v}");
            assert!(aff[k].value.value < zero[k].value.value);
            assert!(chk[k].value.value < zero[k].value.value);
        }
    }

    #[test]
    fn trajectory_dump_has_recorded_rows() {
        let cfg = RunConfig {
            n_list: vec![2],
            ..small()
        };
        let (recs, traj) = run_simulate(&cfg, SimPolicy::Zero, Some(5)).unwrap();
        assert_eq!(recs.len(), 1);
        let traj = traj.unwrap();
        assert_eq!(traj.snapshots.len(), 5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_trajectory(&traj, 3, &p).unwrap();
        let lines = std::fs::read_to_string(&p).unwrap().lines().count();
        assert_eq!(lines, 2 + 5 * 3 * 2);
    }

    #[test]
    fn lq_policies_refuse_non_lq_instances() {
        let mut cfg = small();
        cfg.instance.terminal = crate::model::catalog::CatalogTerm::new("huber_terminal", &[1.0, 0.5]);
        let err = run_simulate(&cfg, SimPolicy::Riccati, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn audit_of_default_instance_passes() {
        let cfg = RunConfig {
            probes: crate::experiments::ProbeCounts {
                audit: 200,
                ..Default::default()
            },
            ..small()
        };
        let audits = run_audit(&cfg).unwrap();
        assert!(audits.iter().all(|a| a.report.passed()));
        let dir = tempfile::tempdir().unwrap();
        write_audit(&audits, dir.path()).unwrap();
    }
}
