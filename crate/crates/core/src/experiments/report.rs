use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::gap_scan::{gap_slope, scan_records, GapRecord};
use super::RunConfig;
use crate::error::{Error, Result};

/// Column order of the gap-scan CSV.
pub const GAP_SCAN_HEADER: [&str; 11] = [
    "N",
    "V_full",
    "V_full_err",
    "V_dist_affine",
    "V_dist_affine_err",
    "V_dist_check",
    "V_dist_check_err",
    "gap",
    "gap_err",
    "rhs_theorem",
    "wall_ms",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMeta {
    pub version: String,
    /// Revision the binary was built from, when the build provided one.
    pub git_revision: Option<String>,
    pub seed: u64,
    pub config: RunConfig,
}

impl RunMeta {
    pub fn new(cfg: &RunConfig) -> Self {
        RunMeta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            git_revision: option_env!("DISTGAP_GIT_REVISION").map(str::to_string),
            seed: cfg.seed,
            config: cfg.clone(),
        }
    }
}

/// A complete gap scan.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub meta: RunMeta,
    pub records: Vec<GapRecord>,
    /// Least-squares slope of `ln gap` on `ln N`, when two or more rows have
    /// a positive gap.
    pub slope: Option<f64>,
}

impl RunReport {
    pub fn failed_rows(&self) -> impl Iterator<Item = &GapRecord> {
        self.records.iter().filter(|r| r.failed())
    }

    /// 0 when every row succeeded, 3 when a row stopped on solver
    /// non-convergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        let codes: Vec<i32> = self.failed_rows().map(|r| r.exit_code).collect();
        if codes.is_empty() {
            0
        } else if codes.contains(&3) {
            3
        } else {
            1
        }
    }
}

/// For each `N`: the full-information value, both distributed upper bounds,
/// the gap and the theorem's right-hand side.
pub fn run_gap_scan(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let records = scan_records(cfg);
    let slope = gap_slope(&records);
    Ok(RunReport {
        meta: RunMeta::new(cfg),
        records,
        slope,
    })
}

pub(crate) fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub(crate) fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map_err(|e| Error::io(path, e))
}

/// A CSV writer preceded by `#` comment lines.
pub(crate) fn csv_with_notes(path: &Path, notes: &[&str]) -> Result<csv::Writer<File>> {
    let mut f = create(path)?;
    for n in notes {
        writeln!(f, "# {n}").map_err(|e| Error::io(path, e))?;
    }
    Ok(csv::WriterBuilder::new().from_writer(f))
}

fn finish(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per `N` in the fixed column order; missing values are empty.
pub fn write_gap_csv(report: &RunReport, path: &Path) -> Result<()> {
    let mut w = csv_with_notes(path, &[])?;
    w.write_record(GAP_SCAN_HEADER)?;
    for r in &report.records {
        let value = |v: &Option<crate::value::ValueEstimate>| (cell(v.map(|e| e.value)), cell(v.map(|e| e.std_err)));
        let (vf, vf_e) = value(&r.v_full);
        let (va, va_e) = value(&r.v_dist_affine);
        let (vc, vc_e) = value(&r.v_dist_check);
        w.write_record([
            r.n.to_string(),
            vf,
            vf_e,
            va,
            va_e,
            vc,
            vc_e,
            cell(r.gap.map(|g| g.value)),
            cell(r.gap.map(|g| g.std_err)),
            cell(r.rhs_theorem()),
            r.wall_ms.to_string(),
        ])?;
    }
    finish(w, path)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f).map_err(|e| Error::io(path, e))
}

/// Writes `gap_scan.csv` and `report.json` into `dir`.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let csv = dir.join("gap_scan.csv");
    let json = dir.join("report.json");
    write_gap_csv(report, &csv)?;
    write_json(report, &json)?;
    Ok(vec![csv, json])
}

/// Plot-ready tables from a gap scan: gap against `N` (with the fitted
/// slope), `gap·√N`, `Ê_Q(s)` against its Gronwall envelope, and the split
/// of the theorem's right-hand side into `K_f` and `K_g`. Failed rows are
/// left out.
pub fn emit_plot_data(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let rows: Vec<&GapRecord> = report.records.iter().filter(|r| !r.failed()).collect();
    let mut written = Vec::new();

    let path = dir.join("gap_vs_n.csv");
    let mut w = csv_with_notes(
        &path,
        &[
            "gap = V_dist - V_full in cost units; gap_err = one standard error, 0 for exact values",
            "slope = least-squares slope of ln(gap) on ln(N) over rows with positive gap",
        ],
    )?;
    let mut header = vec!["N", "gap", "gap_err"];
    if report.slope.is_some() {
        header.push("slope");
    }
    w.write_record(&header)?;
    for r in rows.iter().filter(|r| r.gap.is_some()) {
        let g = r.gap.expect("filtered");
        let mut rec = vec![r.n.to_string(), g.value.to_string(), g.std_err.to_string()];
        if let Some(s) = report.slope {
            rec.push(s.to_string());
        }
        w.write_record(&rec)?;
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("gap_sqrt_n.csv");
    let mut w = csv_with_notes(
        &path,
        &["gap_sqrt_n = gap * sqrt(N) in cost units; gap_sqrt_n_err = one standard error"],
    )?;
    w.write_record(["N", "gap_sqrt_n", "gap_sqrt_n_err"])?;
    for r in rows.iter().filter(|r| r.gap.is_some()) {
        let g = r.gap.expect("filtered");
        let s = (r.n as f64).sqrt();
        w.write_record([r.n.to_string(), (g.value * s).to_string(), (g.std_err * s).to_string()])?;
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("gronwall.csv");
    let mut w = csv_with_notes(
        &path,
        &[
            "s = time; eq = E_Q(s) estimate; eq_err = one standard error",
            "envelope = Gronwall right-hand side anchored at E_Q(T); sigma = combined standard error; pass = 1 when eq <= envelope + 3 sigma",
        ],
    )?;
    w.write_record(["N", "s", "eq", "eq_err", "envelope", "sigma", "pass"])?;
    for r in &rows {
        if let Some(t) = &r.gronwall {
            for g in &t.rows {
                w.write_record([
                    r.n.to_string(),
                    g.time.to_string(),
                    g.eq.value.to_string(),
                    g.eq.std_err.to_string(),
                    g.rhs.to_string(),
                    g.sigma.to_string(),
                    u8::from(g.pass).to_string(),
                ])?;
            }
        }
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("bound_decomposition.csv");
    let mut w = csv_with_notes(
        &path,
        &[
            "k_f, k_g = the two rates of the gap bound at the start time t; rhs_theorem = (T - t)(k_f + k_g)",
            "m_over_sqrt_n = the bound with |D_ij g| replaced by K_G/N^2, empty when that hypothesis fails",
        ],
    )?;
    w.write_record(["N", "k_f", "k_g", "rhs_theorem", "m_over_sqrt_n"])?;
    for r in &rows {
        if let Some(b) = &r.bounds {
            w.write_record([
                r.n.to_string(),
                b.k_f.to_string(),
                b.k_g_t.to_string(),
                b.rhs_theorem.to_string(),
                cell(b.m_over_sqrt_n),
            ])?;
        }
    }
    finish(w, &path)?;
    written.push(path);
    Ok(written)
}
