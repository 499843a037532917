use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::BoundKnobs;
use crate::dynamics::TimeConvention;
use crate::error::{Error, Result};
use crate::hamiltonian::FixedPointConfig;
use crate::model::catalog::Instance;
use crate::value::{DistLqConfig, GridConfig};

/// Sample counts for the property suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeCounts {
    /// Random probes for the assumption audit.
    pub audit: usize,
    /// Covector pairs for the Lipschitz bound on `â`.
    pub hat_a_pairs: usize,
    /// Covectors for the envelope-gradient check.
    pub envelope_points: usize,
    /// Pairs for the monotonicity of `∇φ`.
    pub phi_pairs: usize,
    /// Random ensembles for the bound on `ǎ`.
    pub check_a_ensembles: usize,
    /// Sites per random ensemble.
    pub ensemble_paths: usize,
    /// Times at which the Riccati eigenvalues are checked.
    pub riccati_times: usize,
    /// Particles for the error functionals and the Gronwall check.
    pub error_paths: usize,
    /// State pairs for the Lipschitz bound on a grid value.
    pub lipschitz_pairs: usize,
}

impl Default for ProbeCounts {
    fn default() -> Self {
        ProbeCounts {
            audit: 2000,
            hat_a_pairs: 1000,
            envelope_points: 100,
            phi_pairs: 1000,
            check_a_ensembles: 100,
            ensemble_paths: 64,
            riccati_times: 50,
            error_paths: 2000,
            lipschitz_pairs: 500,
        }
    }
}

/// Everything a run needs. Loaded from a TOML file; command-line flags
/// override individual fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub seed: u64,
    pub n_list: Vec<usize>,
    /// Particles in the flow ensemble.
    pub paths: usize,
    /// Fresh paths used to evaluate a policy's cost.
    pub eval_paths: usize,
    /// Euler steps over `[t, T]`.
    pub steps: usize,
    pub output_dir: PathBuf,
    /// Fill the `wall_ms` column; off by default so reruns are byte-identical.
    pub record_timings: bool,
    /// Run the values of `N` concurrently.
    pub parallel: bool,
    pub time_convention: TimeConvention,
    /// A TOML file holding the `[instance]` table, resolved relative to the
    /// config file. Replaces the inline instance when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance_file: Option<PathBuf>,
    pub instance: Instance,
    pub fixed_point: FixedPointConfig,
    pub bounds: BoundKnobs,
    pub dist_lq: DistLqConfig,
    pub grid: GridConfig,
    pub probes: ProbeCounts,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: "gap_scan".into(),
            seed: 0,
            n_list: vec![2, 4, 8, 16],
            paths: 2000,
            eval_paths: 10_000,
            steps: 100,
            output_dir: PathBuf::from("out"),
            record_timings: false,
            parallel: false,
            time_convention: TimeConvention::StepTime,
            instance_file: None,
            instance: Instance::default(),
            fixed_point: FixedPointConfig::default(),
            bounds: BoundKnobs::default(),
            dist_lq: DistLqConfig::default(),
            grid: GridConfig::default(),
            probes: ProbeCounts::default(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    instance: Instance,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.resolve_instance(path.parent().unwrap_or(Path::new(".")))?;
        Ok(cfg)
    }

    /// Loads `instance_file`, if set, relative to `base`.
    pub fn resolve_instance(&mut self, base: &Path) -> Result<()> {
        if let Some(file) = &self.instance_file {
            let path = base.join(file);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let parsed: InstanceFile =
                toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            self.instance = parsed.instance;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() {
            return Err(Error::config("n_list must not be empty"));
        }
        if self.n_list[0] == 0 || self.n_list.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("n_list must be positive and strictly increasing"));
        }
        if self.paths == 0 || self.eval_paths == 0 || self.steps == 0 {
            return Err(Error::config("paths, eval_paths and steps must be positive"));
        }
        let p = &self.probes;
        if [p.audit, p.hat_a_pairs, p.envelope_points, p.phi_pairs, p.check_a_ensembles, p.riccati_times]
            .contains(&0)
            || p.ensemble_paths < 2
            || p.error_paths < 2
        {
            return Err(Error::config("probe counts must be positive (ensembles need two sites)"));
        }
        self.fixed_point.validate()?;
        self.bounds.validate()?;
        if self.dist_lq.knots == 0 || self.dist_lq.steps_per_knot == 0 || self.dist_lq.memory == 0 {
            return Err(Error::config("dist_lq knots, steps_per_knot and memory must be positive"));
        }
        if self.grid.points < 3 || self.grid.snapshots < 2 {
            return Err(Error::config("grid needs at least 3 points and 2 snapshots"));
        }
        self.instance.build(self.n_list[0])?;
        Ok(())
    }
}
