//! Built-in instance catalog. Terms are written `name(arg, arg, ...)`:
//!
//! | term | meaning |
//! |------|---------|
//! | `zero_f0` | `f_0 ≡ 0` |
//! | `lipschitz_f0(L, delta)` | `f_0(x) = L (sqrt(|x|²+δ²) − δ)` |
//! | `zero_pairwise` | `ĥ ≡ 0` |
//! | `quadratic_pairwise(kappa)` | `ĥ(r) = κ r²/2` for every pair |
//! | `quadratic_terminal(c)` | `g^N(x) = (c/2N) |x|²` |
//! | `huber_terminal(c, delta)` | `g^N(x) = (1/N) Σ ψ(x_i)`, `ψ` pseudo-Huber |
//! | `huber_mean_terminal(c, delta)` | `g^N(x) = ψ(mean x)` |
//! | `gaussian_init(mean, cov_scale)` | i.i.d. `N(mean·1, cov_scale·I)` |
//! | `dirac_init(point)` | every agent starts at `point·1` |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{AgentLaw, InitialLaw, PairwiseTable, ProblemSpec, RadialProfile, ScalarCost, TerminalCost};
use crate::error::{Error, Result};

/// A parsed catalog term.
#[derive(Clone, Debug, PartialEq)]
pub struct CatalogTerm {
    pub name: String,
    pub args: Vec<f64>,
}

impl CatalogTerm {
    pub fn new(name: &str, args: &[f64]) -> Self {
        CatalogTerm {
            name: name.to_string(),
            args: args.to_vec(),
        }
    }

    fn expect_args(&self, n: usize) -> Result<()> {
        if self.args.len() != n {
            return Err(Error::config(format!(
                "catalog term `{}` takes {n} argument(s), got {}",
                self.name,
                self.args.len()
            )));
        }
        Ok(())
    }

    fn positive(&self, k: usize, what: &str) -> Result<f64> {
        let v = self.args[k];
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::config(format!("`{}`: {what} must be positive", self.name)));
        }
        Ok(v)
    }
}

impl FromStr for CatalogTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, rest) = match s.find('(') {
            Some(p) => (&s[..p], Some(&s[p + 1..])),
            None => (s, None),
        };
        let name = name.trim();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::config(format!("malformed catalog term `{s}`")));
        }
        let args = match rest {
            None => Vec::new(),
            Some(r) => {
                let inner = r
                    .strip_suffix(')')
                    .ok_or_else(|| Error::config(format!("missing `)` in `{s}`")))?;
                if inner.trim().is_empty() {
                    Vec::new()
                } else {
                    inner
                        .split(',')
                        .map(|a| {
                            a.trim()
                                .parse::<f64>()
                                .map_err(|_| Error::config(format!("bad number `{}` in `{s}`", a.trim())))
                        })
                        .collect::<Result<_>>()?
                }
            }
        };
        Ok(CatalogTerm {
            name: name.to_string(),
            args,
        })
    }
}

impl fmt::Display for CatalogTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.args.is_empty() {
            return write!(f, "{}", self.name);
        }
        let args: Vec<String> = self.args.iter().map(|a| format!("{a:?}")).collect();
        write!(f, "{}({})", self.name, args.join(", "))
    }
}

impl Serialize for CatalogTerm {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CatalogTerm {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn build_f0(term: &CatalogTerm) -> Result<ScalarCost> {
    match term.name.as_str() {
        "zero_f0" => {
            term.expect_args(0)?;
            Ok(ScalarCost::Zero)
        }
        "lipschitz_f0" => {
            term.expect_args(2)?;
            Ok(ScalarCost::PseudoHuber {
                lipschitz: term.positive(0, "L")?,
                delta: term.positive(1, "delta")?,
            })
        }
        other => Err(Error::config(format!("unknown f0 term `{other}`"))),
    }
}

pub fn build_pairwise(term: &CatalogTerm, n: usize) -> Result<PairwiseTable> {
    match term.name.as_str() {
        "zero_pairwise" => {
            term.expect_args(0)?;
            Ok(PairwiseTable::uniform(n, RadialProfile::Zero))
        }
        "quadratic_pairwise" => {
            term.expect_args(1)?;
            let kappa = term.args[0];
            if !(kappa >= 0.0) {
                return Err(Error::config("quadratic_pairwise: kappa must be nonnegative"));
            }
            Ok(PairwiseTable::uniform(n, RadialProfile::Quadratic { kappa }))
        }
        other => Err(Error::config(format!("unknown pairwise term `{other}`"))),
    }
}

pub fn build_terminal(term: &CatalogTerm, n: usize, d: usize) -> Result<TerminalCost> {
    match term.name.as_str() {
        "quadratic_terminal" => {
            term.expect_args(1)?;
            if !(term.args[0] >= 0.0) {
                return Err(Error::config("quadratic_terminal: c must be nonnegative"));
            }
            Ok(TerminalCost::quadratic_scaled(n, d, term.args[0]))
        }
        "huber_terminal" => {
            term.expect_args(2)?;
            Ok(TerminalCost::separable_huber(n, d, term.positive(0, "c")?, term.positive(1, "delta")?))
        }
        "huber_mean_terminal" => {
            term.expect_args(2)?;
            Ok(TerminalCost::mean_huber(n, d, term.positive(0, "c")?, term.positive(1, "delta")?))
        }
        other => Err(Error::config(format!("unknown terminal term `{other}`"))),
    }
}

pub fn build_law(term: &CatalogTerm, n: usize, d: usize) -> Result<InitialLaw> {
    match term.name.as_str() {
        "gaussian_init" => {
            term.expect_args(2)?;
            let scale = term.positive(1, "cov_scale")?;
            let mut cov = vec![0.0; d * d];
            for k in 0..d {
                cov[k * d + k] = scale;
            }
            InitialLaw::iid(
                n,
                AgentLaw::Gaussian {
                    mean: vec![term.args[0]; d],
                    cov,
                },
            )
        }
        "dirac_init" => {
            term.expect_args(1)?;
            InitialLaw::iid(
                n,
                AgentLaw::Dirac {
                    point: vec![term.args[0]; d],
                },
            )
        }
        other => Err(Error::config(format!("unknown initial-law term `{other}`"))),
    }
}

/// An instance template, independent of `N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Instance {
    pub dim: usize,
    pub horizon: f64,
    pub start_time: f64,
    pub f0: CatalogTerm,
    pub pairwise: CatalogTerm,
    pub terminal: CatalogTerm,
    pub initial: CatalogTerm,
}

impl Default for Instance {
    fn default() -> Self {
        Instance {
            dim: 1,
            horizon: 1.0,
            start_time: 0.0,
            f0: CatalogTerm::new("zero_f0", &[]),
            pairwise: CatalogTerm::new("quadratic_pairwise", &[0.5]),
            terminal: CatalogTerm::new("quadratic_terminal", &[1.0]),
            initial: CatalogTerm::new("gaussian_init", &[0.0, 1.0]),
        }
    }
}

impl Instance {
    pub fn build(&self, n: usize) -> Result<ProblemSpec> {
        ProblemSpec::new(
            n,
            self.dim,
            self.horizon,
            self.start_time,
            build_f0(&self.f0)?,
            build_pairwise(&self.pairwise, n)?,
            build_terminal(&self.terminal, n, self.dim)?,
            build_law(&self.initial, n, self.dim)?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_prints_terms() {
        let t: CatalogTerm = "huber_terminal( 1.0, 0.5 )".parse().unwrap();
        assert_eq!(t, CatalogTerm::new("huber_terminal", &[1.0, 0.5]));
        assert_eq!(t.to_string(), "huber_terminal(1.0, 0.5)");
        let z: CatalogTerm = "zero_f0".parse().unwrap();
        assert!(z.args.is_empty());
        assert_eq!(z.to_string(), "zero_f0");
    }

    #[test]
    fn rejects_malformed_terms() {
        assert!("huber_terminal(1.0".parse::<CatalogTerm>().is_err());
        assert!("huber_terminal(x)".parse::<CatalogTerm>().is_err());
        assert!("(1)".parse::<CatalogTerm>().is_err());
    }

    #[test]
    fn default_instance_is_lq() {
        let spec = Instance::default().build(4).unwrap();
        assert!(spec.lq_form().is_some());
        assert_eq!(spec.initial_law.poincare_constant().unwrap(), 1.0);
    }

    #[test]
    fn wrong_arity_is_reported() {
        let err = build_f0(&CatalogTerm::new("lipschitz_f0", &[1.0])).unwrap_err();
        assert!(err.to_string().contains("takes 2"));
    }
}
