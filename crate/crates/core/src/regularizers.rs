//! Amenable penalties (MCP, SCAD) and the convex L1 baseline.
//!
//! The solver only ever sees a penalty through [`Penalty`]: the value `ρ_λ`,
//! its derivative away from the origin, and the shift `q_λ(t) = λ|t| − ρ_λ(t)`
//! that is folded into the smooth part of the objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// Penalty family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    #[default]
    Mcp,
    Scad,
    L1,
}

impl PenaltyKind {
    /// Literature default shape parameter.
    pub fn default_gamma(self) -> f64 {
        match self {
            PenaltyKind::Mcp => 3.0,
            PenaltyKind::Scad => 3.7,
            PenaltyKind::L1 => 1.0,
        }
    }
}

impl std::str::FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcp" => Ok(PenaltyKind::Mcp),
            "scad" => Ok(PenaltyKind::Scad),
            "l1" | "lasso" => Ok(PenaltyKind::L1),
            other => Err(Error::invalid(format!("unknown penalty kind `{other}`"))),
        }
    }
}

/// Scalar penalty applied to row norms.
pub trait Penalty<T: Scalar> {
    fn lambda(&self) -> T;

    fn rho(&self, t: T) -> T;

    /// Derivative of `rho`; undefined (an error) at `t = 0`.
    fn rho_prime(&self, t: T) -> Result<T>;

    /// Whether `q_λ` is nondegenerate, i.e. the penalty is nonconvex.
    fn has_shift(&self) -> bool;

    fn q_value(&self, t: T) -> Result<T>;

    fn q_prime(&self, t: T) -> Result<T>;

    /// Point beyond which `ρ′ = 0`, if the penalty has the selection property.
    fn flat_from(&self) -> Option<T>;
}

/// A concrete MCP / SCAD / L1 penalty with parameters `(λ, γ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerSpec<T> {
    kind: PenaltyKind,
    lambda: T,
    gamma: T,
}

impl<T: Scalar> RegularizerSpec<T> {
    pub fn new(kind: PenaltyKind, lambda: T, gamma: T) -> Result<Self> {
        if !(lambda > T::zero()) || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
        }
        let min_gamma = match kind {
            PenaltyKind::Mcp => Some(T::one()),
            PenaltyKind::Scad => Some(T::lit(2.0)),
            PenaltyKind::L1 => None,
        };
        if let Some(min) = min_gamma {
            if !(gamma > min) || !gamma.is_finite() {
                return Err(Error::invalid(format!(
                    "{kind:?} requires gamma > {min}, got {gamma}"
                )));
            }
        }
        Ok(Self { kind, lambda, gamma })
    }

    pub fn mcp(lambda: T, gamma: T) -> Result<Self> {
        Self::new(PenaltyKind::Mcp, lambda, gamma)
    }

    pub fn scad(lambda: T, gamma: T) -> Result<Self> {
        Self::new(PenaltyKind::Scad, lambda, gamma)
    }

    pub fn l1(lambda: T) -> Result<Self> {
        Self::new(PenaltyKind::L1, lambda, T::one())
    }

    pub fn kind(&self) -> PenaltyKind {
        self.kind
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    /// Same family and shape at a different `λ`.
    pub fn with_lambda(&self, lambda: T) -> Result<Self> {
        Self::new(self.kind, lambda, self.gamma)
    }

    /// Weak-convexity constant: `1/γ` (MCP), `1/(γ−1)` (SCAD), 0 (L1).
    pub fn mu(&self) -> T {
        match self.kind {
            PenaltyKind::Mcp => T::one() / self.gamma,
            PenaltyKind::Scad => T::one() / (self.gamma - T::one()),
            PenaltyKind::L1 => T::zero(),
        }
    }
}

impl<T: Scalar> Penalty<T> for RegularizerSpec<T> {
    fn lambda(&self) -> T {
        self.lambda
    }

    fn rho(&self, t: T) -> T {
        let (l, g, a) = (self.lambda, self.gamma, t.abs());
        let two = T::lit(2.0);
        match self.kind {
            PenaltyKind::Mcp => {
                if a <= g * l {
                    l * a - a * a / (two * g)
                } else {
                    g * l * l / two
                }
            }
            PenaltyKind::Scad => {
                if a <= l {
                    l * a
                } else if a <= g * l {
                    (two * g * l * a - a * a - l * l) / (two * (g - T::one()))
                } else {
                    l * l * (g + T::one()) / two
                }
            }
            PenaltyKind::L1 => l * a,
        }
    }

    fn rho_prime(&self, t: T) -> Result<T> {
        if t == T::zero() {
            return Err(Error::SubdifferentialAtOrigin);
        }
        let (l, g, a) = (self.lambda, self.gamma, t.abs());
        let mag = match self.kind {
            PenaltyKind::Mcp => {
                if a <= g * l {
                    l - a / g
                } else {
                    T::zero()
                }
            }
            PenaltyKind::Scad => {
                if a <= l {
                    l
                } else if a <= g * l {
                    (g * l - a) / (g - T::one())
                } else {
                    T::zero()
                }
            }
            PenaltyKind::L1 => l,
        };
        Ok(mag * t.signum())
    }

    fn has_shift(&self) -> bool {
        self.kind != PenaltyKind::L1
    }

    fn q_value(&self, t: T) -> Result<T> {
        let (l, g, a) = (self.lambda, self.gamma, t.abs());
        let two = T::lit(2.0);
        match self.kind {
            PenaltyKind::Mcp => Ok(if a <= g * l {
                a * a / (two * g)
            } else {
                l * a - g * l * l / two
            }),
            PenaltyKind::Scad => Ok(if a <= l {
                T::zero()
            } else if a <= g * l {
                (a - l) * (a - l) / (two * (g - T::one()))
            } else {
                l * a - l * l * (g + T::one()) / two
            }),
            PenaltyKind::L1 => Err(Error::NoShiftedForm),
        }
    }

    fn q_prime(&self, t: T) -> Result<T> {
        let (l, g, a) = (self.lambda, self.gamma, t.abs());
        let mag = match self.kind {
            PenaltyKind::Mcp => {
                if a <= g * l {
                    a / g
                } else {
                    l
                }
            }
            PenaltyKind::Scad => {
                if a <= l {
                    T::zero()
                } else if a <= g * l {
                    (a - l) / (g - T::one())
                } else {
                    l
                }
            }
            PenaltyKind::L1 => return Err(Error::NoShiftedForm),
        };
        Ok(if t < T::zero() { -mag } else { mag })
    }

    fn flat_from(&self) -> Option<T> {
        match self.kind {
            PenaltyKind::L1 => None,
            _ => Some(self.gamma * self.lambda),
        }
    }
}

/// Outcome of one amenability property check.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Largest violation found on the grid (0 when none).
    pub worst_violation: f64,
}

/// Per-property results of [`amenability_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct AmenabilityReport {
    pub checks: Vec<PropertyCheck>,
}

impl AmenabilityReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&PropertyCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

const GRID_POINTS: usize = 10_000;
const CONVEXITY_TOL: f64 = 1e-9;

/// Grid check of the amenability conditions for a claimed curvature `mu_bound`.
///
/// Evaluates 10⁴ uniform points on `[−3γλ, 3γλ]` (`[−3λ, 3λ]` for L1).
pub fn amenability_report<T: Scalar, P: Penalty<T> + ?Sized>(
    spec: &P,
    mu_bound: f64,
) -> AmenabilityReport {
    let lambda = spec.lambda().as_f64();
    let half_width = 3.0 * spec.flat_from().map_or(lambda, |f| f.as_f64());
    let h = 2.0 * half_width / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| -half_width + i as f64 * h).collect();
    let rho = |t: f64| spec.rho(T::lit(t)).as_f64();
    let pos_tol = 1e-12 * (1.0 + lambda * half_width);

    let symmetry = grid
        .iter()
        .map(|&t| (rho(t) - rho(-t)).abs())
        .fold(rho(0.0).abs(), f64::max);

    let positive: Vec<f64> = grid.iter().copied().filter(|t| *t > 0.0).collect();
    let monotone = positive
        .windows(2)
        .map(|w| (rho(w[0]) - rho(w[1])).max(0.0))
        .fold(0.0, f64::max);
    let ratio = positive
        .windows(2)
        .map(|w| (rho(w[1]) / w[1] - rho(w[0]) / w[0]).max(0.0))
        .fold(0.0, f64::max);

    let shifted = |t: f64| rho(t) + 0.5 * mu_bound * t * t;
    let convexity = grid
        .windows(3)
        .map(|w| (-(shifted(w[0]) - 2.0 * shifted(w[1]) + shifted(w[2]))).max(0.0))
        .fold(0.0, f64::max);

    let eps = 1e-9 * lambda.max(f64::MIN_POSITIVE);
    let slope_at_origin = match spec.rho_prime(T::lit(eps)) {
        Ok(d) => (d.as_f64() - lambda).abs(),
        Err(_) => f64::INFINITY,
    };

    let selection = match spec.flat_from() {
        Some(flat) => grid
            .iter()
            .filter(|t| **t >= flat.as_f64())
            .map(|&t| spec.rho_prime(T::lit(t)).map_or(f64::INFINITY, |d| d.as_f64().abs()))
            .fold(0.0, f64::max),
        None => f64::INFINITY,
    };

    AmenabilityReport {
        checks: vec![
            PropertyCheck {
                name: "symmetry",
                passed: symmetry <= pos_tol,
                worst_violation: symmetry,
            },
            PropertyCheck {
                name: "monotone",
                passed: monotone <= pos_tol,
                worst_violation: monotone,
            },
            PropertyCheck {
                name: "ratio_nonincreasing",
                passed: ratio <= pos_tol,
                worst_violation: ratio,
            },
            PropertyCheck {
                name: "weak_convexity",
                passed: convexity <= CONVEXITY_TOL,
                worst_violation: convexity,
            },
            PropertyCheck {
                name: "origin_slope",
                passed: slope_at_origin <= 1e-6 * lambda,
                worst_violation: slope_at_origin,
            },
            PropertyCheck {
                name: "selection",
                passed: selection == 0.0,
                worst_violation: selection,
            },
        ],
    }
}
