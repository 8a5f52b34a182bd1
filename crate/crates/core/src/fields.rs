//! Signed-distance fields: analytic primitives for synthetic scenes, the
//! Laplace-CDF density transform, and lattice sampling helpers.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::Real;

/// Optional world-space surface pattern mixed with the primitive color.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    /// 3D checkerboard: cells of edge `size` meters alternate between the
    /// primitive color and `color`.
    Checker { size: f64, color: [f64; 3] },
    /// Smooth blend toward `color` by `(3 + Σ sin(2π x_a / period)) / 6`.
    Waves { period: f64, color: [f64; 3] },
}

impl Pattern {
    fn color(&self) -> [f64; 3] {
        match self {
            Pattern::Checker { color, .. } | Pattern::Waves { color, .. } => *color,
        }
    }

    fn scale(&self) -> f64 {
        match self {
            Pattern::Checker { size, .. } => *size,
            Pattern::Waves { period, .. } => *period,
        }
    }

    /// Weight of the pattern color at `p`.
    fn mix(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Pattern::Checker { size, .. } => {
                let parity = p.iter().map(|v| (v / size).floor() as i64).sum::<i64>().rem_euclid(2);
                parity as f64
            }
            Pattern::Waves { period, .. } => {
                let k = std::f64::consts::TAU / period;
                (3.0 + p.iter().map(|v| (k * v).sin()).sum::<f64>()) / 6.0
            }
        }
    }
}

/// One analytic solid with an albedo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        color: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pattern: Option<Pattern>,
    },
    /// Axis-aligned box between two corners.
    Box {
        min: [f64; 3],
        max: [f64; 3],
        color: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pattern: Option<Pattern>,
    },
    /// Solid on the far side of a plane: `sdf = n·x - offset` with unit `n`.
    HalfSpace {
        normal: [f64; 3],
        offset: f64,
        color: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pattern: Option<Pattern>,
    },
}

impl Primitive {
    /// Base color.
    pub fn color(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { color, .. } | Primitive::Box { color, .. } | Primitive::HalfSpace { color, .. } => {
                *color
            }
        }
    }

    pub fn pattern(&self) -> Option<Pattern> {
        match self {
            Primitive::Sphere { pattern, .. } | Primitive::Box { pattern, .. } | Primitive::HalfSpace { pattern, .. } => {
                *pattern
            }
        }
    }

    /// Albedo at `p`.
    pub fn color_at(&self, p: &Vector3<f64>) -> [f64; 3] {
        let base = self.color();
        match self.pattern() {
            Some(pat) => {
                let (t, c) = (pat.mix(p), pat.color());
                if t == 1.0 {
                    return c;
                }
                [0, 1, 2].map(|k| base[k] + t * (c[k] - base[k]))
            }
            None => base,
        }
    }

    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius, .. } => (p - Vector3::from(*center)).norm() - radius,
            Primitive::Box { min, max, .. } => {
                let lo = Vector3::from(*min);
                let hi = Vector3::from(*max);
                let c = (lo + hi) * 0.5;
                let h = (hi - lo) * 0.5;
                let q = (p - c).abs() - h;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
            Primitive::HalfSpace { normal, offset, .. } => {
                let n = Vector3::from(*normal);
                n.dot(p) / n.norm() - offset
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !unit(&self.color()) {
            return Err(Error::Config(format!("primitive color {:?} is outside [0, 1]", self.color())));
        }
        if let Some(pat) = self.pattern() {
            if !(pat.scale() > 0.0 && pat.scale().is_finite()) || !unit(&pat.color()) {
                return Err(Error::Config(format!("invalid pattern {pat:?}")));
            }
        }
        let ok = match self {
            Primitive::Sphere { center, radius, .. } => *radius > 0.0 && center.iter().all(|v| v.is_finite()),
            Primitive::Box { min, max, .. } => (0..3).all(|a| min[a] < max[a] && max[a].is_finite() && min[a].is_finite()),
            Primitive::HalfSpace { normal, offset, .. } => {
                offset.is_finite() && Vector3::from(*normal).norm() > 1e-12
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("degenerate primitive {self:?}")))
        }
    }
}

/// Union of primitives; the SDF is the minimum over members.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnalyticSdf {
    pub primitives: Vec<Primitive>,
}

impl AnalyticSdf {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        AnalyticSdf { primitives }
    }

    /// Signed distance; `+inf` for an empty scene.
    pub fn eval(&self, p: &Vector3<f64>) -> f64 {
        self.primitives.iter().map(|q| q.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    /// Signed distance together with the albedo of the closest member at `p`.
    pub fn closest(&self, p: &Vector3<f64>) -> Option<(f64, [f64; 3])> {
        let mut best: Option<(f64, &Primitive)> = None;
        for q in &self.primitives {
            let d = q.sdf(p);
            if best.is_none_or(|(b, _)| d < b) {
                best = Some((d, q));
            }
        }
        best.map(|(d, q)| (d, q.color_at(p)))
    }
}

/// Laplace CDF `Psi_beta(s)` with zero mean and scale `beta`.
pub fn laplace_cdf(s: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::contract("laplace_cdf", format!("beta must be positive, got {beta}")));
    }
    Ok(if s <= 0.0 {
        0.5 * (s / beta).exp()
    } else {
        1.0 - 0.5 * (-s / beta).exp()
    })
}

/// Scalar density `beta^-1 · Psi_beta(-sdf)`.
pub fn density(sdf: f64, beta: f64) -> Result<f64> {
    Ok(laplace_cdf(-sdf, beta)? / beta)
}

/// Recorded density transform over a grid of signed distances. `beta` is a
/// `[1]` node.
pub fn sdf_to_density<T: Real>(tape: &mut Tape<T>, sdf: Var, beta: Var) -> Result<Var> {
    tape.laplace_density(sdf, beta)
}

/// Trilinear sampling of a `[A, B, C, ch]` lattice at continuous indices.
/// `None` points and points outside the lattice read as zero.
pub fn trilinear_sample<T: Real>(tape: &mut Tape<T>, grid: Var, points: &[Option<[f64; 3]>]) -> Result<Var> {
    tape.trilinear(grid, points)
}

/// Tape handles for one set of frustum fields.
#[derive(Clone, Copy, Debug)]
pub struct FieldGrids {
    /// `[H, W, D, 1]` signed distance.
    pub sdf: Var,
    /// `[H, W, D, 3]` color in `[0, 1]`.
    pub rgb: Var,
    /// `[H, W, D, 1]` density.
    pub density: Var,
    /// `[1]` positive scale.
    pub beta: Var,
}
