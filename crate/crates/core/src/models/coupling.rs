use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::grid::MaskedGrid;
use crate::types::Vector;

type ProfileFn = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum LocalCoupling {
    /// `strength * m`.
    Linear { strength: f64 },
    /// `strength * m / (1 + m / scale)`, bounded by `strength * scale`.
    Saturating { strength: f64, scale: f64 },
}

impl LocalCoupling {
    fn apply(&self, m: f64) -> f64 {
        match *self {
            LocalCoupling::Linear { strength } => strength * m,
            LocalCoupling::Saturating { strength, scale } => {
                let m = m.max(0.0);
                strength * m / (1.0 + m / scale)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum CouplingMode {
    None,
    Local(LocalCoupling),
    /// Gaussian kernel `strength * exp(-|x - y|^2 / (2 width^2))` convolved with `m`.
    Convolution { strength: f64, width: f64 },
}

/// Coupling `profile(x) + c[m](x)` used for both the running cost `F` and the terminal cost `G`.
#[derive(Clone)]
pub struct Coupling {
    pub mode: CouplingMode,
    profile: Option<ProfileFn>,
    /// Declared bound on `|profile|` plus the bounded part of the coupling.
    pub sup_bound: f64,
    pub lipschitz_in_x: Option<f64>,
}

pub type CouplingF = Coupling;
pub type CouplingG = Coupling;

impl std::fmt::Debug for Coupling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Coupling")
            .field("mode", &self.mode)
            .field("has_profile", &self.profile.is_some())
            .field("sup_bound", &self.sup_bound)
            .finish()
    }
}

impl Coupling {
    pub fn new(mode: CouplingMode) -> Self {
        let sup_bound = match mode {
            CouplingMode::None => 0.0,
            CouplingMode::Local(LocalCoupling::Linear { .. }) => f64::INFINITY,
            CouplingMode::Local(LocalCoupling::Saturating { strength, scale }) => (strength * scale).abs(),
            CouplingMode::Convolution { .. } => f64::INFINITY,
        };
        Self { mode, profile: None, sup_bound, lipschitz_in_x: None }
    }

    pub fn zero() -> Self {
        Self::new(CouplingMode::None)
    }

    /// Adds an `m`-independent term; `bound` must dominate `|profile|`.
    pub fn with_profile(mut self, profile: impl Fn(&Vector) -> f64 + Send + Sync + 'static, bound: f64) -> Self {
        self.profile = Some(Arc::new(profile));
        if self.sup_bound.is_finite() {
            self.sup_bound += bound;
        }
        self
    }

    pub fn with_lipschitz(mut self, c: f64) -> Self {
        self.lipschitz_in_x = Some(c);
        self
    }

    /// Monotone in the sense `<c[m1] - c[m2], m1 - m2> >= 0`.
    pub fn is_monotone(&self) -> bool {
        match self.mode {
            CouplingMode::None => true,
            CouplingMode::Local(LocalCoupling::Linear { strength }) => strength >= 0.0,
            CouplingMode::Local(LocalCoupling::Saturating { strength, scale }) => strength >= 0.0 && scale > 0.0,
            // Gaussian kernels are positive definite.
            CouplingMode::Convolution { strength, .. } => strength >= 0.0,
        }
    }

    /// Whether the output ignores the density entirely.
    pub fn is_decoupled(&self) -> bool {
        matches!(self.mode, CouplingMode::None)
    }

    pub fn profile_at(&self, x: &Vector) -> f64 {
        self.profile.as_ref().map_or(0.0, |p| p(x))
    }

    /// Values on the active cells of `grid` for the density slice `m`.
    pub fn evaluate(&self, grid: &MaskedGrid, m: &[f64]) -> Vec<f64> {
        let n = grid.len();
        let mut out: Vec<f64> = (0..n).map(|c| self.profile_at(&grid.center(c))).collect();
        match self.mode {
            CouplingMode::None => {}
            CouplingMode::Local(law) => {
                for (o, &v) in out.iter_mut().zip(m) {
                    *o += law.apply(v);
                }
            }
            CouplingMode::Convolution { strength, width } => {
                let vol = grid.cart.cell_volume();
                let centers: Vec<Vector> = (0..n).map(|c| grid.center(c)).collect();
                let s2 = 2.0 * width * width;
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (j, y) in centers.iter().enumerate() {
                        acc += (-(centers[i] - y).norm_squared() / s2).exp() * m[j];
                    }
                    *o += strength * acc * vol;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CartesianGrid;

    fn unit_grid(n: usize) -> MaskedGrid {
        let h = 1.0 / n as f64;
        let cart = CartesianGrid::covering(1, &Vector::zeros(), &Vector::new(1.0, 0.0), h).unwrap();
        MaskedGrid::new(cart, vec![true; n]).unwrap()
    }

    fn pairing(c: &Coupling, g: &MaskedGrid, m1: &[f64], m2: &[f64]) -> f64 {
        let (f1, f2) = (c.evaluate(g, m1), c.evaluate(g, m2));
        (0..m1.len()).map(|i| (f1[i] - f2[i]) * (m1[i] - m2[i])).sum()
    }

    #[test]
    fn monotone_modes_have_nonnegative_pairing() {
        let g = unit_grid(32);
        let m1: Vec<f64> = (0..32).map(|i| 1.0 + (i as f64 * 0.4).sin()).collect();
        let m2: Vec<f64> = (0..32).map(|i| 1.0 + (i as f64 * 0.9).cos() * 0.5).collect();
        for mode in [
            CouplingMode::Local(LocalCoupling::Linear { strength: 1.0 }),
            CouplingMode::Local(LocalCoupling::Saturating { strength: 2.0, scale: 0.5 }),
            CouplingMode::Convolution { strength: 1.0, width: 0.1 },
        ] {
            let c = Coupling::new(mode).with_profile(|x| x[0], 1.0);
            assert!(c.is_monotone());
            assert!(pairing(&c, &g, &m1, &m2) >= -1e-12);
        }
    }

    #[test]
    fn saturating_respects_declared_bound() {
        let g = unit_grid(8);
        let c = Coupling::new(CouplingMode::Local(LocalCoupling::Saturating { strength: 2.0, scale: 0.5 }));
        let m = vec![1e6; 8];
        assert!(c.evaluate(&g, &m).iter().all(|v| *v <= c.sup_bound));
    }

    #[test]
    fn profile_only() {
        let g = unit_grid(4);
        let c = Coupling::zero().with_profile(|x| 2.0 * x[0], 2.0);
        assert_eq!(c.evaluate(&g, &[5.0; 4]), vec![0.25, 0.75, 1.25, 1.75]);
        assert_eq!(c.sup_bound, 2.0);
    }
}
