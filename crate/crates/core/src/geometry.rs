//! State domains described by oriented distance functions.
//!
//! A domain is the intersection of smooth pieces `{d_i > 0}`. The overall
//! distance is `min_i d_i`, with derivatives taken from the minimizing piece.
//! That is exact near the boundary of a smooth domain and near the faces of a
//! box; the kinks on the medial axis are never evaluated by formulas using
//! `D^2 d`, which only run on boundary layers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::CartesianGrid;
use crate::types::{Matrix, Vector};

type ScalarFn = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
type MatrixFn = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;

#[derive(Clone)]
pub enum PieceShape {
    /// Half-space `sign * (x[axis] - bound) > 0`.
    Slab { axis: usize, bound: f64, sign: f64 },
    /// Open ball.
    Ball { center: Vector, radius: f64 },
    Custom { distance: ScalarFn, gradient: VectorFn, hessian: MatrixFn },
}

impl std::fmt::Debug for PieceShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PieceShape::Slab { axis, bound, sign } => f
                .debug_struct("Slab")
                .field("axis", axis)
                .field("bound", bound)
                .field("sign", sign)
                .finish(),
            PieceShape::Ball { center, radius } => f
                .debug_struct("Ball")
                .field("center", &[center[0], center[1]])
                .field("radius", radius)
                .finish(),
            PieceShape::Custom { .. } => f.write_str("Custom"),
        }
    }
}

/// One smooth domain `{d_i > 0}` with its oriented distance.
#[derive(Debug, Clone)]
pub struct SmoothPiece {
    pub shape: PieceShape,
    /// Width of the tube around the boundary where `d_i` is C².
    pub tube_width: f64,
}

impl SmoothPiece {
    pub fn slab(axis: usize, bound: f64, inward_positive: bool, tube_width: f64) -> Self {
        let sign = if inward_positive { 1.0 } else { -1.0 };
        Self { shape: PieceShape::Slab { axis, bound, sign }, tube_width }
    }

    pub fn ball(center: Vector, radius: f64, tube_width: f64) -> Self {
        Self { shape: PieceShape::Ball { center, radius }, tube_width }
    }

    pub fn distance(&self, x: &Vector) -> f64 {
        match &self.shape {
            PieceShape::Slab { axis, bound, sign } => sign * (x[*axis] - bound),
            PieceShape::Ball { center, radius } => radius - (x - center).norm(),
            PieceShape::Custom { distance, .. } => distance(x),
        }
    }

    pub fn gradient(&self, x: &Vector) -> Vector {
        match &self.shape {
            PieceShape::Slab { axis, sign, .. } => {
                let mut g = Vector::zeros();
                g[*axis] = *sign;
                g
            }
            PieceShape::Ball { center, .. } => {
                let r = x - center;
                let n = r.norm();
                if n > 0.0 {
                    -r / n
                } else {
                    Vector::zeros()
                }
            }
            PieceShape::Custom { gradient, .. } => gradient(x),
        }
    }

    pub fn hessian(&self, x: &Vector, dim: usize) -> Matrix {
        match &self.shape {
            PieceShape::Slab { .. } => Matrix::zeros(),
            PieceShape::Ball { center, .. } => {
                let r = x - center;
                let n = r.norm();
                if n == 0.0 || dim < 2 {
                    return Matrix::zeros();
                }
                let u = r / n;
                -(Matrix::identity() - u * u.transpose()) / n
            }
            PieceShape::Custom { hessian, .. } => hessian(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Smooth,
    Generalized,
}

#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub dim: usize,
    pub pieces: Vec<SmoothPiece>,
    pub lo: Vector,
    pub hi: Vector,
    pub kind: DomainKind,
}

/// Distance value with the derivatives of the active piece.
#[derive(Debug, Clone, Copy)]
pub struct DistanceEval {
    pub value: f64,
    pub grad: Vector,
    pub hess: Matrix,
    pub active_piece: usize,
}

impl DomainSpec {
    /// Interval `(a, b)` as the intersection of two half-lines.
    pub fn interval(a: f64, b: f64, tube_width: f64) -> Result<Self> {
        if !(b > a) {
            return Err(Error::InvalidInput(format!("empty interval ({a}, {b})")));
        }
        Ok(Self {
            dim: 1,
            pieces: vec![
                SmoothPiece::slab(0, a, true, tube_width),
                SmoothPiece::slab(0, b, false, tube_width),
            ],
            lo: Vector::new(a, 0.0),
            hi: Vector::new(b, 0.0),
            kind: DomainKind::Smooth,
        })
    }

    /// Rectangle as the intersection of four slabs (a generalized C² domain).
    pub fn rectangle(lo: Vector, hi: Vector, tube_width: f64) -> Result<Self> {
        if !(hi[0] > lo[0] && hi[1] > lo[1]) {
            return Err(Error::InvalidInput("degenerate rectangle".into()));
        }
        let mut pieces = Vec::with_capacity(4);
        for axis in 0..2 {
            pieces.push(SmoothPiece::slab(axis, lo[axis], true, tube_width));
            pieces.push(SmoothPiece::slab(axis, hi[axis], false, tube_width));
        }
        Ok(Self { dim: 2, pieces, lo, hi, kind: DomainKind::Generalized })
    }

    pub fn disk(center: Vector, radius: f64, tube_width: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidInput(format!("disk radius must be positive, got {radius}")));
        }
        let r = Vector::new(radius, radius);
        Ok(Self {
            dim: 2,
            pieces: vec![SmoothPiece::ball(center, radius, tube_width)],
            lo: center - r,
            hi: center + r,
            kind: DomainKind::Smooth,
        })
    }

    pub fn min_tube_width(&self) -> f64 {
        self.pieces.iter().map(|p| p.tube_width).fold(f64::INFINITY, f64::min)
    }

    /// Value of `min_i d_i(x)` only.
    pub fn distance(&self, x: &Vector) -> f64 {
        self.pieces.iter().map(|p| p.distance(x)).fold(f64::INFINITY, f64::min)
    }

    /// `sum_i chi(d_i) Dd_i` with a C^2 cutoff `chi`: 1 below `width / 2`, 0 above `width`.
    ///
    /// Equals `Dd` within `width / 2` of a single piece and stays smooth
    /// across the medial axis, where `Dd` jumps.
    pub fn smooth_normal(&self, x: &Vector, width: f64) -> Vector {
        let chi = |d: f64| {
            let t = ((d - 0.5 * width) / (0.5 * width)).clamp(0.0, 1.0);
            1.0 - t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
        };
        self.pieces.iter().fold(Vector::zeros(), |acc, p| acc + p.gradient(x) * chi(p.distance(x)))
    }

    pub fn contains(&self, x: &Vector) -> bool {
        self.distance(x) > 0.0
    }

    /// Oriented distance with derivatives of the minimizing piece (lowest index on ties).
    pub fn signed_distance(&self, x: &Vector) -> DistanceEval {
        let mut best = 0;
        let mut value = f64::INFINITY;
        for (i, p) in self.pieces.iter().enumerate() {
            let d = p.distance(x);
            if d < value {
                value = d;
                best = i;
            }
        }
        let piece = &self.pieces[best];
        DistanceEval {
            value,
            grad: piece.gradient(x),
            hess: piece.hessian(x, self.dim),
            active_piece: best,
        }
    }

    pub fn grid(&self, h: f64) -> Result<CartesianGrid> {
        CartesianGrid::covering(self.dim, &self.lo, &self.hi, h)
    }
}

/// Boolean masks over the cells of the bounding-box grid.
#[derive(Debug, Clone)]
pub struct GridMasks {
    pub grid: CartesianGrid,
    /// Cell centres with `d > eps` (the shrunk domain).
    pub interior: Vec<bool>,
    /// Cell centres with `0 < d < delta` (the boundary layer).
    pub layer: Vec<bool>,
}

pub fn grid_masks(domain: &DomainSpec, h: f64, eps: f64, delta: f64) -> Result<GridMasks> {
    if !(eps >= 0.0 && eps < delta) {
        return Err(Error::InvalidInput(format!("need 0 <= eps < delta, got eps={eps}, delta={delta}")));
    }
    let grid = domain.grid(h)?;
    let dist: Vec<f64> = (0..grid.len()).map(|c| domain.distance(&grid.center(c))).collect();
    let interior: Vec<bool> = dist.iter().map(|&d| d > eps).collect();
    if !interior.iter().any(|&b| b) {
        return Err(Error::EmptyDomain { margin: eps });
    }
    let layer = dist.iter().map(|&d| d > 0.0 && d < delta).collect();
    Ok(GridMasks { grid, interior, layer })
}

/// Shrunk-domain mask `{d > eps}` on the bounding-box grid.
pub fn interior_mask(domain: &DomainSpec, grid: &CartesianGrid, eps: f64) -> Result<Vec<bool>> {
    let mask: Vec<bool> = (0..grid.len()).map(|c| domain.distance(&grid.center(c)) > eps).collect();
    if !mask.iter().any(|&b| b) {
        return Err(Error::EmptyDomain { margin: eps });
    }
    Ok(mask)
}

/// C² cut-off `phi` for the product barrier: identity on `[0, w/2]`,
/// constant one on `[w, inf)`, quintic Hermite blend in between.
#[derive(Debug, Clone)]
pub struct BlendProfile {
    pub width: f64,
    coeffs: [f64; 6],
}

impl BlendProfile {
    pub fn new(width: f64) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::BlendInfeasible { width, reason: "width must be positive".into() });
        }
        let w = 0.5 * width;
        // Hermite basis in tau for (value, slope*w) at 0 and value at 1.
        let h0 = [1.0, 0.0, 0.0, -10.0, 15.0, -6.0];
        let h1 = [0.0, 1.0, 0.0, -6.0, 8.0, -3.0];
        let h3 = [0.0, 0.0, 0.0, 10.0, -15.0, 6.0];
        let mut coeffs = [0.0; 6];
        for k in 0..6 {
            coeffs[k] = 0.5 * width * h0[k] + w * h1[k] + h3[k];
        }
        let profile = Self { width, coeffs };
        profile.verify()?;
        Ok(profile)
    }

    fn verify(&self) -> Result<()> {
        let (lo, hi) = (0.5 * self.width, self.width);
        let samples = 4000;
        for k in 0..=samples {
            let s = lo + (hi - lo) * k as f64 / samples as f64;
            let (v, d1, _) = self.eval(s);
            if d1 < -1e-12 {
                return Err(Error::BlendInfeasible {
                    width: self.width,
                    reason: format!("phi' = {d1:.3e} < 0 at s = {s}"),
                });
            }
            if v < s - 1e-12 {
                return Err(Error::BlendInfeasible {
                    width: self.width,
                    reason: format!("phi(s) = {v} < s at s = {s}"),
                });
            }
        }
        Ok(())
    }

    /// `(phi, phi', phi'')` at `s`.
    pub fn eval(&self, s: f64) -> (f64, f64, f64) {
        let half = 0.5 * self.width;
        if s <= half {
            return (s, 1.0, 0.0);
        }
        if s >= self.width {
            return (1.0, 0.0, 0.0);
        }
        let w = half;
        let t = (s - half) / w;
        let c = &self.coeffs;
        let v = c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
        let dv = c[1] + t * (2.0 * c[2] + t * (3.0 * c[3] + t * (4.0 * c[4] + t * 5.0 * c[5])));
        let ddv = 2.0 * c[2] + t * (6.0 * c[3] + t * (12.0 * c[4] + t * 20.0 * c[5]));
        (v, dv / w, ddv / (w * w))
    }
}

/// Product barrier `psi(x) = prod_i phi(d_i(x))` for intersection domains.
#[derive(Debug, Clone)]
pub struct BarrierFunction {
    pub profile: BlendProfile,
    domain: DomainSpec,
}

#[derive(Debug, Clone, Copy)]
pub struct BarrierEval {
    pub value: f64,
    pub grad: Vector,
    pub hess: Matrix,
}

pub fn build_barrier(domain: &DomainSpec, delta: f64) -> Result<BarrierFunction> {
    let tube = domain.min_tube_width();
    if delta > tube {
        return Err(Error::BlendInfeasible {
            width: delta,
            reason: format!("exceeds the smallest tube width {tube}"),
        });
    }
    Ok(BarrierFunction { profile: BlendProfile::new(delta)?, domain: domain.clone() })
}

impl BarrierFunction {
    pub fn blend_width(&self) -> f64 {
        self.profile.width
    }

    pub fn eval(&self, x: &Vector) -> BarrierEval {
        let dim = self.domain.dim;
        let parts: Vec<(f64, f64, f64, Vector, Matrix)> = self
            .domain
            .pieces
            .iter()
            .map(|p| {
                let (v, d1, d2) = self.profile.eval(p.distance(x));
                (v, d1, d2, p.gradient(x), p.hessian(x, dim))
            })
            .collect();
        let n = parts.len();
        let prod_except = |skip: &[usize]| -> f64 {
            parts
                .iter()
                .enumerate()
                .filter(|(j, _)| !skip.contains(j))
                .map(|(_, p)| p.0)
                .product()
        };
        let value = prod_except(&[]);
        let mut grad = Vector::zeros();
        let mut hess = Matrix::zeros();
        for i in 0..n {
            let (_, d1, d2, ref g, ref hd) = parts[i];
            if d1 == 0.0 && d2 == 0.0 {
                continue;
            }
            let others = prod_except(&[i]);
            grad += others * d1 * g;
            hess += others * (d1 * hd + d2 * g * g.transpose());
            for k in 0..n {
                if k == i || parts[k].1 == 0.0 {
                    continue;
                }
                let pk = &parts[k];
                hess += prod_except(&[i, k]) * d1 * pk.1 * g * pk.3.transpose();
            }
        }
        BarrierEval { value, grad, hess }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_square() -> DomainSpec {
        DomainSpec::rectangle(Vector::new(0.0, 0.0), Vector::new(1.0, 1.0), 0.5).unwrap()
    }

    #[test]
    fn distance_in_unit_square() {
        let sq = unit_square();
        let e = sq.signed_distance(&Vector::new(0.5, 0.5));
        assert_abs_diff_eq!(e.value, 0.5, epsilon = 1e-15);
        let e = sq.signed_distance(&Vector::new(0.1, 0.5));
        assert_abs_diff_eq!(e.value, 0.1, epsilon = 1e-15);
        assert_eq!(e.grad, Vector::new(1.0, 0.0));
        assert_eq!(e.active_piece, 0);
    }

    #[test]
    fn ties_pick_lowest_piece() {
        let sq = unit_square();
        let e = sq.signed_distance(&Vector::new(0.2, 0.2));
        assert_eq!(e.active_piece, 0);
    }

    #[test]
    fn disk_hessian_is_tangential_curvature() {
        let disk = DomainSpec::disk(Vector::zeros(), 1.0, 0.5).unwrap();
        let e = disk.signed_distance(&Vector::new(0.6, 0.0));
        assert_abs_diff_eq!(e.value, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(e.hess[(1, 1)], -1.0 / 0.6, epsilon = 1e-14);
        assert_abs_diff_eq!(e.hess[(0, 0)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.grad[0], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn exterior_points_have_negative_distance() {
        let disk = DomainSpec::disk(Vector::zeros(), 1.0, 0.5).unwrap();
        assert!(disk.signed_distance(&Vector::new(1.2, 0.0)).value < 0.0);
    }

    #[test]
    fn disk_derivatives_match_finite_differences() {
        let disk = DomainSpec::disk(Vector::new(0.1, -0.2), 1.0, 0.5).unwrap();
        let h = 1e-4;
        for &(x, y) in &[(0.7, 0.3), (-0.5, -0.6), (0.2, 0.75)] {
            let p = Vector::new(x, y);
            let e = disk.signed_distance(&p);
            for k in 0..2 {
                let mut dp = Vector::zeros();
                dp[k] = h;
                let fd = (disk.distance(&(p + dp)) - disk.distance(&(p - dp))) / (2.0 * h);
                assert!((fd - e.grad[k]).abs() < 10.0 * h * h);
                for l in 0..2 {
                    let mut dq = Vector::zeros();
                    dq[l] = h;
                    let g = |q: Vector| disk.pieces[0].gradient(&q)[k];
                    let fd2 = (g(p + dq) - g(p - dq)) / (2.0 * h);
                    assert!((fd2 - e.hess[(k, l)]).abs() < 10.0 * h * h);
                }
            }
            assert_abs_diff_eq!(e.grad.norm(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn barrier_plateau_and_linear_zone() {
        let sq = DomainSpec::rectangle(Vector::zeros(), Vector::new(1.0, 1.0), 0.3).unwrap();
        let b = build_barrier(&sq, 0.2).unwrap();
        assert_abs_diff_eq!(b.eval(&Vector::new(0.5, 0.5)).value, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.eval(&Vector::new(0.05, 0.5)).value, 0.05, epsilon = 1e-15);
        let line = DomainSpec::interval(0.0, 1.0, 0.3).unwrap();
        let b1 = build_barrier(&line, 0.2).unwrap();
        assert_abs_diff_eq!(b1.eval(&Vector::new(0.5, 0.0)).value, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn blend_is_c2_at_junctions() {
        let p = BlendProfile::new(0.2).unwrap();
        for s0 in [0.1, 0.2] {
            let (l, r) = (p.eval(s0 - 1e-12), p.eval(s0 + 1e-12));
            assert_abs_diff_eq!(l.0, r.0, epsilon = 1e-9);
            assert_abs_diff_eq!(l.1, r.1, epsilon = 1e-8);
            assert_abs_diff_eq!(l.2, r.2, epsilon = 1e-6);
        }
    }

    #[test]
    fn wide_blend_is_infeasible() {
        assert!(matches!(BlendProfile::new(1.5), Err(Error::BlendInfeasible { .. })));
    }

    #[test]
    fn barrier_wider_than_tube_is_rejected() {
        let sq = DomainSpec::rectangle(Vector::zeros(), Vector::new(1.0, 1.0), 0.1).unwrap();
        assert!(build_barrier(&sq, 0.2).is_err());
    }

    #[test]
    fn barrier_derivatives_match_finite_differences() {
        let sq = DomainSpec::rectangle(Vector::zeros(), Vector::new(1.0, 1.0), 0.5).unwrap();
        let b = build_barrier(&sq, 0.3).unwrap();
        let h = 1e-5;
        // Central differences err by h^2 |psi'''| / 6; the quintic blend has psi''' ~ 60 / w^3
        // and psi'''' ~ 360 / w^4.
        let w = 0.15f64;
        let tol = 10.0 * h * h / w.powi(3);
        for &(x, y) in &[(0.2, 0.21), (0.12, 0.9), (0.26, 0.74), (0.05, 0.5)] {
            let p = Vector::new(x, y);
            let e = b.eval(&p);
            for k in 0..2 {
                let mut dp = Vector::zeros();
                dp[k] = h;
                let fd = (b.eval(&(p + dp)).value - b.eval(&(p - dp)).value) / (2.0 * h);
                assert!((fd - e.grad[k]).abs() < tol, "grad {k} at {p:?}: {fd} vs {}", e.grad[k]);
                for l in 0..2 {
                    let mut dq = Vector::zeros();
                    dq[l] = h;
                    let fd2 = (b.eval(&(p + dq)).grad[k] - b.eval(&(p - dq)).grad[k]) / (2.0 * h);
                    assert!((fd2 - e.hess[(k, l)]).abs() < 10.0 * tol / w, "hess {k}{l} at {p:?}: {fd2} vs {}", e.hess[(k, l)]);
                }
            }
        }
    }

    #[test]
    fn masks_on_interval() {
        let line = DomainSpec::interval(0.0, 1.0, 0.3).unwrap();
        let m = grid_masks(&line, 0.25, 0.0, 0.2).unwrap();
        let centers: Vec<f64> = (0..m.grid.len()).filter(|&c| m.interior[c]).map(|c| m.grid.center(c)[0]).collect();
        assert_eq!(centers, vec![0.125, 0.375, 0.625, 0.875]);
        let m = grid_masks(&line, 0.25, 0.3, 0.4).unwrap();
        let centers: Vec<f64> = (0..m.grid.len()).filter(|&c| m.interior[c]).map(|c| m.grid.center(c)[0]).collect();
        assert_eq!(centers, vec![0.375, 0.625]);
    }

    #[test]
    fn masks_empty_square() {
        let sq = unit_square();
        assert!(matches!(grid_masks(&sq, 0.5, 0.3, 0.4), Err(Error::EmptyDomain { .. })));
    }

    #[test]
    fn masks_are_consistent() {
        let disk = DomainSpec::disk(Vector::zeros(), 1.0, 0.5).unwrap();
        let m = grid_masks(&disk, 0.125, 0.1, 0.3).unwrap();
        for c in 0..m.grid.len() {
            let d = disk.distance(&m.grid.center(c));
            assert_eq!(m.layer[c] && m.interior[c], d > 0.1 && d < 0.3);
        }
    }
}
