use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DomainKind, DomainSpec, PieceShape};
use crate::models::diffusion::min_eigenvalue;
use crate::types::{directions, Vector};

type ScalarFn = Arc<dyn Fn(f64, &Vector, &Vector) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(f64, &Vector, &Vector) -> Vector + Send + Sync>;
type CostFn = Arc<dyn Fn(&Vector, &Vector) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GrowthKind {
    /// `|H_p| <= bound` uniformly.
    LinearInHp { bound: f64 },
    /// `|H_p| <= C (1 + |p|^(q' - 1))`.
    Power { q_prime: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Growth {
    pub kind: GrowthKind,
    /// Whether the model promises `|H| <= C (1 + |p|^2)`.
    pub quadratic: bool,
}

impl Growth {
    /// Exponent `gamma` in the envelope `|H_p| <= C (1 + |p|^gamma)`.
    pub fn hp_exponent(&self) -> f64 {
        match self.kind {
            GrowthKind::LinearInHp { .. } => 0.0,
            GrowthKind::Power { q_prime } => q_prime - 1.0,
        }
    }
}

/// `H(t, x, p)` together with `H_p` and structural metadata.
#[derive(Clone)]
pub struct HamiltonianModel {
    pub dim: usize,
    pub name: String,
    h: ScalarFn,
    hp: GradFn,
    pub h0_bound: f64,
    pub growth: Growth,
    pub convex_in_p: bool,
    pub hx_lower: Option<f64>,
}

impl std::fmt::Debug for HamiltonianModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HamiltonianModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("h0_bound", &self.h0_bound)
            .field("growth", &self.growth)
            .field("convex_in_p", &self.convex_in_p)
            .finish()
    }
}

impl HamiltonianModel {
    pub fn new(
        dim: usize,
        name: impl Into<String>,
        h: impl Fn(f64, &Vector, &Vector) -> f64 + Send + Sync + 'static,
        hp: impl Fn(f64, &Vector, &Vector) -> Vector + Send + Sync + 'static,
        growth: Growth,
    ) -> Self {
        Self {
            dim,
            name: name.into(),
            h: Arc::new(h),
            hp: Arc::new(hp),
            h0_bound: 0.0,
            growth,
            convex_in_p: true,
            hx_lower: None,
        }
    }

    pub fn with_h0_bound(mut self, b: f64) -> Self {
        self.h0_bound = b;
        self
    }

    pub fn with_convexity(mut self, convex: bool) -> Self {
        self.convex_in_p = convex;
        self
    }

    pub fn with_hx_lower(mut self, c: f64) -> Self {
        self.hx_lower = Some(c);
        self
    }

    /// `H = 0`.
    pub fn zero(dim: usize) -> Self {
        Self::new(
            dim,
            "zero",
            |_, _, _| 0.0,
            |_, _, _| Vector::zeros(),
            Growth { kind: GrowthKind::LinearInHp { bound: 0.0 }, quadratic: true },
        )
        .with_hx_lower(0.0)
    }

    /// `H = |p|^2 / 2`.
    pub fn quadratic(dim: usize) -> Self {
        Self::new(
            dim,
            "quadratic",
            |_, _, p| 0.5 * p.norm_squared(),
            |_, _, p| *p,
            Growth { kind: GrowthKind::Power { q_prime: 2.0 }, quadratic: true },
        )
        .with_hx_lower(0.0)
    }

    /// Linear `H(x, p) = v(x) . p`, so that `H_p = v`.
    pub fn linear(dim: usize, v: impl Fn(&Vector) -> Vector + Send + Sync + 'static, bound: f64) -> Self {
        let v = Arc::new(v);
        let v2 = v.clone();
        Self::new(
            dim,
            "linear",
            move |_, x, p| v(x).dot(p),
            move |_, x, _| v2(x),
            Growth { kind: GrowthKind::LinearInHp { bound }, quadratic: true },
        )
    }

    pub fn eval(&self, t: f64, x: &Vector, p: &Vector) -> f64 {
        (self.h)(t, x, p)
    }

    pub fn gradient(&self, t: f64, x: &Vector, p: &Vector) -> Vector {
        (self.hp)(t, x, p)
    }

    /// `E(q, p) = H(q) - H(p) - H_p(p) . (q - p)`, nonnegative for convex `H`.
    pub fn bregman(&self, t: f64, x: &Vector, q: &Vector, p: &Vector) -> f64 {
        self.eval(t, x, q) - self.eval(t, x, p) - self.gradient(t, x, p).dot(&(q - p))
    }
}

/// Running cost `L(x, alpha)` for the bounded-control model.
#[derive(Clone)]
pub enum RunningCost {
    /// `|alpha|^2 / 2`.
    Quadratic,
    Custom(CostFn),
}

impl std::fmt::Debug for RunningCost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunningCost::Quadratic => f.write_str("Quadratic"),
            RunningCost::Custom(_) => f.write_str("Custom"),
        }
    }
}

fn project_ball(a: Vector, r: f64) -> Vector {
    let n = a.norm();
    if n > r {
        a * (r / n)
    } else {
        a
    }
}

/// Maximizes `-alpha . p - L(x, alpha)` over `|alpha| <= r` by projected gradient ascent.
fn maximize_cost(cost: &CostFn, x: &Vector, p: &Vector, r: f64, dim: usize) -> Vector {
    let objective = |a: &Vector| -a.dot(p) - cost(x, a);
    let fd = 1e-6;
    let gradient = |a: &Vector| {
        let mut g = Vector::zeros();
        for k in 0..dim {
            let mut e = Vector::zeros();
            e[k] = fd;
            g[k] = -p[k] - (cost(x, &(a + e)) - cost(x, &(a - e))) / (2.0 * fd);
        }
        g
    };
    let mut a = project_ball(-p, r);
    let mut val = objective(&a);
    let mut step = 1.0;
    for _ in 0..50 {
        let g = gradient(&a);
        let mut accepted = false;
        while step > 1e-14 {
            let cand = project_ball(a + g * step, r);
            let v = objective(&cand);
            if v >= val {
                let moved = (cand - a).norm();
                a = cand;
                val = v;
                accepted = moved > 1e-10;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    a
}

/// Bounded controls: drift `M Dd(x) + alpha` with `|alpha| <= radius`.
pub fn example1_hamiltonian(m: f64, radius: f64, cost: RunningCost, domain: &DomainSpec) -> Result<HamiltonianModel> {
    if !(m >= 0.0 && radius > 0.0) {
        return Err(Error::InvalidInput(format!("need M >= 0 and radius > 0, got M={m}, radius={radius}")));
    }
    let dim = domain.dim;
    let width = domain.min_tube_width();
    let dom = domain.clone();
    let normal = Arc::new(move |x: &Vector| dom.smooth_normal(x, width));
    // Cutoffs of two pieces overlap only near corners; axis slabs meet at right angles.
    let all_slabs = domain.pieces.iter().all(|p| matches!(p.shape, PieceShape::Slab { .. }));
    let normal_bound = match domain.kind {
        DomainKind::Smooth => 1.0,
        DomainKind::Generalized if all_slabs => std::f64::consts::SQRT_2,
        DomainKind::Generalized => 2.0,
    };
    let growth = Growth { kind: GrowthKind::LinearInHp { bound: m * normal_bound + radius }, quadratic: true };
    let model = match cost {
        RunningCost::Quadratic => {
            let n2 = normal.clone();
            let h = move |_: f64, x: &Vector, p: &Vector| {
                let dd = normal(x);
                let n = p.norm();
                let sup = if n <= radius { 0.5 * n * n } else { radius * n - 0.5 * radius * radius };
                sup - m * dd.dot(p)
            };
            let hp = move |_: f64, x: &Vector, p: &Vector| {
                -m * n2(x) + project_ball(*p, radius)
            };
            HamiltonianModel::new(dim, "example1", h, hp, growth)
        }
        RunningCost::Custom(l) => {
            check_cost_convexity(&l, domain, radius)?;
            let (l2, n2) = (l.clone(), normal.clone());
            let h = move |_: f64, x: &Vector, p: &Vector| {
                let a = maximize_cost(&l, x, p, radius, dim);
                -a.dot(p) - m * normal(x).dot(p) - l(x, &a)
            };
            let hp = move |_: f64, x: &Vector, p: &Vector| {
                let a = maximize_cost(&l2, x, p, radius, dim);
                -m * n2(x) - a
            };
            HamiltonianModel::new(dim, "example1", h, hp, growth)
        }
    };
    Ok(model.with_h0_bound(0.0))
}

fn check_cost_convexity(l: &CostFn, domain: &DomainSpec, radius: f64) -> Result<()> {
    let dim = domain.dim;
    let fd = 1e-4;
    let mut sample = 0;
    let xs: Vec<Vector> = (1..5)
        .map(|k| {
            let s = k as f64 / 5.0;
            domain.lo + (domain.hi - domain.lo) * s
        })
        .collect();
    for x in &xs {
        for rad in [0.0, 0.5 * radius, 0.9 * radius] {
            for dir in directions(dim, 8) {
                let a = dir * rad;
                let mut hess = nalgebra::Matrix2::<f64>::zeros();
                for i in 0..dim {
                    for j in 0..dim {
                        let mut ei = Vector::zeros();
                        let mut ej = Vector::zeros();
                        ei[i] = fd;
                        ej[j] = fd;
                        hess[(i, j)] = (l(x, &(a + ei + ej)) - l(x, &(a + ei - ej)) - l(x, &(a - ei + ej))
                            + l(x, &(a - ei - ej)))
                            / (4.0 * fd * fd);
                    }
                }
                let ev = min_eigenvalue(&hess, dim);
                if ev < -1e-6 {
                    return Err(Error::NonConvexCost { eigenvalue: ev, sample });
                }
                sample += 1;
            }
        }
    }
    Ok(())
}

/// Unbounded controls in the cone `alpha_i >= 0` with `B(x) = diag(Dd(x))` and `L = eta |alpha|^q`.
pub fn example2_hamiltonian(
    m: f64,
    eta: f64,
    q: f64,
    c0: f64,
    domain: &DomainSpec,
    quadratic_guard: bool,
) -> Result<HamiltonianModel> {
    if !(q > 1.0 && eta > 0.0) {
        return Err(Error::InvalidInput(format!("need q > 1 and eta > 0, got q={q}, eta={eta}")));
    }
    if quadratic_guard && q < 2.0 {
        return Err(Error::GrowthViolation { q });
    }
    let _ = c0;
    let dim = domain.dim;
    let q_prime = q / (q - 1.0);
    let optimal = move |dd: &Vector, p: &Vector| -> (Vector, f64) {
        let mut c = Vector::zeros();
        for k in 0..dim {
            c[k] = (-dd[k] * p[k]).max(0.0);
        }
        let n = c.norm();
        if n == 0.0 {
            return (Vector::zeros(), 0.0);
        }
        let r = (n / (eta * q)).powf(1.0 / (q - 1.0));
        (c * (r / n), (1.0 - 1.0 / q) * r * n)
    };
    let (d1, d2) = (domain.clone(), domain.clone());
    let h = move |_: f64, x: &Vector, p: &Vector| {
        let dd = d1.signed_distance(x).grad;
        -m * dd.dot(p) + optimal(&dd, p).1
    };
    let hp = move |_: f64, x: &Vector, p: &Vector| {
        let dd = d2.signed_distance(x).grad;
        let (a, _) = optimal(&dd, p);
        -m * dd - dd.component_mul(&a)
    };
    let growth = Growth { kind: GrowthKind::Power { q_prime }, quadratic: q >= 2.0 };
    Ok(HamiltonianModel::new(dim, "example2", h, hp, growth).with_h0_bound(0.0))
}

/// Clamps `H` to `[-1/eps, 1/eps]`; `H_p` is zero wherever the clamp is active.
pub fn truncate_hamiltonian(model: &HamiltonianModel, eps: f64) -> Result<HamiltonianModel> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("truncation level needs eps > 0, got {eps}")));
    }
    let level = 1.0 / eps;
    let (h1, h2, hp) = (model.h.clone(), model.h.clone(), model.hp.clone());
    let mut out = HamiltonianModel::new(
        model.dim,
        format!("{}_truncated", model.name),
        move |t, x, p| h1(t, x, p).clamp(-level, level),
        move |t, x, p| {
            let v = h2(t, x, p);
            if v.abs() > level {
                Vector::zeros()
            } else {
                hp(t, x, p)
            }
        },
        model.growth,
    );
    out.h0_bound = model.h0_bound.min(level);
    out.convex_in_p = model.convex_in_p;
    out.hx_lower = model.hx_lower;
    Ok(out)
}
