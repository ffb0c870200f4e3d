use serde::Serialize;

use super::{DiffusionField, HamiltonianModel};
use crate::geometry::DomainSpec;
use crate::models::diffusion::min_eigenvalue;
use crate::types::{directions, Vector};

/// Sample sets for [`check_structure`].
#[derive(Debug, Clone)]
pub struct StructureSamples {
    pub times: Vec<f64>,
    pub points: Vec<Vector>,
    pub p_magnitudes: Vec<f64>,
    pub directions: Vec<Vector>,
    /// Distance thresholds `1/r` defining the compacts `{d >= 1/r}`.
    pub compact_levels: Vec<f64>,
}

impl StructureSamples {
    /// Points on an interior lattice (kept off the medial axis), momenta up to `|p| = 100`.
    pub fn for_domain(domain: &DomainSpec) -> Self {
        let n = 9;
        let ny = if domain.dim > 1 { n } else { 1 };
        let mut points = Vec::new();
        for i in 0..n {
            for j in 0..ny {
                let mut x = Vector::zeros();
                x[0] = domain.lo[0] + (i as f64 + 0.3) / n as f64 * (domain.hi[0] - domain.lo[0]);
                if domain.dim > 1 {
                    x[1] = domain.lo[1] + (j as f64 + 0.3) / n as f64 * (domain.hi[1] - domain.lo[1]);
                }
                if domain.distance(&x) > 0.0 {
                    points.push(x);
                }
            }
        }
        Self {
            times: vec![0.0],
            points,
            p_magnitudes: vec![0.0, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0, 100.0],
            directions: directions(domain.dim, 16),
            compact_levels: vec![0.02, 0.05, 0.1],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StructureReport {
    pub h0_sup: f64,
    pub h0_ok: bool,
    /// `(level, C_K)`: sampled envelope of `|H_p|` on `{d >= level}`, divided by
    /// `1 + |p|^(q' - 1)` for power-growth models.
    pub linder_constants: Vec<(f64, f64)>,
    pub linder_ok: bool,
    pub quadgrow_ratio_10: f64,
    pub quadgrow_ratio_100: f64,
    pub quadgrow_unbounded: bool,
    pub convexity_violation: f64,
    pub bregman_min: f64,
    /// Smallest `C >= 0` with `H_x . p >= -C (1 + |p|^2)` on the samples.
    pub hx_constant: f64,
    pub min_ellipticity: f64,
    pub violations: Vec<String>,
    pub passed: bool,
}

/// Samples the standing structural assumptions of `model` and `a`.
pub fn check_structure(
    model: &HamiltonianModel,
    domain: &DomainSpec,
    a: &DiffusionField,
    samples: &StructureSamples,
) -> StructureReport {
    let dim = model.dim;
    let mut momenta = Vec::new();
    for &r in &samples.p_magnitudes {
        if r == 0.0 {
            momenta.push(Vector::zeros());
        } else {
            momenta.extend(samples.directions.iter().map(|d| d * r));
        }
    }
    let gamma = model.growth.hp_exponent();
    let mut violations = Vec::new();

    let mut h0_sup = 0.0f64;
    let mut linder = vec![0.0f64; samples.compact_levels.len()];
    let (mut ratio10, mut ratio100) = (0.0f64, 0.0f64);
    let mut convexity = f64::NEG_INFINITY;
    let mut bregman_min = f64::INFINITY;
    let mut hx = 0.0f64;
    let mut min_ell = f64::INFINITY;
    let fd = 1e-6;

    for &t in &samples.times {
        for x in &samples.points {
            let d = domain.distance(x);
            min_ell = min_ell.min(min_eigenvalue(&a.a(x), dim));
            h0_sup = h0_sup.max(model.eval(t, x, &Vector::zeros()).abs());
            for p in &momenta {
                let hv = model.eval(t, x, p);
                let hp = model.gradient(t, x, p);
                let pn = p.norm();
                let env = if gamma > 0.0 { hp.norm() / (1.0 + pn.powf(gamma)) } else { hp.norm() };
                for (k, &lvl) in samples.compact_levels.iter().enumerate() {
                    if d >= lvl {
                        linder[k] = linder[k].max(env);
                    }
                }
                let r = hv.abs() / (1.0 + pn * pn);
                if pn <= 10.0 + 1e-12 {
                    ratio10 = ratio10.max(r);
                }
                if pn <= 100.0 + 1e-12 {
                    ratio100 = ratio100.max(r);
                }
                let mut hxp = 0.0;
                for k in 0..dim {
                    let mut e = Vector::zeros();
                    e[k] = fd;
                    hxp += (model.eval(t, &(x + e), p) - model.eval(t, &(x - e), p)) / (2.0 * fd) * p[k];
                }
                hx = hx.max(-hxp / (1.0 + pn * pn));
                for q in &momenta {
                    let mid = model.eval(t, x, &((p + q) * 0.5));
                    convexity = convexity.max(mid - 0.5 * (hv + model.eval(t, x, q)));
                    bregman_min = bregman_min.min(model.bregman(t, x, q, p));
                }
            }
        }
    }

    let h0_ok = h0_sup <= model.h0_bound + 1e-12;
    if !h0_ok {
        violations.push(format!("sup |H(t,x,0)| = {h0_sup:.4e} exceeds declared h0_bound {}", model.h0_bound));
    }
    let mut linder_ok = linder.iter().all(|c| c.is_finite());
    if let super::GrowthKind::LinearInHp { bound } = model.growth.kind {
        if let Some(worst) = linder.iter().copied().reduce(f64::max) {
            if worst > bound * (1.0 + 1e-9) + 1e-12 {
                linder_ok = false;
                violations.push(format!("sampled |H_p| = {worst:.4e} exceeds declared bound {bound}"));
            }
        }
    }
    let quadgrow_unbounded = ratio10 > 0.0 && ratio100 / ratio10 > 2.0;
    if quadgrow_unbounded && model.growth.quadratic {
        violations.push(format!(
            "|H| / (1 + |p|^2) grows from {ratio10:.4e} (|p| <= 10) to {ratio100:.4e} (|p| <= 100)"
        ));
    }
    if model.convex_in_p && convexity > 1e-10 * (1.0 + ratio100) {
        violations.push(format!("midpoint convexity violated by {convexity:.4e}"));
    }
    if model.convex_in_p && bregman_min < -1e-10 * (1.0 + ratio100) {
        violations.push(format!("Bregman divergence reaches {bregman_min:.4e}"));
    }
    if let Some(c) = model.hx_lower {
        if hx > c + 1e-6 {
            violations.push(format!("H_x . p >= -C (1 + |p|^2) needs C = {hx:.4e} > declared {c}"));
        }
    }
    if min_ell < -1e-14 {
        violations.push(format!("diffusion matrix has negative eigenvalue {min_ell:.4e}"));
    }
    StructureReport {
        h0_sup,
        h0_ok,
        linder_constants: samples.compact_levels.iter().copied().zip(linder).collect(),
        linder_ok,
        quadgrow_ratio_10: ratio10,
        quadgrow_ratio_100: ratio100,
        quadgrow_unbounded,
        convexity_violation: convexity,
        bregman_min,
        hx_constant: hx,
        min_ellipticity: min_ell,
        passed: violations.is_empty(),
        violations,
    }
}
