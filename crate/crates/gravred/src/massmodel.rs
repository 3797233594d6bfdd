//! Rigid mass densities, Newtonian potentials and gravitational coupling energies.
//!
//! Densities are unions of homogeneous spheres, homogeneous axis-aligned boxes and
//! Plummer-smoothed points. The coupling energy of two configurations is
//! `G ∫∫ Δρ(x) Δρ(y) / |x - y|` with `Δρ = ρa - ρb`; its decay time is `ħ / E`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::constants::{G, HBAR};
use crate::error::{Error, Result};
use crate::quad::{gauss_legendre, integrate, QuadOptions};

pub type Vec3 = [f64; 3];

/// Default softening length of smoothed points, m.
pub const DEFAULT_SMOOTHING: f64 = 1e-9;

/// Default relative tolerance of coupling-energy quadrature.
pub const DEFAULT_COUPLING_TOL: f64 = 1e-4;

const POTENTIAL_TOL: f64 = 1e-9;

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn finite3(v: Vec3) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Primitive {
    Sphere {
        center: Vec3,
        radius: f64,
        mass: f64,
    },
    Box {
        center: Vec3,
        half_extents: Vec3,
        mass: f64,
    },
    SmoothedPoint {
        center: Vec3,
        mass: f64,
        #[serde(default = "default_smoothing")]
        smoothing: f64,
    },
}

fn default_smoothing() -> f64 {
    DEFAULT_SMOOTHING
}

impl Primitive {
    pub fn sphere(center: Vec3, radius: f64, mass: f64) -> Self {
        Primitive::Sphere {
            center,
            radius,
            mass,
        }
    }

    pub fn cuboid(center: Vec3, half_extents: Vec3, mass: f64) -> Self {
        Primitive::Box {
            center,
            half_extents,
            mass,
        }
    }

    pub fn point(center: Vec3, mass: f64) -> Self {
        Primitive::SmoothedPoint {
            center,
            mass,
            smoothing: DEFAULT_SMOOTHING,
        }
    }

    pub fn center(&self) -> Vec3 {
        match *self {
            Primitive::Sphere { center, .. }
            | Primitive::Box { center, .. }
            | Primitive::SmoothedPoint { center, .. } => center,
        }
    }

    pub fn mass(&self) -> f64 {
        match *self {
            Primitive::Sphere { mass, .. }
            | Primitive::Box { mass, .. }
            | Primitive::SmoothedPoint { mass, .. } => mass,
        }
    }

    pub fn translated(&self, by: Vec3) -> Self {
        let mut p = self.clone();
        match &mut p {
            Primitive::Sphere { center, .. }
            | Primitive::Box { center, .. }
            | Primitive::SmoothedPoint { center, .. } => *center = add(*center, by),
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Primitive::Sphere {
                center,
                radius,
                mass,
            } => finite3(center) && radius.is_finite() && radius > 0.0 && mass.is_finite() && mass >= 0.0,
            Primitive::Box {
                center,
                half_extents,
                mass,
            } => {
                finite3(center)
                    && finite3(half_extents)
                    && half_extents.iter().all(|h| *h > 0.0)
                    && mass.is_finite()
                    && mass >= 0.0
            }
            Primitive::SmoothedPoint {
                center,
                mass,
                smoothing,
            } => finite3(center) && smoothing.is_finite() && smoothing > 0.0 && mass.is_finite() && mass >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid mass primitive {self:?}")))
        }
    }

    /// Half-width of the support along each axis (smoothed points: 10 ε).
    pub fn half_widths(&self) -> Vec3 {
        match *self {
            Primitive::Sphere { radius, .. } => [radius; 3],
            Primitive::Box { half_extents, .. } => half_extents,
            Primitive::SmoothedPoint { smoothing, .. } => [10.0 * smoothing; 3],
        }
    }

    /// Mass density at `x`, kg/m³.
    pub fn density_at(&self, x: Vec3) -> f64 {
        match *self {
            Primitive::Sphere {
                center,
                radius,
                mass,
            } => {
                if norm(sub(x, center)) <= radius {
                    mass / (4.0 / 3.0 * std::f64::consts::PI * radius.powi(3))
                } else {
                    0.0
                }
            }
            Primitive::Box {
                center,
                half_extents,
                mass,
            } => {
                let d = sub(x, center);
                if (0..3).all(|i| d[i].abs() <= half_extents[i]) {
                    mass / (8.0 * half_extents[0] * half_extents[1] * half_extents[2])
                } else {
                    0.0
                }
            }
            Primitive::SmoothedPoint {
                center,
                mass,
                smoothing,
            } => {
                let r2 = norm(sub(x, center)).powi(2);
                let e2 = smoothing * smoothing;
                3.0 * mass / (4.0 * std::f64::consts::PI * smoothing.powi(3)) * (1.0 + r2 / e2).powf(-2.5)
            }
        }
    }

    /// `∫ ρ(y) / |x - y| d³y` in kg/m; the potential is `-G` times this.
    pub fn kernel_at(&self, x: Vec3) -> Result<f64> {
        match *self {
            Primitive::Sphere {
                center,
                radius,
                mass,
            } => Ok(sphere_kernel(mass, radius, norm(sub(x, center)))),
            Primitive::SmoothedPoint {
                center,
                mass,
                smoothing,
            } => {
                let r = norm(sub(x, center));
                Ok(mass / (r * r + smoothing * smoothing).sqrt())
            }
            Primitive::Box {
                center,
                half_extents,
                mass,
            } => box_kernel(center, half_extents, mass, x, POTENTIAL_TOL),
        }
    }

    /// `∫∫ ρ(x) g(x) dx² dx³` over the plane `x¹ = x1`.
    pub fn transverse_integral(&self, x1: f64, g: &dyn Fn(Vec3) -> f64, order: usize) -> f64 {
        let rule = gauss_legendre(order);
        match *self {
            Primitive::Box {
                center,
                half_extents: h,
                mass,
            } => {
                if (x1 - center[0]).abs() > h[0] {
                    return 0.0;
                }
                let rho = mass / (8.0 * h[0] * h[1] * h[2]);
                let mut s = 0.0;
                for (u, wu) in rule.nodes.iter().zip(&rule.weights) {
                    for (v, wv) in rule.nodes.iter().zip(&rule.weights) {
                        s += wu * wv * g([x1, center[1] + h[1] * u, center[2] + h[2] * v]);
                    }
                }
                rho * s * h[1] * h[2]
            }
            Primitive::Sphere {
                center,
                radius,
                mass,
            } => {
                let dx = x1 - center[0];
                if dx.abs() > radius {
                    return 0.0;
                }
                let a = (radius * radius - dx * dx).sqrt();
                let rho = mass / (4.0 / 3.0 * std::f64::consts::PI * radius.powi(3));
                polar_disc(center, x1, a, g, order) * rho
            }
            Primitive::SmoothedPoint {
                center, smoothing, ..
            } => {
                let reach = 10.0 * smoothing;
                let dx = x1 - center[0];
                if dx.abs() > reach {
                    return 0.0;
                }
                let a = (reach * reach - dx * dx).sqrt();
                let p = self.clone();
                let weighted = move |y: Vec3| p.density_at(y) * g(y);
                polar_disc(center, x1, a, &weighted, order)
            }
        }
    }

    fn sort_key(&self) -> [f64; 8] {
        match *self {
            Primitive::Sphere {
                center,
                radius,
                mass,
            } => [0.0, center[0], center[1], center[2], radius, 0.0, 0.0, mass],
            Primitive::Box {
                center,
                half_extents,
                mass,
            } => [
                1.0,
                center[0],
                center[1],
                center[2],
                half_extents[0],
                half_extents[1],
                half_extents[2],
                mass,
            ],
            Primitive::SmoothedPoint {
                center,
                mass,
                smoothing,
            } => [2.0, center[0], center[1], center[2], smoothing, 0.0, 0.0, mass],
        }
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.sort_key(), other.sort_key());
        for i in 0..8 {
            match a[i].total_cmp(&b[i]) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    }
}

fn polar_disc(center: Vec3, x1: f64, radius: f64, g: &dyn Fn(Vec3) -> f64, order: usize) -> f64 {
    let rule = gauss_legendre(order);
    let tau = 2.0 * std::f64::consts::PI;
    let mut s = 0.0;
    for (u, wu) in rule.nodes.iter().zip(&rule.weights) {
        let r = 0.5 * radius * (u + 1.0);
        for (v, wv) in rule.nodes.iter().zip(&rule.weights) {
            let phi = 0.5 * tau * (v + 1.0);
            s += wu * wv * r * g([x1, center[1] + r * phi.cos(), center[2] + r * phi.sin()]);
        }
    }
    s * 0.5 * radius * 0.5 * tau
}

/// Homogeneous sphere: `m/r` outside, `m(3R² - r²)/(2R³)` inside.
pub fn sphere_kernel(mass: f64, radius: f64, r: f64) -> f64 {
    if r >= radius {
        mass / r
    } else {
        mass * (3.0 * radius * radius - r * r) / (2.0 * radius.powi(3))
    }
}

/// `∫_{[0,L]} 1/|y| d³y` for a box with one corner at the evaluation point.
///
/// Each of the three Duffy pyramids with apex at the corner integrates exactly in
/// the radial direction and in one face direction; the remaining coordinate is
/// integrated with fixed-order Gauss on pieces that are refined geometrically
/// toward the near-singular end.
fn corner_box_kernel(l: Vec3) -> f64 {
    if l.iter().any(|v| *v <= 0.0) {
        return 0.0;
    }
    let vol = l[0] * l[1] * l[2];
    let mut total = 0.0;
    for d in 0..3 {
        let (e, f) = ((d + 1) % 3, (d + 2) % 3);
        let (ld, le, lf) = (l[d], l[e], l[f]);
        let g = |u: f64| {
            let a = (ld * ld + le * le * u * u).sqrt();
            (lf / a).asinh() / lf
        };
        let mut pieces = 0.0;
        let mut left = 0.0;
        let mut right = (ld / le).min(1.0) * 0.5;
        while left < 1.0 {
            if right >= 0.999 {
                right = 1.0;
            }
            pieces += crate::quad::gauss_1d(g, left, right, 12);
            left = right;
            right = (2.0 * right).min(1.0);
        }
        total += 0.5 * vol * pieces;
    }
    total
}

/// Signed lengths of intervals that all start at `x` and combine to `[lo, hi]`.
fn anchored_intervals(lo: f64, hi: f64, x: f64) -> [(f64, f64); 2] {
    if x <= lo {
        [(hi - x, 1.0), (lo - x, -1.0)]
    } else if x >= hi {
        [(x - lo, 1.0), (x - hi, -1.0)]
    } else {
        [(x - lo, 1.0), (hi - x, 1.0)]
    }
}

fn box_kernel(center: Vec3, half: Vec3, mass: f64, x: Vec3, tol: f64) -> Result<f64> {
    if !finite3(x) {
        return Err(Error::invalid("non-finite evaluation point"));
    }
    let rho = mass / (8.0 * half[0] * half[1] * half[2]);
    let lo = sub(center, half);
    let hi = add(center, half);
    let dist = norm(sub(x, center));
    if dist > 3.0 * norm(half) {
        let est = integrate(
            |y: [f64; 3]| 1.0 / norm(sub(y, x)),
            lo,
            hi,
            QuadOptions {
                rel_tol: tol,
                order: 5,
                ..Default::default()
            },
        )?;
        return Ok(rho * est.value);
    }
    // Near field: write the box as a signed sum of boxes that each have a corner at x.
    let parts = [0, 1, 2].map(|i| anchored_intervals(lo[i], hi[i], x[i]));
    let mut total = 0.0;
    for a in &parts[0] {
        for b in &parts[1] {
            for c in &parts[2] {
                let sign = a.1 * b.1 * c.1;
                total += sign * corner_box_kernel([a.0, b.0, c.0]);
            }
        }
    }
    Ok(rho * total)
}

/// A rigid mass configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MassDensity {
    #[serde(default)]
    pub primitives: Vec<Primitive>,
}

impl MassDensity {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        MassDensity { primitives }
    }

    pub fn empty() -> Self {
        MassDensity::default()
    }

    pub fn validate(&self) -> Result<()> {
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    pub fn total_mass(&self) -> f64 {
        self.primitives.iter().map(Primitive::mass).sum()
    }

    pub fn translated(&self, by: Vec3) -> Self {
        MassDensity::new(self.primitives.iter().map(|p| p.translated(by)).collect())
    }

    pub fn density_at(&self, x: Vec3) -> f64 {
        self.primitives.iter().map(|p| p.density_at(x)).sum()
    }

    /// Union of the two configurations.
    pub fn union(&self, other: &MassDensity) -> MassDensity {
        let mut prims = self.primitives.clone();
        prims.extend(other.primitives.iter().cloned());
        MassDensity::new(prims)
    }
}

/// Newtonian potential φ(x) = -G ∫ ρ(y)/|x - y| d³y, J/kg.
pub fn potential_at(density: &MassDensity, point: Vec3) -> Result<f64> {
    if !finite3(point) {
        return Err(Error::invalid("non-finite evaluation point"));
    }
    density.validate()?;
    let mut psi = 0.0;
    for p in &density.primitives {
        psi += p.kernel_at(point)?;
    }
    Ok(-G * psi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Closed forms where available, quadrature elsewhere.
    Analytic,
    /// Every primitive integrated numerically against the difference potential.
    Quadrature,
}

#[derive(Debug, Clone, Copy)]
pub struct CouplingOptions {
    pub method: Method,
    pub rel_tol: f64,
}

impl Default for CouplingOptions {
    fn default() -> Self {
        CouplingOptions {
            method: Method::Analytic,
            rel_tol: DEFAULT_COUPLING_TOL,
        }
    }
}

/// One entry of the signed difference density `ρa - ρb`.
#[derive(Debug, Clone)]
struct Signed {
    prim: Primitive,
    sign: f64,
}

/// Signed primitives of `a - b` with common primitives cancelled, in canonical order.
fn difference(a: &MassDensity, b: &MassDensity) -> Vec<Signed> {
    let mut rest_b: Vec<Option<&Primitive>> = b.primitives.iter().map(Some).collect();
    let mut out = Vec::new();
    for p in &a.primitives {
        if let Some(slot) = rest_b.iter_mut().find(|q| q.is_some_and(|q| q == p)) {
            *slot = None;
        } else {
            out.push(Signed {
                prim: p.clone(),
                sign: 1.0,
            });
        }
    }
    for q in rest_b.into_iter().flatten() {
        out.push(Signed {
            prim: q.clone(),
            sign: -1.0,
        });
    }
    out.retain(|s| s.prim.mass() > 0.0);
    out.sort_by(|x, y| x.prim.canonical_cmp(&y.prim).then(x.sign.total_cmp(&y.sign)));
    out
}

/// Primitives of `a - b` with common ones cancelled, as `(sign, primitive)` pairs.
pub fn signed_difference(a: &MassDensity, b: &MassDensity) -> Vec<(f64, Primitive)> {
    difference(a, b).into_iter().map(|s| (s.sign, s.prim)).collect()
}

/// `Σ sign · ψ_p(x)` over a signed primitive list.
pub fn signed_kernel_at(diff: &[(f64, Primitive)], x: Vec3) -> Result<f64> {
    let mut acc = 0.0;
    for (sign, p) in diff {
        acc += sign * p.kernel_at(x)?;
    }
    Ok(acc)
}

fn point_point(p: &Primitive, q: &Primitive) -> f64 {
    match (p, q) {
        (
            Primitive::SmoothedPoint {
                center: c1,
                mass: m1,
                smoothing: e1,
            },
            Primitive::SmoothedPoint {
                center: c2,
                mass: m2,
                smoothing: e2,
            },
        ) => {
            let d = norm(sub(*c1, *c2));
            m1 * m2 / (d * d + 0.5 * (e1 * e1 + e2 * e2)).sqrt()
        }
        _ => unreachable!("point_point called on non-points"),
    }
}

/// Spherical-coordinate integral of `g` over a ball.
fn ball_integral(center: Vec3, radius: f64, g: impl Fn(Vec3) -> f64, tol: f64) -> Result<f64> {
    let tau = 2.0 * std::f64::consts::PI;
    let est = integrate(
        |p: [f64; 3]| {
            let (r, theta, phi) = (p[0], p[1], p[2]);
            let (s, c) = theta.sin_cos();
            let x = [
                center[0] + r * s * phi.cos(),
                center[1] + r * s * phi.sin(),
                center[2] + r * c,
            ];
            r * r * s * g(x)
        },
        [0.0, 0.0, 0.0],
        [radius, std::f64::consts::PI, tau],
        QuadOptions {
            rel_tol: tol,
            order: 6,
            max_regions: 20_000,
            ..Default::default()
        },
    )?;
    Ok(est.value)
}

/// Interaction `∫∫ ρp ρq / r` of two spheres.
fn sphere_sphere(p: &Primitive, q: &Primitive, tol: f64) -> Result<f64> {
    let (Primitive::Sphere {
        center: c1,
        radius: r1,
        mass: m1,
    }, Primitive::Sphere {
        center: c2,
        radius: r2,
        mass: m2,
    }) = (p, q)
    else {
        unreachable!("sphere_sphere called on non-spheres")
    };
    let d = norm(sub(*c1, *c2));
    if d >= r1 + r2 {
        return Ok(m1 * m2 / d);
    }
    if r1 == r2 {
        let x = d / r1;
        return Ok(m1 * m2 / r1 * (1.2 - 0.5 * x * x + 3.0 / 16.0 * x.powi(3) - x.powi(5) / 160.0));
    }
    // Integrate the smaller ball against the larger ball's closed-form kernel.
    let (small, big) = if r1 <= r2 { (p, q) } else { (q, p) };
    let Primitive::Sphere {
        center: cs,
        radius: rs,
        mass: ms,
    } = small
    else {
        unreachable!()
    };
    let rho = ms / (4.0 / 3.0 * std::f64::consts::PI * rs.powi(3));
    let big = big.clone();
    Ok(rho * ball_integral(*cs, *rs, |x| big.kernel_at(x).unwrap_or(0.0), tol)?)
}

/// Breakpoints of all boxes along each axis, sorted and deduplicated.
fn box_breaks(boxes: &[&Signed]) -> [Vec<f64>; 3] {
    let mut out: [Vec<f64>; 3] = Default::default();
    for s in boxes {
        if let Primitive::Box {
            center, half_extents, ..
        } = s.prim
        {
            for i in 0..3 {
                out[i].push(center[i] - half_extents[i]);
                out[i].push(center[i] + half_extents[i]);
            }
        }
    }
    for v in &mut out {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    out
}

fn box_density(s: &Signed) -> f64 {
    match s.prim {
        Primitive::Box {
            half_extents, mass, ..
        } => mass / (8.0 * half_extents[0] * half_extents[1] * half_extents[2]),
        _ => 0.0,
    }
}

fn inside_box(s: &Signed, x: Vec3) -> bool {
    match s.prim {
        Primitive::Box {
            center, half_extents, ..
        } => (0..3).all(|i| (x[i] - center[i]).abs() < half_extents[i]),
        _ => false,
    }
}

/// `∫ (Σ s ρ_box)(x) ψ(x) d³x` over the cell decomposition induced by `boxes`.
fn box_cells_integral(
    boxes: &[&Signed],
    psi: &dyn Fn(Vec3) -> f64,
    tol: f64,
) -> Result<f64> {
    let breaks = box_breaks(boxes);
    let mut cells = Vec::new();
    for ix in 0..breaks[0].len().saturating_sub(1) {
        for iy in 0..breaks[1].len().saturating_sub(1) {
            for iz in 0..breaks[2].len().saturating_sub(1) {
                let lo = [breaks[0][ix], breaks[1][iy], breaks[2][iz]];
                let hi = [breaks[0][ix + 1], breaks[1][iy + 1], breaks[2][iz + 1]];
                let mid = [0, 1, 2].map(|i| 0.5 * (lo[i] + hi[i]));
                let rho: f64 = boxes
                    .iter()
                    .filter(|s| inside_box(s, mid))
                    .map(|s| s.sign * box_density(s))
                    .sum();
                if rho != 0.0 {
                    cells.push((lo, hi, rho));
                }
            }
        }
    }
    // First pass fixes an absolute error floor from the overall magnitude.
    let mut coarse = Vec::with_capacity(cells.len());
    for (lo, hi, rho) in &cells {
        coarse.push(rho * crate::quad::gauss_tensor(&|x: [f64; 3]| psi(x), *lo, *hi, 4));
    }
    let scale: f64 = coarse.iter().map(|v: &f64| v.abs()).sum();
    let floor = tol * scale / (10.0 * cells.len().max(1) as f64);
    let mut total = 0.0;
    for (lo, hi, rho) in &cells {
        let est = integrate(
            |x: [f64; 3]| psi(x),
            *lo,
            *hi,
            QuadOptions {
                rel_tol: tol * 0.1,
                abs_tol: floor / rho.abs(),
                order: 5,
                max_regions: 2000,
            },
        )?;
        total += rho * est.value;
    }
    Ok(total)
}

/// Sixfold antiderivative of `1/r`: `∂x²∂y²∂z² F = 1/r`.
fn cuboid_antiderivative(x: f64, y: f64, z: f64) -> f64 {
    fn family(x: f64, y: f64, z: f64, r: f64) -> f64 {
        let mut t = 0.0;
        let (y2, z2) = (y * y, z * z);
        let c = x * (0.25 * y2 * z2 - (y2 * y2 + z2 * z2) / 24.0);
        if c != 0.0 {
            t += c * (x / y.hypot(z)).asinh();
        }
        if x != 0.0 && y != 0.0 && z != 0.0 {
            t -= x * x * x * y * z / 6.0 * (y * z / (x * r)).atan();
        }
        t
    }
    let r = (x * x + y * y + z * z).sqrt();
    let (x2, y2, z2) = (x * x, y * y, z * z);
    family(x, y, z, r)
        + family(y, z, x, r)
        + family(z, x, y, r)
        + r * ((x2 * x2 + y2 * y2 + z2 * z2) / 60.0 - (x2 * y2 + y2 * z2 + z2 * x2) / 20.0)
}

/// Interaction `∫∫ ρp ρq / r` of two homogeneous boxes.
fn box_box(p: &Primitive, q: &Primitive) -> f64 {
    let (Primitive::Box {
        center: c1,
        half_extents: h1,
        mass: m1,
    }, Primitive::Box {
        center: c2,
        half_extents: h2,
        mass: m2,
    }) = (p, q)
    else {
        unreachable!("box_box called on non-boxes")
    };
    let d = norm(sub(*c1, *c2));
    if d > 6.0 * (norm(*h1) + norm(*h2)) {
        // The corner sum cancels badly at large separation; the kernel is smooth there.
        let rule = gauss_legendre(5);
        let nodes = |c: &Vec3, h: &Vec3| {
            let mut out = Vec::with_capacity(125);
            for (xi, wi) in rule.iter() {
                for (yj, wj) in rule.iter() {
                    for (zk, wk) in rule.iter() {
                        out.push((
                            [c[0] + h[0] * xi, c[1] + h[1] * yj, c[2] + h[2] * zk],
                            wi * wj * wk / 8.0,
                        ));
                    }
                }
            }
            out
        };
        let (a, b) = (nodes(c1, h1), nodes(c2, h2));
        let mut s = 0.0;
        for (x, wx) in &a {
            for (y, wy) in &b {
                s += wx * wy / norm(sub(*x, *y));
            }
        }
        return m1 * m2 * s;
    }
    let scale = h1.iter().chain(h2.iter()).fold(0.0_f64, |m, v| m.max(*v));
    let edges = |i: usize| {
        let (a0, a1) = ((c1[i] - h1[i]) / scale, (c1[i] + h1[i]) / scale);
        let (b0, b1) = ((c2[i] - h2[i]) / scale, (c2[i] + h2[i]) / scale);
        [(b0 - a1, 1.0), (b1 - a1, -1.0), (b0 - a0, -1.0), (b1 - a0, 1.0)]
    };
    let (ex, ey, ez) = (edges(0), edges(1), edges(2));
    let mut s = 0.0;
    for (x, sx) in ex {
        for (y, sy) in ey {
            for (z, sz) in ez {
                s += sx * sy * sz * cuboid_antiderivative(x, y, z);
            }
        }
    }
    let vol = 64.0 * h1[0] * h1[1] * h1[2] * h2[0] * h2[1] * h2[2];
    m1 * m2 / vol * scale.powi(5) * s
}

/// Interaction of a sphere with a box; exact point reduction when they are disjoint.
fn sphere_box(sphere: &Primitive, bx: &Signed, tol: f64) -> Result<f64> {
    let (Primitive::Sphere { center, radius, mass }, Primitive::Box { center: bc, half_extents, .. }) =
        (sphere, &bx.prim)
    else {
        unreachable!("sphere_box called on wrong kinds")
    };
    let gap: f64 = (0..3)
        .map(|i| ((center[i] - bc[i]).abs() - half_extents[i]).max(0.0).powi(2))
        .sum::<f64>()
        .sqrt();
    if gap >= *radius {
        return Ok(mass * bx.prim.kernel_at(*center)?);
    }
    let sp = sphere.clone();
    let unit = Signed {
        prim: bx.prim.clone(),
        sign: 1.0,
    };
    box_cells_integral(&[&unit], &move |x| sp.kernel_at(x).unwrap_or(f64::NAN), tol)
}

/// Gravitational coupling energy `G ∫∫ Δρ Δρ / r`, J (default options).
pub fn coupling_energy(a: &MassDensity, b: &MassDensity) -> Result<f64> {
    coupling_energy_with(a, b, CouplingOptions::default())
}

pub fn coupling_energy_with(a: &MassDensity, b: &MassDensity, opts: CouplingOptions) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    if !(opts.rel_tol > 0.0) {
        return Err(Error::invalid("coupling tolerance must be positive"));
    }
    let diff = difference(a, b);
    if diff.is_empty() {
        return Ok(0.0);
    }
    let integral = match opts.method {
        Method::Analytic => signed_self_interaction(&diff, opts.rel_tol)?,
        Method::Quadrature => signed_self_interaction_quadrature(&diff, opts.rel_tol)?,
    };
    Ok(G * integral.max(0.0))
}

fn difference_kernel(diff: &[Signed], x: Vec3) -> f64 {
    diff.iter()
        .map(|s| s.sign * s.prim.kernel_at(x).unwrap_or(f64::NAN))
        .sum()
}

fn signed_self_interaction(diff: &[Signed], tol: f64) -> Result<f64> {
    let mut total = 0.0;
    let boxes: Vec<&Signed> = diff.iter().filter(|s| matches!(s.prim, Primitive::Box { .. })).collect();
    let others: Vec<&Signed> = diff.iter().filter(|s| !matches!(s.prim, Primitive::Box { .. })).collect();
    for (i, p) in others.iter().enumerate() {
        for (j, q) in others.iter().enumerate().skip(i) {
            let w = match (&p.prim, &q.prim) {
                (Primitive::Sphere { .. }, Primitive::Sphere { .. }) => sphere_sphere(&p.prim, &q.prim, tol)?,
                (Primitive::SmoothedPoint { .. }, Primitive::SmoothedPoint { .. }) => point_point(&p.prim, &q.prim),
                (Primitive::SmoothedPoint { center, mass, .. }, other)
                | (other, Primitive::SmoothedPoint { center, mass, .. }) => mass * other.kernel_at(*center)?,
                _ => unreachable!("boxes filtered out"),
            };
            let mult = if i == j { 1.0 } else { 2.0 };
            total += mult * p.sign * q.sign * w;
        }
    }
    if !boxes.is_empty() {
        for p in &others {
            let w = match &p.prim {
                Primitive::SmoothedPoint { center, mass, .. } => {
                    let mut acc = 0.0;
                    for q in &boxes {
                        acc += q.sign * q.prim.kernel_at(*center)?;
                    }
                    mass * acc
                }
                sphere => {
                    let mut acc = 0.0;
                    for q in &boxes {
                        acc += q.sign * sphere_box(sphere, q, tol)?;
                    }
                    acc
                }
            };
            total += 2.0 * p.sign * w;
        }
        for (i, p) in boxes.iter().enumerate() {
            for (j, q) in boxes.iter().enumerate().skip(i) {
                let mult = if i == j { 1.0 } else { 2.0 };
                total += mult * p.sign * q.sign * box_box(&p.prim, &q.prim);
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NumericFailure {
            what: "coupling energy".into(),
            achieved: f64::INFINITY,
        });
    }
    Ok(total)
}

fn signed_self_interaction_quadrature(diff: &[Signed], tol: f64) -> Result<f64> {
    let all: Vec<Signed> = diff.to_vec();
    let psi_all = |x: Vec3| difference_kernel(&all, x);
    let boxes: Vec<&Signed> = diff.iter().filter(|s| matches!(s.prim, Primitive::Box { .. })).collect();
    let mut total = 0.0;
    for s in diff {
        match &s.prim {
            Primitive::Sphere {
                center,
                radius,
                mass,
            } => {
                let rho = mass / (4.0 / 3.0 * std::f64::consts::PI * radius.powi(3));
                total += s.sign * rho * ball_integral(*center, *radius, psi_all, tol)?;
            }
            Primitive::SmoothedPoint { center, mass, .. } => {
                let mut acc = 0.0;
                for q in diff {
                    acc += q.sign
                        * match &q.prim {
                            Primitive::SmoothedPoint { .. } => point_point(&s.prim, &q.prim) / mass,
                            other => other.kernel_at(*center)?,
                        };
                }
                total += s.sign * mass * acc;
            }
            Primitive::Box { .. } => {}
        }
    }
    if !boxes.is_empty() {
        total += box_cells_integral(&boxes, &psi_all, tol)?;
    }
    Ok(total)
}

/// Symmetric matrix of pairwise coupling energies with zero diagonal.
pub fn couplings_matrix(densities: &[MassDensity]) -> Result<Vec<Vec<f64>>> {
    if densities.len() < 2 {
        return Err(Error::invalid("couplings matrix needs at least two densities"));
    }
    let n = densities.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let e = coupling_energy(&densities[i], &densities[j])?;
            m[i][j] = e;
            m[j][i] = e;
        }
    }
    Ok(m)
}

/// Decay time `ħ / E`; infinite for zero energy.
pub fn decay_time(energy: f64) -> Result<f64> {
    if !(energy >= 0.0) {
        return Err(Error::invalid(format!("coupling energy must be non-negative, got {energy}")));
    }
    if energy == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(HBAR / energy)
    }
}

/// Self term `∫∫ ρρ/r = (6/5) m²/R` of a homogeneous sphere.
pub fn sphere_self_interaction(mass: f64, radius: f64) -> f64 {
    1.2 * mass * mass / radius
}

/// Water sphere of the given diameter centred at `center`.
pub fn water_sphere(center: Vec3, diameter: f64) -> Primitive {
    let r = 0.5 * diameter;
    let mass = crate::constants::WATER_DENSITY * 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
    Primitive::sphere(center, r, mass)
}

/// Decay time of a superposition of a body and its translate by `shift`.
pub fn translate_decay_time(body: &MassDensity, shift: Vec3) -> Result<f64> {
    decay_time(coupling_energy(body, &body.translated(shift))?)
}
