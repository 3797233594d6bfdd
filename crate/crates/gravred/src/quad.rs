//! Gauss-Legendre rules and a globally adaptive tensor-product integrator.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Nodes and weights on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    /// `(node, weight)` pairs on `[-1, 1]`.
    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }
}

const MAX_ORDER: usize = 32;

fn compute_rule(n: usize) -> GaussRule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            x = 0.0;
            dp = 1.0;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n == 1 {
        weights[0] = 2.0;
    }
    GaussRule { nodes, weights }
}

/// Cached Gauss-Legendre rule of order `n` (1..=32).
pub fn gauss_legendre(n: usize) -> &'static GaussRule {
    static RULES: OnceLock<Vec<GaussRule>> = OnceLock::new();
    let rules = RULES.get_or_init(|| (0..=MAX_ORDER).map(|k| compute_rule(k.max(1))).collect());
    assert!((1..=MAX_ORDER).contains(&n), "unsupported Gauss order {n}");
    &rules[n]
}

/// Fixed-order 1-D Gauss integral over [a, b].
pub fn gauss_1d(f: impl Fn(f64) -> f64, a: f64, b: f64, order: usize) -> f64 {
    let rule = gauss_legendre(order);
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    let mut s = 0.0;
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        s += w * f(mid + half * x);
    }
    s * half
}

/// Fixed-order tensor Gauss integral over a box.
pub fn gauss_tensor<const D: usize>(
    f: &impl Fn([f64; D]) -> f64,
    lo: [f64; D],
    hi: [f64; D],
    order: usize,
) -> f64 {
    let rule = gauss_legendre(order);
    let mut mid = [0.0; D];
    let mut half = [0.0; D];
    let mut jac = 1.0;
    for d in 0..D {
        mid[d] = 0.5 * (lo[d] + hi[d]);
        half[d] = 0.5 * (hi[d] - lo[d]);
        jac *= half[d];
    }
    let mut idx = [0usize; D];
    let mut sum = 0.0;
    loop {
        let mut x = [0.0; D];
        let mut w = 1.0;
        for d in 0..D {
            x[d] = mid[d] + half[d] * rule.nodes[idx[d]];
            w *= rule.weights[idx[d]];
        }
        sum += w * f(x);
        let mut d = 0;
        loop {
            if d == D {
                return sum * jac;
            }
            idx[d] += 1;
            if idx[d] < order {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_regions: usize,
    pub order: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions {
            rel_tol: 1e-8,
            abs_tol: 0.0,
            max_regions: 20_000,
            order: 6,
        }
    }
}

impl QuadOptions {
    pub fn rel(rel_tol: f64) -> Self {
        QuadOptions {
            rel_tol,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

struct Region<const D: usize> {
    lo: [f64; D],
    hi: [f64; D],
    value: f64,
    error: f64,
}

impl<const D: usize> PartialEq for Region<D> {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl<const D: usize> Eq for Region<D> {}
impl<const D: usize> PartialOrd for Region<D> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<const D: usize> Ord for Region<D> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn region<const D: usize>(
    f: &impl Fn([f64; D]) -> f64,
    lo: [f64; D],
    hi: [f64; D],
    order: usize,
) -> Region<D> {
    let hi_v = gauss_tensor(f, lo, hi, order);
    let lo_v = gauss_tensor(f, lo, hi, order.saturating_sub(2).max(1));
    Region {
        lo,
        hi,
        value: hi_v,
        error: (hi_v - lo_v).abs(),
    }
}

/// Globally adaptive integration: the region with the largest error estimate is
/// bisected along its longest (relative) side until the summed estimate meets
/// the tolerance.
pub fn integrate<const D: usize>(
    f: impl Fn([f64; D]) -> f64,
    lo: [f64; D],
    hi: [f64; D],
    opts: QuadOptions,
) -> Result<Estimate> {
    let mut scale = [1.0; D];
    for d in 0..D {
        let w = (hi[d] - lo[d]).abs();
        if !w.is_finite() {
            return Err(Error::invalid("non-finite integration bounds"));
        }
        if w == 0.0 {
            return Ok(Estimate {
                value: 0.0,
                error: 0.0,
            });
        }
        scale[d] = w;
    }
    let mut heap = BinaryHeap::new();
    let first = region(&f, lo, hi, opts.order);
    let (mut total, mut err) = (first.value, first.error);
    heap.push(first);
    let mut regions = 1usize;
    loop {
        if !total.is_finite() {
            return Err(Error::NumericFailure {
                what: "adaptive quadrature (non-finite integrand)".into(),
                achieved: f64::INFINITY,
            });
        }
        let target = opts.abs_tol.max(opts.rel_tol * total.abs());
        if err <= target {
            return Ok(Estimate {
                value: total,
                error: err,
            });
        }
        if regions >= opts.max_regions {
            let achieved = if total != 0.0 { err / total.abs() } else { err };
            return Err(Error::NumericFailure {
                what: "adaptive quadrature".into(),
                achieved,
            });
        }
        let worst = heap.pop().expect("heap never empty");
        let mut axis = 0;
        let mut best = -1.0;
        for d in 0..D {
            let rel = (worst.hi[d] - worst.lo[d]) / scale[d];
            if rel > best {
                best = rel;
                axis = d;
            }
        }
        let cut = 0.5 * (worst.lo[axis] + worst.hi[axis]);
        let mut hi_a = worst.hi;
        hi_a[axis] = cut;
        let mut lo_b = worst.lo;
        lo_b[axis] = cut;
        let a = region(&f, worst.lo, hi_a, opts.order);
        let b = region(&f, lo_b, worst.hi, opts.order);
        total += a.value + b.value - worst.value;
        err += a.error + b.error - worst.error;
        heap.push(a);
        heap.push(b);
        regions += 1;
        // Re-sum occasionally to shed accumulated rounding in the running totals.
        if regions % 512 == 0 {
            total = heap.iter().map(|r| r.value).sum();
            err = heap.iter().map(|r| r.error).sum();
        }
    }
}
