//! Projection-splitting refinement of predicted route flows.
//!
//! With `P₁` the projection onto `h ≥ 0` and `P₂` the projection onto the
//! demand-feasible affine set `{h : Δ_OD h = x}`, one step of the operator is
//!
//! ```text
//! ℙ(z) = z − P₁(z) + P₂(2 P₁(z) − z − α c(P₁(z)))
//! ```
//!
//! where `c` maps route flows to route costs. Points with `ℙ(z) = z` give an
//! equilibrium `P₁(z)`. Iteration converges for `0 < α < 2/L`, `L` being a
//! Lipschitz constant of `c` on the region visited.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::routes::{route_costs_unchecked, Incidence, OdIncidence, RouteSet};

/// Entrywise `max(h, 0)`.
pub fn project_nonneg(h: &[f64]) -> Vec<f64> {
    h.iter().map(|&v| v.max(0.0)).collect()
}

/// Moore–Penrose inverse of an OD incidence matrix, `Δᵀ diag(1/|R_k|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandPinv {
    od_of_route: Vec<usize>,
    inv_counts: Vec<f64>,
}

pub fn pinv_delta_od(delta: &OdIncidence) -> Result<DemandPinv> {
    let counts = delta.routes_per_od();
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Domain(format!("OD pair {k} has no routes; Δ_OD Δ_ODᵀ is singular")));
    }
    Ok(DemandPinv {
        od_of_route: delta.od_of_route().to_vec(),
        inv_counts: counts.iter().map(|&n| 1.0 / n as f64).collect(),
    })
}

impl DemandPinv {
    pub fn rows(&self) -> usize {
        self.od_of_route.len()
    }

    pub fn cols(&self) -> usize {
        self.inv_counts.len()
    }

    /// `Δ⁺ w`
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.cols(), "Δ⁺·w: length mismatch");
        self.od_of_route
            .iter()
            .map(|&k| w[k] * self.inv_counts[k])
            .collect()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.rows(), self.cols()));
        for (r, &k) in self.od_of_route.iter().enumerate() {
            m[[r, k]] = self.inv_counts[k];
        }
        m
    }
}

fn check_shapes(h: &[f64], x: &[f64], delta: &OdIncidence) -> Result<()> {
    if h.len() != delta.cols() {
        return Err(Error::Shape(format!(
            "route vector has length {}, expected {}",
            h.len(),
            delta.cols()
        )));
    }
    if x.len() != delta.rows() {
        return Err(Error::Shape(format!(
            "demand vector has length {}, expected {}",
            x.len(),
            delta.rows()
        )));
    }
    Ok(())
}

/// `Δ h − x` per OD pair with Neumaier summation.
fn demand_violation(h: &[f64], x: &[f64], delta: &OdIncidence) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(k, &d)| {
            let (mut sum, mut carry) = (-d, 0.0);
            for &r in delta.routes_of(k) {
                let t = sum + h[r];
                carry += if sum.abs() >= h[r].abs() { (sum - t) + h[r] } else { (h[r] - t) + sum };
                sum = t;
            }
            sum + carry
        })
        .collect()
}

fn project_demand_unchecked(h: &[f64], x: &[f64], delta: &OdIncidence, pinv: &DemandPinv) -> Vec<f64> {
    let mut out = h.to_vec();
    for _ in 0..2 {
        let violation = demand_violation(&out, x, delta);
        for (o, c) in out.iter_mut().zip(pinv.apply(&violation)) {
            *o -= c;
        }
    }
    // leftover rounding goes to the route where it is represented most finely
    for (k, v) in demand_violation(&out, x, delta).into_iter().enumerate() {
        if let Some(&r) = delta.routes_of(k).iter().min_by(|&&a, &&b| out[a].abs().total_cmp(&out[b].abs())) {
            out[r] -= v;
        }
    }
    out
}

/// `h − Δ⁺(Δ h − x)`: spreads each OD pair's demand violation evenly over
/// its routes.
pub fn project_demand(h: &[f64], x: &[f64], delta: &OdIncidence, pinv: &DemandPinv) -> Result<Vec<f64>> {
    check_shapes(h, x, delta)?;
    if pinv.rows() != delta.cols() || pinv.cols() != delta.rows() {
        return Err(Error::Shape("pseudoinverse does not match the incidence matrix".into()));
    }
    Ok(project_demand_unchecked(h, x, delta, pinv))
}

struct Stepper<'a> {
    net: &'a Network,
    rs: &'a RouteSet,
    pinv: DemandPinv,
    x: &'a [f64],
    alpha: f64,
}

impl Stepper<'_> {
    /// Returns `ℙ(z)` and `‖ℙ(z) − z‖∞`.
    fn step(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        let nonneg = project_nonneg(z);
        let cost = route_costs_unchecked(self.net, self.rs, &nonneg);
        if cost.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numerical("route cost is not finite during refinement".into()));
        }
        let reflected: Vec<f64> = nonneg
            .iter()
            .zip(z)
            .zip(&cost)
            .map(|((&p, &zi), &c)| 2.0 * p - zi - self.alpha * c)
            .collect();
        let feasible = project_demand_unchecked(&reflected, self.x, self.rs.delta_od(), &self.pinv);
        let mut residual = 0.0f64;
        let next = z
            .iter()
            .zip(&nonneg)
            .zip(&feasible)
            .map(|((&zi, &p), &f)| {
                let d = f - p;
                residual = residual.max(d.abs());
                zi + d
            })
            .collect();
        Ok((next, residual))
    }
}

fn stepper<'a>(
    net: &'a Network,
    rs: &'a RouteSet,
    h: &[f64],
    x: &'a [f64],
    alpha: f64,
) -> Result<Stepper<'a>> {
    rs.ensure_network(net)?;
    check_shapes(h, x, rs.delta_od())?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("step constant must be finite and >= 0, got {alpha}")));
    }
    Ok(Stepper {
        net,
        rs,
        pinv: pinv_delta_od(rs.delta_od())?,
        x,
        alpha,
    })
}

/// One application of the operator.
pub fn fp_step(h: &[f64], x: &[f64], net: &Network, rs: &RouteSet, alpha: f64) -> Result<Vec<f64>> {
    Ok(stepper(net, rs, h, x, alpha)?.step(h)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    pub alpha: f64,
    /// Stop once `‖ℙ(z) − z‖∞ ≤ tol`.
    pub tol: f64,
    pub max_iters: usize,
}

impl RefineOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be > 0, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refined {
    /// Nonnegative part of the final iterate.
    pub flows: Vec<f64>,
    pub residual: f64,
    /// Number of operator applications performed.
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates `z ← ℙ(z)` from `h0` until the residual drops to `tol` or
/// `max_iters` applications have been made.
pub fn refine(h0: &[f64], x: &[f64], net: &Network, rs: &RouteSet, opts: &RefineOptions) -> Result<Refined> {
    opts.validate()?;
    let s = stepper(net, rs, h0, x, opts.alpha)?;
    let mut z = h0.to_vec();
    let mut iterations = 0;
    loop {
        let (next, residual) = s.step(&z)?;
        if residual <= opts.tol || iterations == opts.max_iters {
            return Ok(Refined {
                flows: project_nonneg(&z),
                residual,
                iterations,
                converged: residual <= opts.tol,
            });
        }
        z = next;
        iterations += 1;
    }
}

/// `1e-2` over the largest free-flow route cost.
pub fn free_flow_alpha(net: &Network, rs: &RouteSet) -> f64 {
    let zero = vec![0.0; rs.len()];
    let max_cost = route_costs_unchecked(net, rs, &zero)
        .into_iter()
        .fold(0.0, f64::max);
    1e-2 / max_cost
}

/// `1/L` with `L` the largest eigenvalue of `Δ_arcᵀ diag(t′(v̄)) Δ_arc`,
/// where `v̄` loads every link with the full upper demand of each OD pair
/// that has a route through it. Link slopes are non-decreasing in flow, so
/// `L` bounds the Lipschitz constant of the route-cost map on flows that
/// respect `demand_upper`.
pub fn lipschitz_alpha(net: &Network, rs: &RouteSet, demand_upper: &[f64]) -> Result<f64> {
    rs.ensure_network(net)?;
    if demand_upper.len() != rs.num_od_pairs() {
        return Err(Error::Shape("demand bound length differs from the OD count".into()));
    }
    let n_links = net.num_links();
    let mut load = vec![0.0; n_links];
    for (k, &d) in demand_upper.iter().enumerate() {
        let mut touched = vec![false; n_links];
        for &r in rs.routes_of_od(k) {
            for &a in rs.delta_arc().column(r) {
                touched[a] = true;
            }
        }
        for (l, t) in load.iter_mut().zip(touched) {
            if t {
                *l += d.max(0.0);
            }
        }
    }
    let family = net.cost_family();
    let slopes: Vec<f64> = net
        .links()
        .iter()
        .zip(&load)
        .map(|(link, &v)| link.params.slope(family, v))
        .collect();

    let arc = rs.delta_arc();
    let apply = |u: &[f64]| -> Vec<f64> {
        let mut v = arc.mul_vec(u);
        for (vi, s) in v.iter_mut().zip(&slopes) {
            *vi *= s;
        }
        arc.tmul_vec(&v)
    };
    let norm = |u: &[f64]| u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut u = vec![1.0; rs.len()];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w = apply(&u);
        let nw = norm(&w);
        if nw == 0.0 {
            break;
        }
        let next = nw / norm(&u);
        u = w.into_iter().map(|v| v / nw).collect();
        if (next - lambda).abs() <= 1e-9 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Numerical(format!("cost Lipschitz estimate {lambda} is unusable")));
    }
    // Power iteration approaches λ_max from below.
    Ok(1.0 / (1.05 * lambda))
}
