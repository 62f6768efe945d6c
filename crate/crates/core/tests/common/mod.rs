//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Affine single-OD network: link `a` costs `t0[a] + slope[a]·v_a`, route `r`
/// uses the links in `routes[r]`.
pub struct AffineOd {
    pub t0: Vec<f64>,
    pub slope: Vec<f64>,
    pub routes: Vec<Vec<usize>>,
}

impl AffineOd {
    /// Pigou: two parallel links, `1 + v` and `2 + v`.
    pub fn pigou() -> Self {
        Self {
            t0: vec![1.0, 2.0],
            slope: vec![1.0, 1.0],
            routes: vec![vec![0], vec![1]],
        }
    }

    /// Diamond 1→{2,3}→4 with the 2→3 cross link; links in id order
    /// 1:(1,2) 2:(1,3) 3:(2,4) 4:(3,4) 5:(2,3); routes 1-3, 1-5-4, 2-4.
    pub fn diamond() -> Self {
        Self {
            t0: vec![1.0, 2.0, 2.0, 1.0, 0.5],
            slope: vec![1.0; 5],
            routes: vec![vec![0, 2], vec![0, 4, 3], vec![1, 3]],
        }
    }

    pub fn link_flows(&self, h: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.t0.len()];
        for (r, links) in self.routes.iter().enumerate() {
            for &a in links {
                v[a] += h[r];
            }
        }
        v
    }

    pub fn route_costs(&self, h: &[f64]) -> Vec<f64> {
        let v = self.link_flows(h);
        self.routes
            .iter()
            .map(|links| links.iter().map(|&a| self.t0[a] + self.slope[a] * v[a]).sum())
            .collect()
    }

    /// Equilibrium with every route used: solves the KKT system
    /// `Δᵀ S Δ h − π 1 = −Δᵀ t0`, `1ᵀ h = d`.
    pub fn all_used_equilibrium(&self, demand: f64) -> (Vec<f64>, f64) {
        let n = self.routes.len();
        let mut k = DMatrix::<f64>::zeros(n + 1, n + 1);
        let mut rhs = DVector::<f64>::zeros(n + 1);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = self.routes[i]
                    .iter()
                    .filter(|a| self.routes[j].contains(a))
                    .map(|&a| self.slope[a])
                    .sum();
            }
            k[(i, n)] = -1.0;
            k[(n, i)] = 1.0;
            rhs[i] = -self.routes[i].iter().map(|&a| self.t0[a]).sum::<f64>();
        }
        rhs[n] = demand;
        let sol = k.lu().solve(&rhs).expect("nonsingular KKT system");
        (sol.iter().take(n).copied().collect(), sol[n])
    }
}

/// Every point of the simplex `{h ≥ 0, Σh = d}` on a grid with `steps`
/// subdivisions per coordinate.
pub fn simplex_grid(n: usize, demand: f64, steps: usize) -> Vec<Vec<f64>> {
    fn rec(n: usize, left: usize, steps: usize, demand: f64, cur: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if n == 1 {
            cur.push(left as f64 / steps as f64 * demand);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for i in 0..=left {
            cur.push(i as f64 / steps as f64 * demand);
            rec(n - 1, left - i, steps, demand, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, steps, steps, demand, &mut Vec::new(), &mut out);
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `min_g c(h)ᵀ(g − h)` over grid points `g`; nonnegative at a VI solution.
pub fn vi_margin(costs: &[f64], h: &[f64], grid: &[Vec<f64>]) -> f64 {
    grid.iter()
        .map(|g| {
            let diff: Vec<f64> = g.iter().zip(h).map(|(a, b)| a - b).collect();
            dot(costs, &diff)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Grid point with the smallest VI gap `max_g c(p)ᵀ(p − g)`.
pub fn grid_vi_solution(od: &AffineOd, grid: &[Vec<f64>]) -> Vec<f64> {
    grid.iter()
        .map(|p| {
            let c = od.route_costs(p);
            (-vi_margin(&c, p, grid), p)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, p)| p.clone())
        .expect("nonempty grid")
}

/// Wardrop conditions for one OD pair: used routes share one cost and no
/// unused route is cheaper, both to relative `tol`.
pub fn wardrop_holds(h: &[f64], costs: &[f64], flow_cut: f64, tol: f64) -> bool {
    let used: Vec<f64> = h.iter().zip(costs).filter(|(&f, _)| f > flow_cut).map(|(_, &c)| c).collect();
    let lo = used.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = used.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if used.is_empty() {
        return true;
    }
    let scale = hi.abs().max(1.0);
    let unused_ok = h
        .iter()
        .zip(costs)
        .filter(|(&f, _)| f <= flow_cut)
        .all(|(_, &c)| c >= lo - tol * scale);
    hi - lo <= tol * scale && unused_ok
}
