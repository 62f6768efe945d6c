//! Prediction error metrics and relaxed equilibrium checks.
//!
//! Per sample: `E1 = max|Δ_arc h − y| / max y`, `E2 = max|Δ_OD h − x| / max y`.
//! Per OD pair, with route costs evaluated at `max(h, 0)`:
//!
//! * spread term `|max − min| / max` over used routes (0 with at most one
//!   used route);
//! * dominance term `max(maxUsed − minUnused, 0) / max(maxUsed, minUnused)`
//!   (0 without unused or used routes).
//!
//! For a margin `ε` an OD pair contributes its spread term to `E_Mm(ε)` only
//! when `maxUsed − minUsed > ε·maxUsed`, and its dominance term to `E_mM(ε)`
//! only when `minUnused < (1 − ε)·maxUsed`. Aggregates divide the summed
//! terms by `n_d·|X|`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed_point::project_nonneg;
use crate::network::Network;
use crate::routes::{route_costs, Incidence, RouteSet};

/// Default relative threshold below which a route counts as unused.
pub const ZERO_TOL: f64 = 1e-6;

pub const DEFAULT_EPS: [f64; 3] = [0.1, 0.05, 0.01];

/// Describes how ε enters the aggregate equilibrium errors; copied into reports.
pub const EPS_RULE: &str = "an OD pair adds its spread (Mm) or dominance (mM) term to the epsilon column \
only when the corresponding epsilon-relaxed condition fails for that pair";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdDetail {
    /// Route indices carrying flow.
    pub used: Vec<usize>,
    /// Route indices treated as empty.
    pub unused: Vec<usize>,
    /// Minimum used-route cost; `None` when no route is used.
    pub min_used_cost: Option<f64>,
    pub max_used_cost: Option<f64>,
    pub min_unused_cost: Option<f64>,
    pub spread: f64,
    pub dominance: f64,
}

impl OdDetail {
    fn spread_passes(&self, eps: f64) -> bool {
        match (self.min_used_cost, self.max_used_cost) {
            (Some(lo), Some(hi)) => hi - lo <= eps * hi,
            _ => true,
        }
    }

    fn dominance_passes(&self, eps: f64) -> bool {
        match (self.max_used_cost, self.min_unused_cost) {
            (Some(hi), Some(lo)) => lo >= hi * (1.0 - eps),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub e1: f64,
    pub e2: f64,
    pub eps: Vec<f64>,
    /// Filtered spread sum over OD pairs, one entry per `eps`.
    pub e_mm: Vec<f64>,
    /// Filtered dominance sum over OD pairs, one entry per `eps`.
    pub e_m_m: Vec<f64>,
    pub per_od: Vec<OdDetail>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OdConditions {
    /// Used-route costs agree within the margin.
    pub mm: bool,
    /// Unused routes are not cheaper than used ones beyond the margin.
    pub m_m: bool,
}

/// Relaxed condition outcomes for each OD pair of a record.
pub fn check_conditions(record: &MetricsRecord, eps: f64) -> Vec<OdConditions> {
    record
        .per_od
        .iter()
        .map(|d| OdConditions {
            mm: d.spread_passes(eps),
            m_m: d.dominance_passes(eps),
        })
        .collect()
}

fn check_eps(eps: &[f64]) -> Result<()> {
    if let Some(e) = eps.iter().find(|&&e| !(e > 0.0 && e < 1.0)) {
        return Err(Error::Domain(format!("epsilon must lie in (0, 1), got {e}")));
    }
    Ok(())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

pub fn evaluate_sample(
    h: &[f64],
    x: &[f64],
    y: &[f64],
    net: &Network,
    rs: &RouteSet,
    eps: &[f64],
    zero_tol: f64,
) -> Result<MetricsRecord> {
    rs.ensure_network(net)?;
    check_eps(eps)?;
    if h.len() != rs.len() || x.len() != rs.num_od_pairs() || y.len() != rs.num_links() {
        return Err(Error::Shape("metric inputs do not match the route set".into()));
    }
    let y_max = y.iter().copied().fold(f64::MIN, f64::max);
    if !(y_max > 0.0) {
        return Err(Error::Domain("arc flows are all zero; relative errors are undefined".into()));
    }
    let e1 = max_abs_diff(&rs.delta_arc().mul_vec(h), y) / y_max;
    let e2 = max_abs_diff(&rs.delta_od().mul_vec(h), x) / y_max;

    let costs = route_costs(net, rs, &project_nonneg(h))?;
    let per_od: Vec<OdDetail> = (0..rs.num_od_pairs())
        .map(|k| {
            let routes = rs.routes_of_od(k);
            let peak = routes.iter().map(|&r| h[r]).fold(0.0, f64::max);
            let cut = zero_tol * peak.max(1e-12);
            let (used, unused): (Vec<usize>, Vec<usize>) = routes.iter().partition(|&&r| h[r] > cut);
            let min_of = |rs: &[usize]| rs.iter().map(|&r| costs[r]).reduce(f64::min);
            let max_of = |rs: &[usize]| rs.iter().map(|&r| costs[r]).reduce(f64::max);
            let (lo, hi, free) = (min_of(&used), max_of(&used), min_of(&unused));
            let spread = match (lo, hi) {
                (Some(lo), Some(hi)) if used.len() > 1 && hi > 0.0 => (hi - lo).abs() / hi,
                _ => 0.0,
            };
            let dominance = match (hi, free) {
                (Some(hi), Some(free)) => (hi - free).max(0.0) / hi.max(free),
                _ => 0.0,
            };
            OdDetail {
                used,
                unused,
                min_used_cost: lo,
                max_used_cost: hi,
                min_unused_cost: free,
                spread,
                dominance,
            }
        })
        .collect();

    let e_mm = eps
        .iter()
        .map(|&e| per_od.iter().filter(|d| !d.spread_passes(e)).fold(0.0, |acc, d| acc + d.spread))
        .collect();
    let e_m_m = eps
        .iter()
        .map(|&e| per_od.iter().filter(|d| !d.dominance_passes(e)).fold(0.0, |acc, d| acc + d.dominance))
        .collect();
    Ok(MetricsRecord {
        e1,
        e2,
        eps: eps.to_vec(),
        e_mm,
        e_m_m,
        per_od,
    })
}

/// Evaluates every row of `h` in parallel, keeping row order.
pub fn evaluate_batch(
    h: &ndarray::Array2<f64>,
    x: &ndarray::Array2<f64>,
    y: &ndarray::Array2<f64>,
    net: &Network,
    rs: &RouteSet,
    eps: &[f64],
    zero_tol: f64,
) -> Result<Vec<MetricsRecord>> {
    if h.nrows() != x.nrows() || h.nrows() != y.nrows() {
        return Err(Error::Shape("prediction, demand and flow row counts differ".into()));
    }
    (0..h.nrows())
        .into_par_iter()
        .map(|i| {
            evaluate_sample(
                &h.row(i).to_vec(),
                &x.row(i).to_vec(),
                &y.row(i).to_vec(),
                net,
                rs,
                eps,
                zero_tol,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub samples: usize,
    #[serde(rename = "E1")]
    pub e1: f64,
    #[serde(rename = "E2")]
    pub e2: f64,
    pub eps: Vec<f64>,
    /// Unused-route dominance error per `eps`.
    #[serde(rename = "E_mM")]
    pub e_m_m: Vec<f64>,
    /// Used-route spread error per `eps`.
    #[serde(rename = "E_Mm")]
    pub e_mm: Vec<f64>,
}

pub fn aggregate(records: &[MetricsRecord], n_d: usize) -> Result<Aggregate> {
    let first = records
        .first()
        .ok_or_else(|| Error::Domain("no records to aggregate".into()))?;
    if records.iter().any(|r| r.eps != first.eps) {
        return Err(Error::Shape("records use different epsilon lists".into()));
    }
    let n = records.len() as f64;
    let scale = 1.0 / (n_d as f64 * n);
    let column = |f: &dyn Fn(&MetricsRecord) -> &[f64], j: usize| {
        records.iter().fold(0.0, |acc, r| acc + f(r)[j]) * scale
    };
    Ok(Aggregate {
        samples: records.len(),
        e1: records.iter().map(|r| r.e1).sum::<f64>() / n,
        e2: records.iter().map(|r| r.e2).sum::<f64>() / n,
        eps: first.eps.clone(),
        e_m_m: (0..first.eps.len()).map(|j| column(&|r| &r.e_m_m, j)).collect(),
        e_mm: (0..first.eps.len()).map(|j| column(&|r| &r.e_mm, j)).collect(),
    })
}

impl Aggregate {
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["E1".to_string(), "E2".to_string()];
        cols.extend(self.eps.iter().map(|e| format!("E_mM({e})")));
        cols.extend(self.eps.iter().map(|e| format!("E_Mm({e})")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut vals = vec![self.e1, self.e2];
        vals.extend(&self.e_m_m);
        vals.extend(&self.e_mm);
        vals.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")
    }
}
