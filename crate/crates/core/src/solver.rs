//! Frank-Wolfe solver for the deterministic user equilibrium in arc-flow space.
//!
//! Each iteration loads every OD demand on its current shortest path
//! (all-or-nothing), then moves toward that auxiliary flow with an exact
//! line search on the Beckmann objective. The relative gap
//! `(c(f)ᵀf − c(f)ᵀf_aon) / c(f)ᵀf` certifies convergence.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NodeId};

/// Distances and predecessor links from one origin, indexed by node index.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortestPathTree {
    pub origin: usize,
    pub dist: Vec<f64>,
    /// Link index entering each node on its shortest path; `None` for the
    /// origin and for unreachable nodes.
    pub pred_link: Vec<Option<usize>>,
}

impl ShortestPathTree {
    /// Link indices of the tree path from the origin to `node`, in travel order.
    pub fn path_to(&self, net: &Network, node: usize) -> Option<Vec<usize>> {
        if !self.dist[node].is_finite() {
            return None;
        }
        let mut links = Vec::new();
        let mut v = node;
        while let Some(a) = self.pred_link[v] {
            links.push(a);
            v = net.tail_index(a);
        }
        links.reverse();
        Some(links)
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then node index
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra from `origin`. Among equal-length alternatives the predecessor
/// link with the smallest id wins.
pub fn shortest_paths(net: &Network, link_times: &[f64], origin: NodeId) -> Result<ShortestPathTree> {
    net.check_arc_len(link_times)?;
    if let Some(a) = link_times.iter().position(|&t| !(t > 0.0)) {
        return Err(Error::Domain(format!(
            "link {} has non-positive travel time {}",
            net.links()[a].id,
            link_times[a]
        )));
    }
    let o = net
        .node_index(origin)
        .ok_or_else(|| Error::Domain(format!("unknown origin node {origin}")))?;
    Ok(dijkstra(net, link_times, o))
}

fn dijkstra(net: &Network, link_times: &[f64], origin: usize) -> ShortestPathTree {
    let n = net.num_nodes();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred_link: Vec<Option<usize>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[origin] = 0.0;
    heap.push(HeapEntry {
        dist: 0.0,
        node: origin,
    });
    while let Some(HeapEntry { dist: d, node: u }) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        for &a in net.out_links(u) {
            let v = net.head_index(a);
            let nd = d + link_times[a];
            if nd < dist[v] {
                dist[v] = nd;
                pred_link[v] = Some(a);
                heap.push(HeapEntry { dist: nd, node: v });
            } else if nd == dist[v] && pred_link[v].is_some_and(|p| a < p) {
                pred_link[v] = Some(a);
            }
        }
    }
    ShortestPathTree {
        origin,
        dist,
        pred_link,
    }
}

/// Shortest-path trees for every distinct origin, plus the AON loading.
struct AonResult {
    flows: Vec<f64>,
    /// `Σ_k d_k · (shortest path cost of k)`
    lower_bound_cost: f64,
}

fn aon(net: &Network, link_times: &[f64], demands: &[f64]) -> Result<AonResult> {
    let mut flows = vec![0.0; net.num_links()];
    let mut lower = 0.0;
    let mut trees: Vec<Option<ShortestPathTree>> = vec![None; net.num_nodes()];
    for (k, od) in net.od_pairs().iter().enumerate() {
        let demand = demands[k];
        let o = net.node_index(od.origin).expect("validated network");
        let d = net.node_index(od.destination).expect("validated network");
        let tree = trees[o].get_or_insert_with(|| dijkstra(net, link_times, o));
        if !tree.dist[d].is_finite() {
            return Err(Error::Unreachable {
                origin: od.origin,
                destination: od.destination,
                reason: "destination unreachable".into(),
            });
        }
        if demand == 0.0 {
            continue;
        }
        lower += demand * tree.dist[d];
        let mut v = d;
        while let Some(a) = tree.pred_link[v] {
            flows[a] += demand;
            v = net.tail_index(a);
        }
    }
    Ok(AonResult {
        flows,
        lower_bound_cost: lower,
    })
}

fn check_demands(net: &Network, demands: &[f64]) -> Result<()> {
    if demands.len() != net.num_od_pairs() {
        return Err(Error::Shape(format!(
            "demand vector has length {}, network has {} OD pairs",
            demands.len(),
            net.num_od_pairs()
        )));
    }
    if let Some(k) = demands.iter().position(|&d| !(d >= 0.0) || !d.is_finite()) {
        return Err(Error::Domain(format!("demand[{k}] = {} must be finite and >= 0", demands[k])));
    }
    Ok(())
}

/// Loads each OD demand entirely on one shortest route under `link_times`.
pub fn all_or_nothing(net: &Network, link_times: &[f64], demands: &[f64]) -> Result<Vec<f64>> {
    net.check_arc_len(link_times)?;
    check_demands(net, demands)?;
    if let Some(a) = link_times.iter().position(|&t| !(t > 0.0)) {
        return Err(Error::Domain(format!(
            "link {} has non-positive travel time {}",
            net.links()[a].id,
            link_times[a]
        )));
    }
    Ok(aon(net, link_times, demands)?.flows)
}

const LINE_SEARCH_TOL: f64 = 1e-10;

/// Step `λ ∈ [0, 1]` minimizing the Beckmann objective on `f + λ (f_aux − f)`,
/// by bisection on its non-decreasing derivative.
pub fn line_search(net: &Network, f: &[f64], f_aux: &[f64]) -> Result<f64> {
    net.check_arc_len(f)?;
    net.check_arc_len(f_aux)?;
    if f.iter().chain(f_aux).any(|&v| !(v >= 0.0)) {
        return Err(Error::Domain("line search needs non-negative arc flows".into()));
    }
    Ok(line_search_unchecked(net, f, f_aux))
}

fn line_search_unchecked(net: &Network, f: &[f64], f_aux: &[f64]) -> f64 {
    let family = net.cost_family();
    let links = net.links();
    let derivative = |lambda: f64| -> f64 {
        let mut s = 0.0;
        for ((l, &x), &y) in links.iter().zip(f).zip(f_aux) {
            let dir = y - x;
            if dir != 0.0 {
                s += l.params.time(family, combine(x, y, lambda)) * dir;
            }
        }
        s
    };
    if f == f_aux {
        return 0.0;
    }
    if derivative(0.0) >= 0.0 {
        return 0.0;
    }
    if derivative(1.0) <= 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while hi - lo > LINE_SEARCH_TOL {
        let mid = 0.5 * (lo + hi);
        if derivative(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `(1 − λ) x + λ y`, non-negative whenever `x, y ≥ 0`.
#[inline]
fn combine(x: f64, y: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * x + lambda * y
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FwOptions {
    pub gap_tol: f64,
    pub max_iters: usize,
}

impl Default for FwOptions {
    fn default() -> Self {
        Self {
            gap_tol: 1e-6,
            max_iters: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArcFlowSolution {
    /// Arc flows in ascending link-id order.
    pub flows: Vec<f64>,
    pub relative_gap: f64,
    pub iterations: usize,
    /// Beckmann objective at `flows`.
    pub objective: f64,
    pub converged: bool,
}

fn gap_from(total_cost: f64, lower_bound: f64) -> f64 {
    if total_cost > 0.0 {
        (total_cost - lower_bound) / total_cost
    } else {
        0.0
    }
}

/// Relative gap of an arc-flow vector for the given demands.
pub fn relative_gap(net: &Network, flows: &[f64], demands: &[f64]) -> Result<f64> {
    check_demands(net, demands)?;
    let times = net.link_times(flows)?;
    let total: f64 = times.iter().zip(flows).map(|(t, v)| t * v).sum();
    let aon = aon(net, &times, demands)?;
    Ok(gap_from(total, aon.lower_bound_cost))
}

/// Solves the user equilibrium for `demands`. Initial flows are the
/// all-or-nothing loading at free-flow times. Hitting `max_iters` is not an
/// error: the last iterate is returned with `converged = false`.
pub fn frank_wolfe(net: &Network, demands: &[f64], opts: &FwOptions) -> Result<ArcFlowSolution> {
    check_demands(net, demands)?;
    if !(opts.gap_tol > 0.0) {
        return Err(Error::Domain(format!("gap tolerance must be > 0 (got {})", opts.gap_tol)));
    }
    if opts.max_iters == 0 {
        return Err(Error::Domain("max_iters must be >= 1".into()));
    }
    let free = net.times_unchecked(&vec![0.0; net.num_links()]);
    let mut flows = aon(net, &free, demands)?.flows;
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    for it in 1..=opts.max_iters {
        iterations = it;
        let times = net.times_unchecked(&flows);
        let total: f64 = times.iter().zip(&flows).map(|(t, v)| t * v).sum();
        if !total.is_finite() {
            return Err(Error::Numerical(format!("total travel cost is {total} at iteration {it}")));
        }
        let aux = aon(net, &times, demands)?;
        gap = gap_from(total, aux.lower_bound_cost);
        if gap <= opts.gap_tol {
            converged = true;
            break;
        }
        if it == opts.max_iters {
            break;
        }
        let lambda = line_search_unchecked(net, &flows, &aux.flows);
        for (x, &y) in flows.iter_mut().zip(&aux.flows) {
            *x = combine(*x, y, lambda);
        }
    }

    let objective = net.beckmann(&flows)?;
    if !objective.is_finite() {
        return Err(Error::Numerical(format!("Beckmann objective is {objective}")));
    }
    Ok(ArcFlowSolution {
        flows,
        relative_gap: gap,
        iterations,
        objective,
        converged,
    })
}
