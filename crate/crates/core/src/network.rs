//! Traffic network model: nodes, links with separable cost functions, and
//! the origin-destination pairs that carry demand.
//!
//! Links are stored sorted by id; every arc-indexed vector in the crate
//! (arc flows, link times, rows of the arc incidence matrix) follows that
//! order. OD pairs keep the order of the source document, which fixes the
//! layout of demand vectors.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type NodeId = u32;
pub type LinkId = u32;

/// Multiplier of the congestion term in the BPR curve.
pub const BPR_ALPHA: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostFamily {
    /// `t0 * (1 + 0.15 * (v / c)^m)`
    Bpr,
    /// `t0 + c * v + m * v^b`
    Polynomial,
}

/// Cost-function parameters of a single link. The meaning of `c` and `m`
/// depends on the [`CostFamily`]; `b` is only read by the polynomial family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkCostParams {
    pub t0: f64,
    pub c: f64,
    pub m: f64,
    #[serde(default = "one")]
    pub b: f64,
}

fn one() -> f64 {
    1.0
}

impl LinkCostParams {
    pub fn new(t0: f64, c: f64, m: f64, b: f64) -> Self {
        Self { t0, c, m, b }
    }

    /// Checks the invariants that make the link time positive and strictly
    /// increasing on `v >= 0`.
    pub fn validate(&self, family: CostFamily) -> std::result::Result<(), String> {
        let finite = [self.t0, self.c, self.m, self.b].iter().all(|v| v.is_finite());
        if !finite {
            return Err("non-finite cost parameter".into());
        }
        if self.t0 <= 0.0 {
            return Err(format!("free-flow time t0 must be > 0 (got {})", self.t0));
        }
        match family {
            CostFamily::Bpr => {
                if self.c <= 0.0 {
                    return Err(format!("capacity c must be > 0 (got {})", self.c));
                }
                if !is_odd_positive_integer(self.m) {
                    return Err(format!(
                        "BPR exponent m must be an odd positive integer (got {})",
                        self.m
                    ));
                }
            }
            CostFamily::Polynomial => {
                if self.c < 0.0 || self.m < 0.0 {
                    return Err("polynomial coefficients c and m must be >= 0".into());
                }
                if !is_odd_positive_integer(self.b) {
                    return Err(format!(
                        "polynomial exponent b must be an odd positive integer (got {})",
                        self.b
                    ));
                }
                if self.c == 0.0 && self.m == 0.0 {
                    return Err("polynomial cost is constant: need c > 0 or m > 0".into());
                }
            }
        }
        Ok(())
    }

    /// `t_a(v)` without the sign check on `v`.
    #[inline]
    pub(crate) fn time(&self, family: CostFamily, v: f64) -> f64 {
        match family {
            CostFamily::Bpr => self.t0 * (1.0 + BPR_ALPHA * (v / self.c).powi(self.m as i32)),
            CostFamily::Polynomial => self.t0 + self.c * v + self.m * v.powi(self.b as i32),
        }
    }

    /// `d t_a / d v`.
    #[inline]
    pub(crate) fn slope(&self, family: CostFamily, v: f64) -> f64 {
        match family {
            CostFamily::Bpr => {
                let m = self.m as i32;
                BPR_ALPHA * self.t0 * self.m / self.c * (v / self.c).powi(m - 1)
            }
            CostFamily::Polynomial => {
                let b = self.b as i32;
                self.c + self.m * self.b * v.powi(b - 1)
            }
        }
    }

    #[inline]
    pub(crate) fn integral(&self, family: CostFamily, v: f64) -> f64 {
        match family {
            CostFamily::Bpr => {
                let e = self.m as i32 + 1;
                self.t0 * v + BPR_ALPHA * self.t0 * self.c * (v / self.c).powi(e) / e as f64
            }
            CostFamily::Polynomial => {
                let e = self.b as i32 + 1;
                self.t0 * v + 0.5 * self.c * v * v + self.m * v.powi(e) / e as f64
            }
        }
    }
}

fn is_odd_positive_integer(x: f64) -> bool {
    x >= 1.0 && x.fract() == 0.0 && x <= 99.0 && (x as i64) % 2 == 1
}

/// Travel time on a link carrying flow `v`.
pub fn link_travel_time(params: &LinkCostParams, family: CostFamily, v: f64) -> Result<f64> {
    check_flow(v)?;
    Ok(params.time(family, v))
}

/// Closed-form `∫₀^v t_a(s) ds`, the link's contribution to the Beckmann objective.
pub fn beckmann_term(params: &LinkCostParams, family: CostFamily, v: f64) -> Result<f64> {
    check_flow(v)?;
    Ok(params.integral(family, v))
}

fn check_flow(v: f64) -> Result<()> {
    if v.is_nan() || v < 0.0 {
        return Err(Error::Domain(format!("link flow must be >= 0 (got {v})")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    pub tail: NodeId,
    pub head: NodeId,
    #[serde(flatten)]
    pub params: LinkCostParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OdPair {
    pub origin: NodeId,
    pub destination: NodeId,
}

/// On-disk layout of a network document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub cost_family: CostFamily,
    pub nodes: Vec<NodeId>,
    pub links: Vec<Link>,
    pub od_pairs: Vec<OdPair>,
    /// Recommended route-length bound for this network.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route_bound: Option<usize>,
    /// Recommended per-OD demand sampling interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand_interval: Option<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct Network {
    name: String,
    description: Option<String>,
    cost_family: CostFamily,
    nodes: Vec<NodeId>,
    links: Vec<Link>,
    od_pairs: Vec<OdPair>,
    route_bound: Option<usize>,
    demand_interval: Option<[f64; 2]>,
    node_index: HashMap<NodeId, usize>,
    /// Outgoing link indices per node index, ascending by link id.
    out_links: Vec<Vec<usize>>,
    fingerprint: String,
}

impl Network {
    /// Builds and validates a network. Links are re-sorted by id.
    pub fn new(file: NetworkFile) -> Result<Self> {
        let NetworkFile {
            name,
            description,
            cost_family,
            mut nodes,
            mut links,
            od_pairs,
            route_bound,
            demand_interval,
        } = file;

        let mut node_set = HashSet::new();
        for &n in &nodes {
            if !node_set.insert(n) {
                return Err(parse_field(format!("nodes: duplicated node id {n}")));
            }
        }
        nodes.sort_unstable();
        let node_index: HashMap<NodeId, usize> =
            nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();

        let mut link_ids = HashSet::new();
        for (i, link) in links.iter().enumerate() {
            if !link_ids.insert(link.id) {
                return Err(parse_field(format!("links[{i}].id: duplicated link id {}", link.id)));
            }
            for (field, n) in [("tail", link.tail), ("head", link.head)] {
                if !node_index.contains_key(&n) {
                    return Err(Error::Validation(format!(
                        "link {}: {field} references unknown node {n}",
                        link.id
                    )));
                }
            }
            if link.tail == link.head {
                return Err(Error::Validation(format!("link {} is a self-loop", link.id)));
            }
            link.params
                .validate(cost_family)
                .map_err(|e| Error::Validation(format!("link {}: {e}", link.id)))?;
        }
        links.sort_by_key(|l| l.id);

        if od_pairs.is_empty() {
            return Err(Error::Validation("network has no OD pairs".into()));
        }
        let mut seen = HashSet::new();
        for od in &od_pairs {
            for n in [od.origin, od.destination] {
                if !node_index.contains_key(&n) {
                    return Err(Error::Validation(format!(
                        "OD pair ({} -> {}) references unknown node {n}",
                        od.origin, od.destination
                    )));
                }
            }
            if od.origin == od.destination {
                return Err(Error::Validation(format!(
                    "OD pair ({} -> {}) has origin equal to destination",
                    od.origin, od.destination
                )));
            }
            if !seen.insert(*od) {
                return Err(Error::Validation(format!(
                    "OD pair ({} -> {}) listed twice",
                    od.origin, od.destination
                )));
            }
        }
        if let Some(k) = route_bound {
            if k == 0 {
                return Err(Error::Validation("route_bound must be >= 1".into()));
            }
        }
        if let Some([lo, hi]) = demand_interval {
            if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
                return Err(Error::Validation(format!(
                    "demand_interval [{lo}, {hi}] must satisfy 0 <= lo < hi"
                )));
            }
        }

        let mut out_links = vec![Vec::new(); nodes.len()];
        for (i, link) in links.iter().enumerate() {
            out_links[node_index[&link.tail]].push(i);
        }

        let mut net = Network {
            name,
            description,
            cost_family,
            nodes,
            links,
            od_pairs,
            route_bound,
            demand_interval,
            node_index,
            out_links,
            fingerprint: String::new(),
        };
        net.check_od_reachability()?;
        net.fingerprint = net.compute_fingerprint();
        Ok(net)
    }

    fn check_od_reachability(&self) -> Result<()> {
        let mut reach_cache: HashMap<usize, Vec<bool>> = HashMap::new();
        for od in &self.od_pairs {
            let o = self.node_index[&od.origin];
            let reach = reach_cache.entry(o).or_insert_with(|| self.reachable_from(o));
            if !reach[self.node_index[&od.destination]] {
                return Err(Error::Unreachable {
                    origin: od.origin,
                    destination: od.destination,
                    reason: "has no route: destination unreachable from origin".into(),
                });
            }
        }
        Ok(())
    }

    fn reachable_from(&self, origin: usize) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([origin]);
        seen[origin] = true;
        while let Some(u) = queue.pop_front() {
            for &l in &self.out_links[u] {
                let v = self.node_index[&self.links[l].head];
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    fn compute_fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            cost_family: CostFamily,
            nodes: &'a [NodeId],
            links: &'a [Link],
            od_pairs: &'a [OdPair],
        }
        let canonical = Canonical {
            cost_family: self.cost_family,
            nodes: &self.nodes,
            links: &self.links,
            od_pairs: &self.od_pairs,
        };
        let bytes = serde_json::to_vec(&canonical).expect("network serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: NetworkFile = serde_json::from_str(text).map_err(Error::json)?;
        Self::new(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_file(&self) -> NetworkFile {
        NetworkFile {
            name: self.name.clone(),
            description: self.description.clone(),
            cost_family: self.cost_family,
            nodes: self.nodes.clone(),
            links: self.links.clone(),
            od_pairs: self.od_pairs.clone(),
            route_bound: self.route_bound,
            demand_interval: self.demand_interval,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn description(&self) -> Option<&str> {
        self.description.as_deref()
    }

    pub fn cost_family(&self) -> CostFamily {
        self.cost_family
    }

    /// Node ids in ascending order.
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    /// Links in ascending id order.
    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn od_pairs(&self) -> &[OdPair] {
        &self.od_pairs
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn num_od_pairs(&self) -> usize {
        self.od_pairs.len()
    }

    pub fn route_bound(&self) -> Option<usize> {
        self.route_bound
    }

    pub fn demand_interval(&self) -> Option<[f64; 2]> {
        self.demand_interval
    }

    /// SHA-256 over the cost family, nodes, links and OD pairs.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn node_index(&self, id: NodeId) -> Option<usize> {
        self.node_index.get(&id).copied()
    }

    pub fn link_index(&self, id: LinkId) -> Option<usize> {
        self.links.binary_search_by_key(&id, |l| l.id).ok()
    }

    pub(crate) fn out_links(&self, node: usize) -> &[usize] {
        &self.out_links[node]
    }

    pub(crate) fn head_index(&self, link: usize) -> usize {
        self.node_index[&self.links[link].head]
    }

    pub(crate) fn tail_index(&self, link: usize) -> usize {
        self.node_index[&self.links[link].tail]
    }

    /// Link travel times for an arc-flow vector (no sign check).
    pub(crate) fn times_unchecked(&self, flows: &[f64]) -> Vec<f64> {
        self.links
            .iter()
            .zip(flows)
            .map(|(l, &v)| l.params.time(self.cost_family, v))
            .collect()
    }

    /// Link travel times `t(v)` for an arc-flow vector.
    pub fn link_times(&self, flows: &[f64]) -> Result<Vec<f64>> {
        self.check_arc_len(flows)?;
        for &v in flows {
            check_flow(v)?;
        }
        Ok(self.times_unchecked(flows))
    }

    /// Beckmann objective `Σ_a ∫₀^{v_a} t_a`.
    pub fn beckmann(&self, flows: &[f64]) -> Result<f64> {
        self.check_arc_len(flows)?;
        let mut total = 0.0;
        for (l, &v) in self.links.iter().zip(flows) {
            total += beckmann_term(&l.params, self.cost_family, v)?;
        }
        Ok(total)
    }

    pub(crate) fn check_arc_len(&self, flows: &[f64]) -> Result<()> {
        if flows.len() != self.links.len() {
            return Err(Error::Shape(format!(
                "arc vector has length {}, network has {} links",
                flows.len(),
                self.links.len()
            )));
        }
        Ok(())
    }
}

fn parse_field(message: String) -> Error {
    Error::Parse {
        line: None,
        column: None,
        message,
    }
}
