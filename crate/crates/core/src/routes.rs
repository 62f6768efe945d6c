//! K-bounded simple route enumeration and the OD/arc incidence matrices.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{LinkId, Network};

/// A 0/1 matrix whose columns are indexed by routes.
///
/// Both incidence matrices are stored column-wise (one short index list
/// per route), which is compact for any route count; `to_dense` is for
/// inspection and small-instance checks.
pub trait Incidence {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// `A h`
    fn mul_vec(&self, h: &[f64]) -> Vec<f64>;
    /// `Aᵀ w`
    fn tmul_vec(&self, w: &[f64]) -> Vec<f64>;
    fn to_dense(&self) -> Array2<f64>;
}

/// `Δ_OD`: one row per OD pair, exactly one 1 in each column.
#[derive(Debug, Clone, PartialEq)]
pub struct OdIncidence {
    od_of_route: Vec<usize>,
    routes_per_od: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl OdIncidence {
    pub fn new(n_od: usize, od_of_route: Vec<usize>) -> Result<Self> {
        let mut members = vec![Vec::new(); n_od];
        for (r, &k) in od_of_route.iter().enumerate() {
            if k >= n_od {
                return Err(Error::Shape(format!("route {r} assigned to OD {k} >= {n_od}")));
            }
            members[k].push(r);
        }
        Ok(Self {
            od_of_route,
            routes_per_od: members.iter().map(Vec::len).collect(),
            members,
        })
    }

    pub fn od_of_route(&self) -> &[usize] {
        &self.od_of_route
    }

    /// `|R_pq|` per OD pair.
    pub fn routes_per_od(&self) -> &[usize] {
        &self.routes_per_od
    }

    /// Route indices of OD pair `k`, ascending.
    pub fn routes_of(&self, k: usize) -> &[usize] {
        &self.members[k]
    }
}

impl Incidence for OdIncidence {
    fn rows(&self) -> usize {
        self.routes_per_od.len()
    }

    fn cols(&self) -> usize {
        self.od_of_route.len()
    }

    fn mul_vec(&self, h: &[f64]) -> Vec<f64> {
        assert_eq!(h.len(), self.cols(), "Δ_OD·h: length mismatch");
        let mut out = vec![0.0; self.rows()];
        for (&k, &hr) in self.od_of_route.iter().zip(h) {
            out[k] += hr;
        }
        out
    }

    fn tmul_vec(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.rows(), "Δ_ODᵀ·w: length mismatch");
        self.od_of_route.iter().map(|&k| w[k]).collect()
    }

    fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.rows(), self.cols()));
        for (r, &k) in self.od_of_route.iter().enumerate() {
            m[[k, r]] = 1.0;
        }
        m
    }
}

/// `Δ_arc`: one row per link (ascending id), column `r` marks the links of route `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcIncidence {
    n_links: usize,
    columns: Vec<Vec<usize>>,
}

impl ArcIncidence {
    pub fn new(n_links: usize, columns: Vec<Vec<usize>>) -> Self {
        Self { n_links, columns }
    }

    pub fn column(&self, r: usize) -> &[usize] {
        &self.columns[r]
    }
}

impl Incidence for ArcIncidence {
    fn rows(&self) -> usize {
        self.n_links
    }

    fn cols(&self) -> usize {
        self.columns.len()
    }

    fn mul_vec(&self, h: &[f64]) -> Vec<f64> {
        assert_eq!(h.len(), self.cols(), "Δ_arc·h: length mismatch");
        let mut out = vec![0.0; self.n_links];
        for (col, &hr) in self.columns.iter().zip(h) {
            for &a in col {
                out[a] += hr;
            }
        }
        out
    }

    fn tmul_vec(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.rows(), "Δ_arcᵀ·w: length mismatch");
        self.columns
            .iter()
            .map(|col| col.iter().map(|&a| w[a]).sum())
            .collect()
    }

    fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n_links, self.columns.len()));
        for (r, col) in self.columns.iter().enumerate() {
            for &a in col {
                m[[a, r]] = 1.0;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    pub od: usize,
    /// Link indices (ascending-id order of the network), origin to destination.
    pub links: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RouteSet {
    routes: Vec<Route>,
    k_bound: usize,
    delta_od: OdIncidence,
    delta_arc: ArcIncidence,
    network_fingerprint: String,
    fingerprint: String,
}

impl RouteSet {
    fn from_routes(net: &Network, routes: Vec<Route>, k_bound: usize) -> Result<Self> {
        let delta_od = OdIncidence::new(
            net.num_od_pairs(),
            routes.iter().map(|r| r.od).collect(),
        )?;
        if let Some(k) = delta_od.routes_per_od().iter().position(|&c| c == 0) {
            let od = net.od_pairs()[k];
            return Err(Error::Unreachable {
                origin: od.origin,
                destination: od.destination,
                reason: format!("has no route with at most {k_bound} links"),
            });
        }
        let delta_arc = ArcIncidence::new(
            net.num_links(),
            routes.iter().map(|r| r.links.clone()).collect(),
        );
        let fingerprint = route_fingerprint(net, &routes, k_bound);
        Ok(Self {
            routes,
            k_bound,
            delta_od,
            delta_arc,
            network_fingerprint: net.fingerprint().to_string(),
            fingerprint,
        })
    }

    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    pub fn k_bound(&self) -> usize {
        self.k_bound
    }

    pub fn delta_od(&self) -> &OdIncidence {
        &self.delta_od
    }

    pub fn delta_arc(&self) -> &ArcIncidence {
        &self.delta_arc
    }

    pub fn num_od_pairs(&self) -> usize {
        self.delta_od.rows()
    }

    pub fn num_links(&self) -> usize {
        self.delta_arc.rows()
    }

    pub fn network_fingerprint(&self) -> &str {
        &self.network_fingerprint
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Route indices belonging to OD pair `k`, in canonical order.
    pub fn routes_of_od(&self, k: usize) -> &[usize] {
        self.delta_od.routes_of(k)
    }

    pub fn ensure_network(&self, net: &Network) -> Result<()> {
        if self.network_fingerprint != net.fingerprint() {
            return Err(Error::Fingerprint {
                what: "network",
                expected: net.fingerprint().to_string(),
                found: self.network_fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_route_len(&self, h: &[f64], what: &str) -> Result<()> {
        if h.len() != self.len() {
            return Err(Error::Shape(format!(
                "{what} has length {}, route set has {} routes",
                h.len(),
                self.len()
            )));
        }
        Ok(())
    }

    pub fn to_file(&self, net: &Network) -> RouteFile {
        RouteFile {
            format: ROUTE_FORMAT.into(),
            version: 1,
            network: net.name().to_string(),
            network_fingerprint: self.network_fingerprint.clone(),
            k_bound: self.k_bound,
            fingerprint: self.fingerprint.clone(),
            routes: self
                .routes
                .iter()
                .map(|r| RouteEntry {
                    od: r.od,
                    links: r.links.iter().map(|&a| net.links()[a].id).collect(),
                })
                .collect(),
        }
    }

    pub fn save(&self, net: &Network, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_file(net)).map_err(Error::json)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads a route file and re-validates every route against `net`.
    pub fn load(net: &Network, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: RouteFile = serde_json::from_str(&text).map_err(Error::json)?;
        Self::from_file(net, file)
    }

    pub fn from_file(net: &Network, file: RouteFile) -> Result<Self> {
        if file.format != ROUTE_FORMAT {
            return Err(Error::Validation(format!("not a route file: format {:?}", file.format)));
        }
        if file.network_fingerprint != net.fingerprint() {
            return Err(Error::Fingerprint {
                what: "network",
                expected: net.fingerprint().to_string(),
                found: file.network_fingerprint,
            });
        }
        let mut routes = Vec::with_capacity(file.routes.len());
        for (i, entry) in file.routes.iter().enumerate() {
            let od = *net
                .od_pairs()
                .get(entry.od)
                .ok_or_else(|| Error::Validation(format!("route {i}: unknown OD index {}", entry.od)))?;
            let links = entry
                .links
                .iter()
                .map(|&id| {
                    net.link_index(id)
                        .ok_or_else(|| Error::Validation(format!("route {i}: unknown link {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if links.is_empty() || links.len() > file.k_bound {
                return Err(Error::Validation(format!("route {i}: bad length {}", links.len())));
            }
            let mut node = net.node_index(od.origin).expect("validated network");
            let mut visited = vec![node];
            for &a in &links {
                if net.tail_index(a) != node {
                    return Err(Error::Validation(format!("route {i}: links are not contiguous")));
                }
                node = net.head_index(a);
                if visited.contains(&node) {
                    return Err(Error::Validation(format!("route {i}: repeats a node")));
                }
                visited.push(node);
            }
            if net.nodes()[node] != od.destination {
                return Err(Error::Validation(format!("route {i}: does not end at its destination")));
            }
            routes.push(Route { od: entry.od, links });
        }
        let rs = Self::from_routes(net, routes, file.k_bound)?;
        if rs.fingerprint != file.fingerprint {
            return Err(Error::Fingerprint {
                what: "route set",
                expected: rs.fingerprint.clone(),
                found: file.fingerprint,
            });
        }
        Ok(rs)
    }
}

const ROUTE_FORMAT: &str = "tapflow-routes";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouteFile {
    pub format: String,
    pub version: u32,
    pub network: String,
    pub network_fingerprint: String,
    pub k_bound: usize,
    pub fingerprint: String,
    pub routes: Vec<RouteEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouteEntry {
    pub od: usize,
    pub links: Vec<LinkId>,
}

fn route_fingerprint(net: &Network, routes: &[Route], k_bound: usize) -> String {
    let mut hasher = Sha256::new();
    hasher.update(net.fingerprint().as_bytes());
    hasher.update((k_bound as u64).to_le_bytes());
    for r in routes {
        hasher.update((r.od as u64).to_le_bytes());
        hasher.update((r.links.len() as u64).to_le_bytes());
        for &a in &r.links {
            hasher.update(net.links()[a].id.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Enumerates every simple route with at most `k_bound` links for each OD
/// pair. Routes are ordered by OD index, then lexicographically by link id.
pub fn enumerate_routes(net: &Network, k_bound: usize) -> Result<RouteSet> {
    if k_bound == 0 {
        return Err(Error::Domain("route bound K must be >= 1".into()));
    }
    let per_od: Vec<Vec<Vec<usize>>> = net
        .od_pairs()
        .par_iter()
        .map(|od| {
            let o = net.node_index(od.origin).expect("validated network");
            let d = net.node_index(od.destination).expect("validated network");
            let mut paths = simple_paths(net, o, d, k_bound);
            paths.sort_unstable();
            paths
        })
        .collect();
    let routes = per_od
        .into_iter()
        .enumerate()
        .flat_map(|(k, paths)| paths.into_iter().map(move |links| Route { od: k, links }))
        .collect();
    RouteSet::from_routes(net, routes, k_bound)
}

/// Hop distance from every node to `dest` along link directions.
fn hops_to(net: &Network, dest: usize) -> Vec<usize> {
    let n = net.num_nodes();
    let mut incoming = vec![Vec::new(); n];
    for a in 0..net.num_links() {
        incoming[net.head_index(a)].push(net.tail_index(a));
    }
    let mut dist = vec![usize::MAX; n];
    dist[dest] = 0;
    let mut queue = VecDeque::from([dest]);
    while let Some(v) = queue.pop_front() {
        for &u in &incoming[v] {
            if dist[u] == usize::MAX {
                dist[u] = dist[v] + 1;
                queue.push_back(u);
            }
        }
    }
    dist
}

fn simple_paths(net: &Network, origin: usize, dest: usize, k_bound: usize) -> Vec<Vec<usize>> {
    let hops = hops_to(net, dest);
    let mut on_path = vec![false; net.num_nodes()];
    let mut links = Vec::with_capacity(k_bound);
    let mut out = Vec::new();
    on_path[origin] = true;
    dfs(net, origin, dest, k_bound, &hops, &mut on_path, &mut links, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
fn dfs(
    net: &Network,
    node: usize,
    dest: usize,
    k_bound: usize,
    hops: &[usize],
    on_path: &mut [bool],
    links: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    if node == dest {
        out.push(links.clone());
        return;
    }
    // remaining budget cannot reach the destination
    if hops[node] == usize::MAX || links.len() + hops[node] > k_bound {
        return;
    }
    for &a in net.out_links(node) {
        let next = net.head_index(a);
        if on_path[next] {
            continue;
        }
        on_path[next] = true;
        links.push(a);
        dfs(net, next, dest, k_bound, hops, on_path, links, out);
        links.pop();
        on_path[next] = false;
    }
}

/// Route costs `c(h) = Δ_arcᵀ t(Δ_arc h)`.
pub fn route_costs(net: &Network, rs: &RouteSet, h: &[f64]) -> Result<Vec<f64>> {
    rs.check_route_len(h, "route-flow vector")?;
    if let Some(r) = h.iter().position(|&v| v.is_nan() || v < 0.0) {
        return Err(Error::Domain(format!("route flow h[{r}] = {} is negative", h[r])));
    }
    Ok(route_costs_unchecked(net, rs, h))
}

pub(crate) fn route_costs_unchecked(net: &Network, rs: &RouteSet, h: &[f64]) -> Vec<f64> {
    let v = rs.delta_arc().mul_vec(h);
    let t = net.times_unchecked(&v);
    rs.delta_arc().tmul_vec(&t)
}
