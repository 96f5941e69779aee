//! Augmentation graphs over natural samples.
//!
//! Two samples are joined when their augmentation disks can share a view,
//! i.e. when their geodesic distance is at most `connect_factor · r`. With
//! disks of radius `r` on both sides the overlap condition is `α = 2`; `α = 1`
//! gives the single-disk thresholds used by the critical-radius analysis.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::sphere::{
    angle, dot, make_dataset, unit_ball_volume, CapSize, LabeledSphereDataset, UnitVector,
};
use crate::union_find::UnionFind;

/// Default edge predicate: disks of radius `r` overlap iff centers are within `2r`.
pub const DEFAULT_CONNECT_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct AugmentationGraph {
    n: usize,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<usize>>,
    r: f64,
    connect_factor: f64,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

/// Builds the augmentation graph of a labeled dataset.
pub fn build_graph(
    dataset: &LabeledSphereDataset,
    r: f64,
    connect_factor: f64,
) -> Result<AugmentationGraph> {
    let mut g = AugmentationGraph::from_points(
        &dataset.points,
        Some(dataset.labels.clone()),
        r,
        connect_factor,
    )?;
    g.num_classes = g.num_classes.max(dataset.num_classes());
    Ok(g)
}

impl AugmentationGraph {
    /// Pairwise O(N²) construction; rows are scanned in parallel and
    /// concatenated in order, so the edge list is schedule-independent.
    pub fn from_points(
        points: &[UnitVector],
        labels: Option<Vec<usize>>,
        r: f64,
        connect_factor: f64,
    ) -> Result<Self> {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(invalid(format!("augmentation radius {r} must be >= 0")));
        }
        if !(connect_factor > 0.0 && connect_factor.is_finite()) {
            return Err(invalid(format!("connect factor {connect_factor} must be > 0")));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::DimensionMismatch {
                    expected: points.len(),
                    got: l.len(),
                });
            }
        }
        let n = points.len();
        let threshold = connect_factor * r;
        let edges: Vec<Edge> = if r == 0.0 {
            Vec::new()
        } else {
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let pi = points[i].as_slice();
                    ((i + 1)..n)
                        .filter_map(|j| {
                            let distance = angle(pi, &points[j]);
                            (distance <= threshold).then_some(Edge { i, j, distance })
                        })
                        .collect::<Vec<_>>()
                })
                .flatten()
                .collect()
        };
        let mut adjacency = vec![Vec::new(); n];
        for e in &edges {
            adjacency[e.i].push(e.j);
            adjacency[e.j].push(e.i);
        }
        let num_classes = labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|m| m + 1))
            .unwrap_or(0);
        Ok(Self {
            n,
            edges,
            adjacency,
            r,
            connect_factor,
            labels,
            num_classes,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].contains(&b)
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn connect_factor(&self) -> f64 {
        self.connect_factor
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| invalid("operation requires class labels"))
    }

    /// Component id per vertex, numbered by each component's smallest vertex.
    pub fn connected_components(&self) -> Vec<usize> {
        let mut uf = UnionFind::new(self.n);
        for e in &self.edges {
            uf.union(e.i, e.j);
        }
        uf.labels()
    }

    pub fn num_components(&self) -> usize {
        self.connected_components()
            .iter()
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Whether each class induces a connected subgraph.
    pub fn is_classwise_connected(&self) -> Result<Vec<bool>> {
        let labels = self.require_labels()?;
        let mut counts = vec![0usize; self.num_classes];
        for &l in labels {
            counts[l] += 1;
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyClass(k));
        }
        let mut uf = UnionFind::new(self.n);
        for e in &self.edges {
            if labels[e.i] == labels[e.j] {
                uf.union(e.i, e.j);
            }
        }
        let mut roots: Vec<Option<usize>> = vec![None; self.num_classes];
        let mut connected = vec![true; self.num_classes];
        for v in 0..self.n {
            let k = labels[v];
            let root = uf.find(v);
            match roots[k] {
                None => roots[k] = Some(root),
                Some(r) if r != root => connected[k] = false,
                _ => {}
            }
        }
        Ok(connected)
    }

    pub fn label_consistency_violations(&self) -> Result<LabelViolations> {
        let labels = self.require_labels()?;
        let inter_edges = self
            .edges
            .iter()
            .filter(|e| labels[e.i] != labels[e.j])
            .count();
        let intra_edges = self.edges.len() - inter_edges;
        let inter_fraction = if self.edges.is_empty() {
            0.0
        } else {
            inter_edges as f64 / self.edges.len() as f64
        };
        Ok(LabelViolations {
            inter_edges,
            intra_edges,
            inter_fraction,
        })
    }

    /// Hop-count diameter of every intra-class subgraph.
    pub fn intra_class_diameter(&self) -> Result<ClassDiameters> {
        let labels = self.require_labels()?;
        let per_class: Vec<Diameter> = (0..self.num_classes)
            .map(|k| {
                let members: Vec<usize> = (0..self.n).filter(|&v| labels[v] == k).collect();
                self.subgraph_diameter(&members, |v| labels[v] == k)
            })
            .collect();
        let max = per_class.iter().copied().max().unwrap_or(Diameter::Finite(0));
        Ok(ClassDiameters { per_class, max })
    }

    fn subgraph_diameter(&self, members: &[usize], inside: impl Fn(usize) -> bool + Sync) -> Diameter {
        if members.len() <= 1 {
            return Diameter::Finite(0);
        }
        let eccentricity = |src: usize| -> Option<usize> {
            let mut dist = vec![usize::MAX; self.n];
            let mut queue = VecDeque::new();
            dist[src] = 0;
            queue.push_back(src);
            let mut seen = 1;
            let mut far = 0;
            while let Some(u) = queue.pop_front() {
                for &w in &self.adjacency[u] {
                    if dist[w] == usize::MAX && inside(w) {
                        dist[w] = dist[u] + 1;
                        far = far.max(dist[w]);
                        seen += 1;
                        queue.push_back(w);
                    }
                }
            }
            (seen == members.len()).then_some(far)
        };
        if eccentricity(members[0]).is_none() {
            return Diameter::Infinite;
        }
        members
            .par_iter()
            .map(|&s| eccentricity(s).expect("subgraph is connected"))
            .max()
            .map_or(Diameter::Infinite, Diameter::Finite)
    }

    /// Writes the edge list as `i,j,distance`.
    pub fn write_edges_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["i", "j", "distance"])?;
        for e in &self.edges {
            out.write_record([e.i.to_string(), e.j.to_string(), e.distance.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `id,component,label`; the label column is empty for unlabeled graphs.
    pub fn write_components_csv<W: Write>(&self, w: W) -> Result<()> {
        let comps = self.connected_components();
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["id", "component", "label"])?;
        for (v, c) in comps.iter().enumerate() {
            let label = self
                .labels
                .as_ref()
                .map_or(String::new(), |l| l[v].to_string());
            out.write_record([v.to_string(), c.to_string(), label])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelViolations {
    pub inter_edges: usize,
    pub intra_edges: usize,
    pub inter_fraction: f64,
}

/// Shortest-path diameter in hops; `Infinite` when the subgraph is disconnected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Diameter {
    Finite(usize),
    Infinite,
}

impl Diameter {
    pub fn finite(self) -> Option<usize> {
        match self {
            Diameter::Finite(d) => Some(d),
            Diameter::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Diameter::Infinite)
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Diameter::Finite(d) => d as f64,
            Diameter::Infinite => f64::INFINITY,
        }
    }
}

/// Serialized as a number, or `"inf"` in CSV.
impl fmt::Display for Diameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diameter::Finite(d) => write!(f, "{d}"),
            Diameter::Infinite => f.write_str("inf"),
        }
    }
}

/// JSON form: an integer, or `null` for an infinite diameter.
impl Serialize for Diameter {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.finite().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Diameter {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Option::<usize>::deserialize(d)?.map_or(Diameter::Infinite, Diameter::Finite))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDiameters {
    pub per_class: Vec<Diameter>,
    pub max: Diameter,
}

/// Distances governing the under-, perfect- and over-overlap regimes.
///
/// All fields are geodesic distances. The radius at which a graph with
/// connect factor `α` reaches a regime is the distance divided by `α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalRadii {
    pub r1: f64,
    pub r2: f64,
    pub r3: Option<f64>,
    #[serde(rename = "c_N")]
    pub c_n: f64,
    #[serde(rename = "d_N")]
    pub d_n: f64,
}

impl CriticalRadii {
    /// Smallest augmentation radius that connects the graph at connect factor `alpha`.
    pub fn connectivity_radius(&self, alpha: f64) -> f64 {
        self.c_n / alpha
    }
}

/// Minimum and maximum pairwise distance, nearest-neighbor distances and the
/// minimum spanning tree bottleneck, all from dense O(N²) scans.
pub fn critical_radii(points: &[UnitVector], labels: Option<&[usize]>) -> Result<CriticalRadii> {
    let n = points.len();
    if n < 2 {
        return Err(invalid("critical radii need at least two samples"));
    }
    // Work with inner products; arccos is decreasing, so orderings flip.
    struct RowStats {
        nearest: f64,
        farthest: f64,
        inter: f64,
    }
    let rows: Vec<RowStats> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut nearest = f64::NEG_INFINITY;
            let mut farthest = f64::INFINITY;
            let mut inter = f64::NEG_INFINITY;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let c = dot(&points[i], &points[j]);
                nearest = nearest.max(c);
                farthest = farthest.min(c);
                if let Some(l) = labels {
                    if l[i] != l[j] {
                        inter = inter.max(c);
                    }
                }
            }
            RowStats {
                nearest,
                farthest,
                inter,
            }
        })
        .collect();
    let to_angle = |c: f64| c.clamp(-1.0, 1.0).acos();
    let r1 = to_angle(rows.iter().map(|s| s.nearest).fold(f64::NEG_INFINITY, f64::max));
    let r2 = to_angle(rows.iter().map(|s| s.farthest).fold(f64::INFINITY, f64::min));
    let d_n = to_angle(rows.iter().map(|s| s.nearest).fold(f64::INFINITY, f64::min));
    let inter = rows.iter().map(|s| s.inter).fold(f64::NEG_INFINITY, f64::max);
    let r3 = (inter > f64::NEG_INFINITY).then(|| 0.5 * to_angle(inter));
    let c_n = to_angle(mst_bottleneck_similarity(points));
    Ok(CriticalRadii {
        r1,
        r2,
        r3,
        c_n,
        d_n,
    })
}

/// Dense Prim on similarities (maximum spanning tree); returns the smallest
/// similarity used by the tree, i.e. the longest edge in angle.
fn mst_bottleneck_similarity(points: &[UnitVector]) -> f64 {
    let n = points.len();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut current = 0;
    in_tree[0] = true;
    let mut bottleneck = f64::INFINITY;
    for _ in 1..n {
        let p = points[current].as_slice();
        let mut next = usize::MAX;
        let mut next_val = f64::NEG_INFINITY;
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            let c = dot(p, &points[v]);
            if c > best[v] {
                best[v] = c;
            }
            if next == usize::MAX || best[v] > next_val {
                next = v;
                next_val = best[v];
            }
        }
        in_tree[next] = true;
        bottleneck = bottleneck.min(next_val);
        current = next;
    }
    bottleneck
}

pub fn dataset_critical_radii(dataset: &LabeledSphereDataset) -> Result<CriticalRadii> {
    critical_radii(&dataset.points, Some(&dataset.labels))
}

/// One (N, trial) sample of the connectivity thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub trial: usize,
    #[serde(rename = "c_N")]
    pub c_n: f64,
    #[serde(rename = "d_N")]
    pub d_n: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "V_u")]
    pub v_u: f64,
    /// `c_N^d · N² / log N`
    #[serde(rename = "statistic_cN")]
    pub statistic_cn: f64,
    /// `d_N^d · N² / log N`
    #[serde(rename = "statistic_dN")]
    pub statistic_dn: f64,
    /// `c_N^d · N / log N`
    #[serde(rename = "alt_statistic_cN")]
    pub alt_statistic_cn: f64,
}

/// Samples `N` points uniformly from a single cap on `S^d` and records
/// `c_N`, `d_N` and the normalized statistics for every `(N, trial)`.
///
/// Job `t` of the flattened `(N, trial)` grid draws from ChaCha8 stream `t`
/// of `seed`, so records do not depend on scheduling.
pub fn scaling_experiment(
    n_list: &[usize],
    d: usize,
    trials: usize,
    cap: CapSize,
    seed: u64,
) -> Result<Vec<ScalingRecord>> {
    if let Some(&bad) = n_list.iter().find(|&&n| n < 2) {
        return Err(invalid(format!("scaling needs N >= 2, got {bad}")));
    }
    if d == 0 {
        return Err(invalid("sphere dimension must be >= 1"));
    }
    let center = UnitVector::basis(d + 1, d);
    let s = crate::sphere::SphericalCap::new(center.clone(), cap)?.area();
    let v_u = unit_ball_volume(d);
    let jobs: Vec<(usize, usize)> = n_list
        .iter()
        .flat_map(|&n| (0..trials).map(move |t| (n, t)))
        .collect();
    jobs.par_iter()
        .enumerate()
        .map(|(job, &(n, trial))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(job as u64);
            let sub_seed = rand::Rng::random::<u64>(&mut rng);
            let ds = make_dataset(std::slice::from_ref(&center), n, cap, sub_seed)?;
            let cr = critical_radii(&ds.points, None)?;
            let nf = n as f64;
            let log_n = nf.ln();
            let cd = cr.c_n.powi(d as i32);
            let dd = cr.d_n.powi(d as i32);
            Ok(ScalingRecord {
                n,
                d,
                trial,
                c_n: cr.c_n,
                d_n: cr.d_n,
                s,
                v_u,
                statistic_cn: cd * nf * nf / log_n,
                statistic_dn: dd * nf * nf / log_n,
                alt_statistic_cn: cd * nf / log_n,
            })
        })
        .collect()
}

pub fn write_scaling_csv<W: Write>(records: &[ScalingRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
