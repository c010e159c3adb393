use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Candidate, FusionError, OverSegment};

/// Fused probabilities are clamped into `[ε, 1 − ε]` before taking logs.
pub const FUSED_PROB_EPS: f64 = 1e-6;
pub const MAX_EXACT_VERTICES: usize = 20;
pub const ICM_MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Aircraft = 0,
    Other = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Aircraft, Label::Other];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Segment id to label.
pub type Labeling = BTreeMap<u64, Label>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MinimizeMode {
    /// Exhaustive enumeration, at most [`MAX_EXACT_VERTICES`] vertices.
    Exact,
    /// Iterated conditional modes from the all-AIRCRAFT labeling.
    Icm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Pairwise CRF over candidate segments.
///
/// `unary[v][l]` is U(l | s_v); `pairwise[e][li][lj]` is φ for edge `e`.
/// Vertex indices refer to positions in `vertices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGraph {
    pub vertices: Vec<OverSegment>,
    pub fused_prob: Vec<f64>,
    pub edges: Vec<Edge>,
    pub unary: Vec<[f64; 2]>,
    pub pairwise: Vec<[[f64; 2]; 2]>,
}

/// Connects candidates within `radius`, with Potts pairwise costs scaled by `lambda`.
pub fn build_graph(candidates: &[Candidate], radius: f64, lambda: f64) -> Result<CandidateGraph, FusionError> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(FusionError::InvalidParameter("radius must be positive"));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(FusionError::InvalidParameter("lambda must be non-negative"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for c in candidates {
        c.segment.validate()?;
        if !seen.insert(c.segment.id) {
            return Err(FusionError::DuplicateId(c.segment.id));
        }
    }
    let fused_prob: Vec<f64> = candidates
        .iter()
        .map(|c| {
            let p = match c.camera_prob {
                Some(pc) => 0.5 * (c.segment.lidar_class_prob + pc),
                None => c.segment.lidar_class_prob,
            };
            p.clamp(FUSED_PROB_EPS, 1.0 - FUSED_PROB_EPS)
        })
        .collect();
    let unary = fused_prob.iter().map(|&p| [-p.ln(), -(1.0 - p).ln()]).collect();
    let mut edges = Vec::new();
    let mut pairwise = Vec::new();
    for i in 0..candidates.len() {
        for j in (i + 1)..candidates.len() {
            let d = candidates[i].segment.distance(&candidates[j].segment);
            let w = 1.0 - d / radius;
            // a zero-weight edge carries no cost but would still join components
            if d <= radius && w > 0.0 {
                let cost = w * lambda;
                edges.push(Edge { i, j, weight: w });
                pairwise.push([[0.0, cost], [cost, 0.0]]);
            }
        }
    }
    Ok(CandidateGraph {
        vertices: candidates.iter().map(|c| c.segment).collect(),
        fused_prob,
        edges,
        unary,
        pairwise,
    })
}

impl CandidateGraph {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Energy of a labeling given per vertex index.
    pub fn energy_of(&self, labels: &[Label]) -> f64 {
        let unary: f64 = self.unary.iter().zip(labels).map(|(u, l)| u[l.index()]).sum();
        let pair: f64 = self
            .edges
            .iter()
            .zip(&self.pairwise)
            .map(|(e, t)| t[labels[e.i].index()][labels[e.j].index()])
            .sum();
        unary + pair
    }

    /// Labels per vertex index, or the id of the first unlabeled vertex.
    pub fn labels_from(&self, l: &Labeling) -> Result<Vec<Label>, FusionError> {
        self.vertices
            .iter()
            .map(|v| l.get(&v.id).copied().ok_or(FusionError::IncompleteLabeling(v.id)))
            .collect()
    }

    pub fn labeling_from(&self, labels: &[Label]) -> Labeling {
        self.vertices.iter().zip(labels).map(|(v, l)| (v.id, *l)).collect()
    }

    /// Unary plus incident pairwise cost of giving `v` label `l`, others fixed.
    fn local_energy(&self, labels: &[Label], v: usize, l: Label, incident: &[Vec<usize>]) -> f64 {
        let mut e = self.unary[v][l.index()];
        for &k in &incident[v] {
            let edge = &self.edges[k];
            let t = &self.pairwise[k];
            e += if edge.i == v {
                t[l.index()][labels[edge.j].index()]
            } else {
                t[labels[edge.i].index()][l.index()]
            };
        }
        e
    }

    fn incident(&self) -> Vec<Vec<usize>> {
        let mut inc = vec![Vec::new(); self.len()];
        for (k, e) in self.edges.iter().enumerate() {
            inc[e.i].push(k);
            inc[e.j].push(k);
        }
        inc
    }

    /// Vertex indices sorted by ascending segment id.
    fn id_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&v| self.vertices[v].id);
        order
    }
}

/// Φ(L | S): unary terms plus pairwise terms over edges.
pub fn energy(g: &CandidateGraph, l: &Labeling) -> Result<f64, FusionError> {
    Ok(g.energy_of(&g.labels_from(l)?))
}

fn tie_tol(e: f64) -> f64 {
    1e-12 * e.abs().max(1.0)
}

pub fn minimize_energy(g: &CandidateGraph, mode: MinimizeMode) -> Result<Labeling, FusionError> {
    match mode {
        MinimizeMode::Exact => exact(g),
        MinimizeMode::Icm => Ok(g.labeling_from(&icm_trace(g).0)),
    }
}

/// Global minimum; among energies equal within 1e-12 the lexicographically
/// smallest label string (AIRCRAFT < OTHER, ascending id) wins.
fn exact(g: &CandidateGraph) -> Result<Labeling, FusionError> {
    let n = g.len();
    if n > MAX_EXACT_VERTICES {
        return Err(FusionError::TooLargeForExact {
            got: n,
            max: MAX_EXACT_VERTICES,
        });
    }
    let order = g.id_order();
    let mut labels = vec![Label::Aircraft; n];
    let mut best_mask = 0u32;
    let mut best = f64::INFINITY;
    for mask in 0u32..(1u32 << n) {
        // the first vertex in id order is the most significant bit
        for (rank, &v) in order.iter().enumerate() {
            let bit = (mask >> (n - 1 - rank)) & 1;
            labels[v] = if bit == 0 { Label::Aircraft } else { Label::Other };
        }
        let e = g.energy_of(&labels);
        if mask == 0 || e < best - tie_tol(best) {
            best = e;
            best_mask = mask;
        }
    }
    for (rank, &v) in order.iter().enumerate() {
        let bit = (best_mask >> (n - 1 - rank)) & 1;
        labels[v] = if bit == 0 { Label::Aircraft } else { Label::Other };
    }
    Ok(g.labeling_from(&labels))
}

/// Runs ICM and returns the final labels (by vertex index) together with the
/// energy before the first sweep and after every sweep.
pub fn icm_trace(g: &CandidateGraph) -> (Vec<Label>, Vec<f64>) {
    let mut labels = vec![Label::Aircraft; g.len()];
    let incident = g.incident();
    let order = g.id_order();
    let mut trace = vec![g.energy_of(&labels)];
    for _ in 0..ICM_MAX_SWEEPS {
        let mut changed = false;
        for &v in &order {
            let current = g.local_energy(&labels, v, labels[v], &incident);
            for l in Label::ALL {
                if l == labels[v] {
                    continue;
                }
                let alt = g.local_energy(&labels, v, l, &incident);
                if alt < current - tie_tol(current) {
                    labels[v] = l;
                    changed = true;
                }
            }
        }
        trace.push(g.energy_of(&labels));
        if !changed {
            break;
        }
    }
    (labels, trace)
}

/// One merged detection per connected component of AIRCRAFT vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedObject {
    pub label: Label,
    pub member_ids: Vec<u64>,
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// Mean fused probability of the members.
    pub probability: f64,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Unions the boxes of every connected AIRCRAFT-labeled component, using only
/// edges whose endpoints are both AIRCRAFT.
pub fn merge_segments(g: &CandidateGraph, l: &Labeling) -> Result<Vec<MergedObject>, FusionError> {
    let labels = g.labels_from(l)?;
    let n = g.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for e in &g.edges {
        if labels[e.i] == Label::Aircraft && labels[e.j] == Label::Aircraft {
            let a = find(&mut parent, e.i);
            let b = find(&mut parent, e.j);
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for v in 0..n {
        if labels[v] == Label::Aircraft {
            let r = find(&mut parent, v);
            groups.entry(r).or_default().push(v);
        }
    }
    let mut out: Vec<MergedObject> = groups
        .into_values()
        .map(|members| {
            let mut min = [f64::INFINITY; 3];
            let mut max = [f64::NEG_INFINITY; 3];
            let mut ids = Vec::with_capacity(members.len());
            let mut psum = 0.0;
            for &v in &members {
                let s = &g.vertices[v];
                let (lo, hi) = (s.min_corner(), s.max_corner());
                for k in 0..3 {
                    min[k] = min[k].min(lo[k]);
                    max[k] = max[k].max(hi[k]);
                }
                ids.push(s.id);
                psum += g.fused_prob[v];
            }
            ids.sort_unstable();
            MergedObject {
                label: Label::Aircraft,
                member_ids: ids,
                min,
                max,
                probability: psum / members.len() as f64,
            }
        })
        .collect();
    out.sort_by_key(|m| m.member_ids[0]);
    Ok(out)
}
