//! Sensor geometry and the k-nearest-neighbour message graphs.
//!
//! Two adjacency rules are supported. The *masked* rule lets every node
//! receive from its `k` nearest nodes drawn only from the known set, so
//! unknown nodes never send. The *full* rule draws from every node. In both
//! cases an edge `i -> j` carries the weight `1 - dist(i, j) / d_max`.
//!
//! Graphs are stored as receiver-indexed sender lists rather than dense
//! matrices: an edge whose weight is exactly zero is still a member of the
//! neighbourhood and counts towards mean-type aggregators.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SatcnError};

const EARTH_RADIUS_KM: f64 = 6371.0;

/// Distance metric applied to sensor coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Planar Euclidean distance on `(x, y)`.
    Euclidean,
    /// Great-circle distance in kilometres on `(lat, lon)` in degrees.
    Haversine,
}

impl Metric {
    pub fn distance(self, a: [f64; 2], b: [f64; 2]) -> f64 {
        match self {
            Metric::Euclidean => ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt(),
            Metric::Haversine => {
                let (lat1, lon1) = (a[0].to_radians(), a[1].to_radians());
                let (lat2, lon2) = (b[0].to_radians(), b[1].to_radians());
                let dlat = lat2 - lat1;
                let dlon = lon2 - lon1;
                let h = (dlat / 2.0).sin().powi(2)
                    + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
                2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
            }
        }
    }
}

/// A set of sensors with their pairwise distances.
#[derive(Debug, Clone)]
pub struct SensorSet {
    ids: Vec<String>,
    coords: Option<Vec<[f64; 2]>>,
    metric: Option<Metric>,
    dist: Array2<f64>,
    d_max: f64,
    // For each receiver, every other node sorted by (distance, index).
    order: Vec<Vec<u32>>,
}

impl SensorSet {
    /// Builds a sensor set from coordinates, computing distances with `metric`.
    pub fn from_coords(ids: Vec<String>, coords: Vec<[f64; 2]>, metric: Metric) -> Result<Self> {
        if ids.len() != coords.len() {
            return Err(SatcnError::shape(format!(
                "{} ids but {} coordinate rows",
                ids.len(),
                coords.len()
            )));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SatcnError::invalid("non-finite sensor coordinate"));
        }
        let n = coords.len();
        let mut dist = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let d = metric.distance(coords[i], coords[j]);
                dist[[i, j]] = d;
                dist[[j, i]] = d;
            }
        }
        Self::assemble(ids, Some(coords), Some(metric), dist)
    }

    /// Builds a sensor set from a precomputed symmetric distance matrix.
    pub fn from_distance_matrix(ids: Vec<String>, dist: Array2<f64>) -> Result<Self> {
        let n = ids.len();
        if dist.dim() != (n, n) {
            return Err(SatcnError::shape(format!(
                "distance matrix is {:?}, expected {n}x{n}",
                dist.dim()
            )));
        }
        for i in 0..n {
            if dist[[i, i]] != 0.0 {
                return Err(SatcnError::invalid(format!("nonzero diagonal distance at {i}")));
            }
            for j in 0..n {
                let d = dist[[i, j]];
                if !d.is_finite() || d < 0.0 {
                    return Err(SatcnError::invalid(format!("invalid distance {d} at ({i}, {j})")));
                }
                if d != dist[[j, i]] {
                    return Err(SatcnError::invalid(format!("asymmetric distance at ({i}, {j})")));
                }
            }
        }
        Self::assemble(ids, None, None, dist)
    }

    fn assemble(
        ids: Vec<String>,
        coords: Option<Vec<[f64; 2]>>,
        metric: Option<Metric>,
        dist: Array2<f64>,
    ) -> Result<Self> {
        let n = ids.len();
        if n < 2 {
            return Err(SatcnError::invalid(format!("need at least 2 sensors, got {n}")));
        }
        let d_max = dist.iter().copied().fold(0.0_f64, f64::max);
        if d_max <= 0.0 {
            return Err(SatcnError::invalid("all sensors share one position (d_max = 0)"));
        }
        let order = (0..n)
            .map(|j| {
                let mut others: Vec<u32> = (0..n as u32).filter(|&i| i as usize != j).collect();
                others.sort_by(|&a, &b| {
                    dist[[a as usize, j]]
                        .total_cmp(&dist[[b as usize, j]])
                        .then(a.cmp(&b))
                });
                others
            })
            .collect();
        Ok(SensorSet {
            ids,
            coords,
            metric,
            dist,
            d_max,
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn coords(&self) -> Option<&[[f64; 2]]> {
        self.coords.as_deref()
    }

    pub fn metric(&self) -> Option<Metric> {
        self.metric
    }

    pub fn dist(&self) -> &Array2<f64> {
        &self.dist
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.dist[[i, j]]
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }

    /// Nodes other than `j`, nearest first, ties by ascending index.
    pub fn nearest_order(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.order[j].iter().map(|&i| i as usize)
    }

    /// Restricts the set to `indices` (in that order). `d_max` is recomputed
    /// over the subset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let n = indices.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(SatcnError::invalid(format!("sensor index {bad} out of range")));
        }
        let ids = indices.iter().map(|&i| self.ids[i].clone()).collect();
        let coords = self
            .coords
            .as_ref()
            .map(|c| indices.iter().map(|&i| c[i]).collect());
        let dist = Array2::from_shape_fn((n, n), |(a, b)| self.dist[[indices[a], indices[b]]]);
        Self::assemble(ids, coords, self.metric, dist)
    }
}

/// Builds a sensor set from bare coordinates, naming sensors `s0`, `s1`, ...
pub fn build_distance_matrix(coords: &[[f64; 2]], metric: Metric) -> Result<SensorSet> {
    let ids = (0..coords.len()).map(|i| format!("s{i}")).collect();
    SensorSet::from_coords(ids, coords.to_vec(), metric)
}

/// Which adjacency rule produced a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    Masked,
    Full,
    TimeVarying,
}

/// One incoming edge of a receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub sender: usize,
    pub weight: f64,
}

/// Receiver-indexed weighted sender lists.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    receivers: Vec<Vec<Edge>>,
    k: usize,
    kind: GraphKind,
}

impl NeighborGraph {
    /// Assembles a graph from explicit sender lists. Used for hand-built
    /// graphs in tests and tools; builders below are the normal route.
    pub fn from_edges(receivers: Vec<Vec<Edge>>, k: usize, kind: GraphKind) -> Result<Self> {
        let n = receivers.len();
        for (j, edges) in receivers.iter().enumerate() {
            for e in edges {
                if e.sender >= n {
                    return Err(SatcnError::invalid(format!("sender {} out of range", e.sender)));
                }
                if e.sender == j {
                    return Err(SatcnError::invalid(format!("self-edge at node {j}")));
                }
                if !(0.0..=1.0).contains(&e.weight) {
                    return Err(SatcnError::invalid(format!("edge weight {} outside [0, 1]", e.weight)));
                }
            }
        }
        Ok(NeighborGraph { receivers, k, kind })
    }

    pub fn n_nodes(&self) -> usize {
        self.receivers.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn neighbors(&self, j: usize) -> &[Edge] {
        &self.receivers[j]
    }

    pub fn receivers(&self) -> &[Vec<Edge>] {
        &self.receivers
    }

    /// Sum of incoming edge weights of `j`.
    pub fn incoming_weight_sum(&self, j: usize) -> f64 {
        self.receivers[j].iter().map(|e| e.weight).sum()
    }

    /// Whether `i` sends to at least one receiver.
    pub fn sends(&self, i: usize) -> bool {
        self.receivers.iter().flatten().any(|e| e.sender == i)
    }

    pub fn edge_count(&self) -> usize {
        self.receivers.iter().map(Vec::len).sum()
    }
}

fn build_with_mask(s: &SensorSet, k: usize, blocked: &[bool], kind: GraphKind) -> Result<NeighborGraph> {
    if k == 0 {
        return Err(SatcnError::invalid("k must be at least 1"));
    }
    if blocked.iter().all(|&b| b) {
        return Err(SatcnError::invalid("no eligible sender: every node is masked"));
    }
    let d_max = s.d_max();
    let receivers = (0..s.len())
        .map(|j| {
            s.nearest_order(j)
                .filter(|&i| !blocked[i])
                .take(k)
                .map(|i| Edge {
                    sender: i,
                    weight: 1.0 - s.distance(i, j) / d_max,
                })
                .collect()
        })
        .collect();
    Ok(NeighborGraph { receivers, k, kind })
}

fn omega_mask(n: usize, omega: &[usize]) -> Result<Vec<bool>> {
    let mut blocked = vec![false; n];
    for &i in omega {
        if i >= n {
            return Err(SatcnError::invalid(format!("masked node {i} out of range (n = {n})")));
        }
        blocked[i] = true;
    }
    Ok(blocked)
}

/// Masked adjacency: nodes in `omega` receive but never send.
pub fn build_masked_adjacency(s: &SensorSet, k: usize, omega: &[usize]) -> Result<NeighborGraph> {
    let blocked = omega_mask(s.len(), omega)?;
    build_with_mask(s, k, &blocked, GraphKind::Masked)
}

/// Masked adjacency from a boolean mask (`true` = masked).
pub fn build_masked_adjacency_from_mask(s: &SensorSet, k: usize, masked: &[bool]) -> Result<NeighborGraph> {
    if masked.len() != s.len() {
        return Err(SatcnError::shape(format!(
            "mask has {} entries for {} sensors",
            masked.len(),
            s.len()
        )));
    }
    build_with_mask(s, k, masked, GraphKind::Masked)
}

/// Full adjacency: every node may send.
pub fn build_full_adjacency(s: &SensorSet, k: usize) -> Result<NeighborGraph> {
    build_with_mask(s, k, &vec![false; s.len()], GraphKind::Full)
}

/// Masked adjacency for one time step: nodes unavailable at `t` do not send.
pub fn build_time_varying_adjacency(s: &SensorSet, k: usize, available: &[bool]) -> Result<NeighborGraph> {
    if available.len() != s.len() {
        return Err(SatcnError::shape(format!(
            "availability has {} entries for {} sensors",
            available.len(),
            s.len()
        )));
    }
    if !available.iter().any(|&a| a) {
        return Err(SatcnError::invalid("no sensor available at this time step"));
    }
    let blocked: Vec<bool> = available.iter().map(|&a| !a).collect();
    build_with_mask(s, k, &blocked, GraphKind::TimeVarying)
}

/// The graphs a spatial layer uses across the time axis: one graph for every
/// column, or a per-column list when availability changes over time.
#[derive(Debug, Clone)]
pub enum GraphSchedule {
    Static(Arc<NeighborGraph>),
    PerStep(Vec<Arc<NeighborGraph>>),
}

impl GraphSchedule {
    pub fn at(&self, t: usize) -> &NeighborGraph {
        match self {
            GraphSchedule::Static(g) => g,
            GraphSchedule::PerStep(gs) => &gs[t],
        }
    }

    pub fn n_nodes(&self) -> usize {
        match self {
            GraphSchedule::Static(g) => g.n_nodes(),
            GraphSchedule::PerStep(gs) => gs.first().map_or(0, |g| g.n_nodes()),
        }
    }

    /// Number of columns the schedule covers, `None` when it is static.
    pub fn steps(&self) -> Option<usize> {
        match self {
            GraphSchedule::Static(_) => None,
            GraphSchedule::PerStep(gs) => Some(gs.len()),
        }
    }

    /// Masked graphs for a window: at column `t` node `i` is blocked from
    /// sending when `masked[i]` or when `observed[[i, t]]` is false. Columns
    /// sharing a blocked set share one graph. A column where every node is
    /// blocked gets an edgeless graph.
    pub fn masked_window(
        s: &SensorSet,
        k: usize,
        masked: &[bool],
        observed: ArrayView2<'_, bool>,
    ) -> Result<Self> {
        let n = s.len();
        if masked.len() != n || observed.nrows() != n {
            return Err(SatcnError::shape(format!(
                "mask rows ({}, {}) do not match {n} sensors",
                masked.len(),
                observed.nrows()
            )));
        }
        if k == 0 {
            return Err(SatcnError::invalid("k must be at least 1"));
        }
        let mut cache: HashMap<Vec<bool>, Arc<NeighborGraph>> = HashMap::new();
        let mut steps = Vec::with_capacity(observed.ncols());
        for col in observed.columns() {
            let blocked: Vec<bool> = masked.iter().zip(col.iter()).map(|(&m, &o)| m || !o).collect();
            let g = match cache.get(&blocked) {
                Some(g) => Arc::clone(g),
                None => {
                    let g = if blocked.iter().all(|&b| b) {
                        NeighborGraph {
                            receivers: vec![Vec::new(); n],
                            k,
                            kind: GraphKind::TimeVarying,
                        }
                    } else {
                        build_with_mask(s, k, &blocked, GraphKind::TimeVarying)?
                    };
                    let g = Arc::new(g);
                    cache.insert(blocked, Arc::clone(&g));
                    g
                }
            };
            steps.push(g);
        }
        if cache.len() == 1 {
            let mut g = (*steps[0]).clone();
            g.kind = GraphKind::Masked;
            return Ok(GraphSchedule::Static(Arc::new(g)));
        }
        Ok(GraphSchedule::PerStep(steps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line() -> SensorSet {
        build_distance_matrix(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], Metric::Euclidean).unwrap()
    }

    fn senders(g: &NeighborGraph, j: usize) -> Vec<(usize, f64)> {
        g.neighbors(j).iter().map(|e| (e.sender, e.weight)).collect()
    }

    #[test]
    fn three_four_five() {
        let s = build_distance_matrix(&[[0.0, 0.0], [3.0, 4.0]], Metric::Euclidean).unwrap();
        assert_eq!(s.dist()[[0, 1]], 5.0);
        assert_eq!(s.dist()[[1, 0]], 5.0);
        assert_eq!(s.dist()[[0, 0]], 0.0);
        assert_eq!(s.d_max(), 5.0);
    }

    #[test]
    fn degenerate_sets_rejected() {
        assert!(build_distance_matrix(&[[0.0, 0.0]], Metric::Euclidean).is_err());
        assert!(build_distance_matrix(&[[1.0, 1.0], [1.0, 1.0]], Metric::Euclidean).is_err());
        // duplicates are fine as long as something differs
        let s = build_distance_matrix(&[[1.0, 1.0], [1.0, 1.0], [2.0, 1.0]], Metric::Euclidean).unwrap();
        assert_eq!(s.distance(0, 1), 0.0);
    }

    #[test]
    fn collinear_d_max() {
        assert_eq!(line().d_max(), 2.0);
    }

    #[test]
    fn haversine_quarter_meridian() {
        let s = build_distance_matrix(&[[0.0, 0.0], [90.0, 0.0]], Metric::Haversine).unwrap();
        let expected = EARTH_RADIUS_KM * std::f64::consts::FRAC_PI_2;
        assert!((s.distance(0, 1) - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn masked_rule_on_line() {
        let g = build_masked_adjacency(&line(), 1, &[2]).unwrap();
        assert_eq!(senders(&g, 0), vec![(1, 0.5)]);
        assert_eq!(senders(&g, 2), vec![(1, 0.5)]);
        assert!(!g.sends(2));
    }

    #[test]
    fn tie_broken_by_lower_index() {
        let g = build_masked_adjacency(&line(), 1, &[]).unwrap();
        assert_eq!(senders(&g, 1), vec![(0, 0.5)]);
    }

    #[test]
    fn exhausted_senders_leave_empty_list() {
        let g = build_masked_adjacency(&line(), 3, &[0, 1]).unwrap();
        assert_eq!(senders(&g, 0), vec![(2, 0.0)]);
        assert_eq!(senders(&g, 1), vec![(2, 0.5)]);
        assert!(g.neighbors(2).is_empty());
    }

    #[test]
    fn all_masked_is_error() {
        assert!(build_masked_adjacency(&line(), 1, &[0, 1, 2]).is_err());
        assert!(build_masked_adjacency(&line(), 0, &[]).is_err());
        assert!(build_masked_adjacency(&line(), 1, &[5]).is_err());
    }

    #[test]
    fn full_rule_keeps_zero_weight_edge() {
        let g = build_full_adjacency(&line(), 2).unwrap();
        assert_eq!(senders(&g, 0), vec![(1, 0.5), (2, 0.0)]);
        assert_eq!(g.kind(), GraphKind::Full);
    }

    #[test]
    fn full_rule_saturates() {
        let g = build_full_adjacency(&line(), 10).unwrap();
        for j in 0..3 {
            assert_eq!(g.neighbors(j).len(), 2);
        }
    }

    #[test]
    fn full_equals_unmasked() {
        let s = line();
        let full = build_full_adjacency(&s, 1).unwrap();
        let masked = build_masked_adjacency(&s, 1, &[]).unwrap();
        assert_eq!(full.receivers(), masked.receivers());
    }

    #[test]
    fn time_varying_rule() {
        let s = line();
        let g = build_time_varying_adjacency(&s, 1, &[true, false, true]).unwrap();
        assert_eq!(senders(&g, 0), vec![(2, 0.0)]);
        let all = build_time_varying_adjacency(&s, 1, &[true; 3]).unwrap();
        assert_eq!(all.receivers(), build_masked_adjacency(&s, 1, &[]).unwrap().receivers());
        assert!(build_time_varying_adjacency(&s, 1, &[false; 3]).is_err());
    }

    #[test]
    fn distance_matrix_validation() {
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        let bad = ndarray::array![[0.0, 1.0], [2.0, 0.0]];
        assert!(SensorSet::from_distance_matrix(ids.clone(), bad).is_err());
        let good = ndarray::array![[0.0, 1.5], [1.5, 0.0]];
        let s = SensorSet::from_distance_matrix(ids, good).unwrap();
        assert_eq!(s.d_max(), 1.5);
        assert!(s.coords().is_none());
    }

    fn sensors_strategy() -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec((0.0..1.0f64, 0.0..1.0f64).prop_map(|(x, y)| [x, y]), 3..14)
    }

    proptest! {
        #[test]
        fn graph_invariants(
            coords in sensors_strategy(),
            k in 1usize..6,
            mask_bits in prop::collection::vec(any::<bool>(), 14),
        ) {
            let s = build_distance_matrix(&coords, Metric::Euclidean).unwrap();
            let n = s.len();
            let mut omega: Vec<usize> = (0..n).filter(|&i| mask_bits[i]).collect();
            if omega.len() == n {
                omega.pop();
            }
            let g = build_masked_adjacency(&s, k, &omega).unwrap();
            let eligible = n - omega.len();
            for j in 0..n {
                let edges = g.neighbors(j);
                let avail = eligible - usize::from(!omega.contains(&j));
                prop_assert_eq!(edges.len(), k.min(avail));
                for e in edges {
                    prop_assert!(e.sender != j);
                    prop_assert!(!omega.contains(&e.sender));
                    prop_assert!((e.weight - (1.0 - s.distance(e.sender, j) / s.d_max())).abs() < 1e-12);
                    prop_assert!((0.0..=1.0).contains(&e.weight));
                }
                for pair in edges.windows(2) {
                    let (a, b) = (pair[0].sender, pair[1].sender);
                    let (da, db) = (s.distance(a, j), s.distance(b, j));
                    prop_assert!(da < db || (da == db && a < b));
                }
            }
            // Enlarging omega only shrinks the eligible sender pool. With k-truncation a
            // receiver can pick up a farther replacement, but never a masked node.
            if omega.len() + 1 < n {
                let extra = (0..n).find(|i| !omega.contains(i)).unwrap();
                let mut bigger = omega.clone();
                bigger.push(extra);
                let g2 = build_masked_adjacency(&s, k, &bigger).unwrap();
                for j in 0..n {
                    let pool: Vec<usize> = s.nearest_order(j).filter(|i| !omega.contains(i)).collect();
                    for e in g2.neighbors(j) {
                        prop_assert!(pool.contains(&e.sender));
                        prop_assert!(e.sender != extra);
                    }
                }
            }
            // Determinism.
            prop_assert_eq!(g, build_masked_adjacency(&s, k, &omega).unwrap());
        }

        #[test]
        fn coords_match_metric(coords in sensors_strategy()) {
            for metric in [Metric::Euclidean, Metric::Haversine] {
                let s = build_distance_matrix(&coords, metric).unwrap();
                for i in 0..s.len() {
                    for j in 0..s.len() {
                        let d = metric.distance(coords[i], coords[j]);
                        prop_assert!((s.distance(i, j) - d).abs() <= 1e-9 * d.max(1e-300));
                        prop_assert_eq!(s.distance(i, j), s.distance(j, i));
                    }
                }
            }
        }
    }
}
