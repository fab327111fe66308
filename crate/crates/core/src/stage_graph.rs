//! Dependency graph of one pipelined training iteration and its makespan.
//!
//! For a device with parallel batch number `N` the iteration consists of six
//! stages per micro-batch: device forward, upload, server forward, server
//! backward, download and device backward. Each stage may start once all of
//! its predecessors have finished; [`estimate_makespan`] evaluates the
//! longest weighted path to the final device backward stage by a single pass
//! over a topological order. Resource contention is deliberately not modelled
//! here; see [`crate::sim`] for that.

use std::fmt;

use thiserror::Error;

use crate::cost_model::{LayerProfiles, NetworkProfile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("parallel batch number must be at least 1")]
    ZeroBatches,
    #[error("stage times cover {times} micro-batches, graph has {graph}")]
    MissingTimes { times: usize, graph: usize },
    #[error("stage {0} has a negative or non-finite duration")]
    BadDuration(Stage),
    #[error("split point {point} outside [1, {layers}]")]
    SplitOutOfRange { point: usize, layers: usize },
    #[error("bandwidth must be positive")]
    Bandwidth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageKind {
    DeviceForward,
    Upload,
    ServerForward,
    ServerBackward,
    Download,
    DeviceBackward,
}

impl StageKind {
    pub const ALL: [StageKind; 6] = [
        StageKind::DeviceForward,
        StageKind::Upload,
        StageKind::ServerForward,
        StageKind::ServerBackward,
        StageKind::Download,
        StageKind::DeviceBackward,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            StageKind::DeviceForward => "fc",
            StageKind::Upload => "u",
            StageKind::ServerForward => "fs",
            StageKind::ServerBackward => "bs",
            StageKind::Download => "d",
            StageKind::DeviceBackward => "bc",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.symbol() == s)
    }

    /// The resource a stage of this kind occupies on device `device`.
    pub fn resource(self, device: usize) -> Resource {
        match self {
            StageKind::DeviceForward | StageKind::DeviceBackward => Resource::DeviceCompute(device),
            StageKind::Upload => Resource::Uplink(device),
            StageKind::ServerForward | StageKind::ServerBackward => Resource::ServerCompute,
            StageKind::Download => Resource::Downlink(device),
        }
    }
}

/// Execution lanes: device compute, the server, and a dedicated up/down
/// channel per device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Resource {
    DeviceCompute(usize),
    ServerCompute,
    Uplink(usize),
    Downlink(usize),
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resource::DeviceCompute(k) => write!(f, "device{k}"),
            Resource::ServerCompute => f.write_str("server"),
            Resource::Uplink(k) => write!(f, "uplink{k}"),
            Resource::Downlink(k) => write!(f, "downlink{k}"),
        }
    }
}

/// A stage for micro-batch `batch` (1-based) of device `device`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Stage {
    pub kind: StageKind,
    pub batch: usize,
    pub device: usize,
}

impl Stage {
    pub fn new(kind: StageKind, batch: usize, device: usize) -> Self {
        Self {
            kind,
            batch,
            device,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]@{}", self.kind.symbol(), self.batch, self.device)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageGraph {
    batches: usize,
    device: usize,
    prev: Vec<Vec<usize>>,
    next: Vec<Vec<usize>>,
    topo: Vec<usize>,
}

impl StageGraph {
    fn slot(&self, kind: StageKind, batch: usize) -> usize {
        kind.index() * self.batches + (batch - 1)
    }

    fn stage_at(&self, idx: usize) -> Stage {
        Stage::new(
            StageKind::ALL[idx / self.batches],
            idx % self.batches + 1,
            self.device,
        )
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn device(&self) -> usize {
        self.device
    }

    pub fn len(&self) -> usize {
        self.prev.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prev.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.prev.iter().map(Vec::len).sum()
    }

    pub fn contains(&self, stage: Stage) -> bool {
        stage.device == self.device && stage.batch >= 1 && stage.batch <= self.batches
    }

    /// Dense index of a stage, usable with [`StageGraph::stage`].
    pub fn index_of(&self, stage: Stage) -> Option<usize> {
        self.contains(stage)
            .then(|| self.slot(stage.kind, stage.batch))
    }

    pub fn stage(&self, idx: usize) -> Stage {
        self.stage_at(idx)
    }

    pub fn stages(&self) -> impl Iterator<Item = Stage> + '_ {
        (0..self.len()).map(|i| self.stage_at(i))
    }

    pub fn prev(&self, stage: Stage) -> Vec<Stage> {
        self.index_of(stage)
            .map(|i| self.prev[i].iter().map(|&j| self.stage_at(j)).collect())
            .unwrap_or_default()
    }

    pub fn next(&self, stage: Stage) -> Vec<Stage> {
        self.index_of(stage)
            .map(|i| self.next[i].iter().map(|&j| self.stage_at(j)).collect())
            .unwrap_or_default()
    }

    pub(crate) fn prev_indices(&self, idx: usize) -> &[usize] {
        &self.prev[idx]
    }

    /// Stage indices in a topological order.
    pub fn topological_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn source(&self) -> Stage {
        Stage::new(StageKind::DeviceForward, 1, self.device)
    }

    pub fn sink(&self) -> Stage {
        Stage::new(StageKind::DeviceBackward, self.batches, self.device)
    }
}

/// Builds the iteration graph for parallel batch number `batches` on device
/// `device`.
///
/// For a single micro-batch the graph is the plain chain
/// `fc -> u -> fs -> bs -> d -> bc`; the `fc[N] -> bc[1]` edge is implied by
/// the chain and omitted.
pub fn build_iteration_graph(batches: usize, device: usize) -> Result<StageGraph, GraphError> {
    use StageKind::*;
    if batches == 0 {
        return Err(GraphError::ZeroBatches);
    }
    let n_max = batches;
    let mut g = StageGraph {
        batches,
        device,
        prev: vec![Vec::new(); 6 * batches],
        next: vec![Vec::new(); 6 * batches],
        topo: Vec::new(),
    };
    let mut edges = Vec::new();
    for n in 1..=n_max {
        let s = |k: StageKind, b: usize| k.index() * batches + (b - 1);
        if n > 1 {
            edges.push((s(DeviceForward, n - 1), s(DeviceForward, n)));
        }
        if n > 1 {
            edges.push((s(Upload, n - 1), s(Upload, n)));
        }
        edges.push((s(DeviceForward, n), s(Upload, n)));
        edges.push((s(Upload, n), s(ServerForward, n)));
        if n > 1 {
            edges.push((s(ServerBackward, n - 1), s(ServerForward, n)));
        }
        edges.push((s(ServerForward, n), s(ServerBackward, n)));
        if n > 1 {
            edges.push((s(Download, n - 1), s(Download, n)));
        }
        edges.push((s(ServerBackward, n), s(Download, n)));
        if n == 1 {
            if n_max > 1 {
                edges.push((s(DeviceForward, n_max), s(DeviceBackward, 1)));
            }
        } else {
            edges.push((s(DeviceBackward, n - 1), s(DeviceBackward, n)));
        }
        edges.push((s(Download, n), s(DeviceBackward, n)));
    }
    for (from, to) in edges {
        g.prev[to].push(from);
        g.next[from].push(to);
    }
    for list in g.prev.iter_mut() {
        list.sort_unstable();
    }
    g.topo = topological_sort(&g.prev, &g.next).expect("iteration graph is acyclic");
    Ok(g)
}

/// Kahn's algorithm; `None` when a cycle exists.
pub(crate) fn topological_sort(prev: &[Vec<usize>], next: &[Vec<usize>]) -> Option<Vec<usize>> {
    let mut indegree: Vec<usize> = prev.iter().map(Vec::len).collect();
    let mut ready: std::collections::VecDeque<usize> =
        (0..prev.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(prev.len());
    while let Some(i) = ready.pop_front() {
        order.push(i);
        for &j in &next[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                ready.push_back(j);
            }
        }
    }
    (order.len() == prev.len()).then_some(order)
}

/// Duration of every stage of one device's iteration graph, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTimes {
    batches: usize,
    durations: Vec<f64>,
}

impl StageTimes {
    /// Same duration for every micro-batch of a kind, indexed by
    /// [`StageKind::index`].
    pub fn uniform(batches: usize, per_kind: [f64; 6]) -> Self {
        let durations = per_kind
            .iter()
            .flat_map(|&t| std::iter::repeat_n(t, batches))
            .collect();
        Self { batches, durations }
    }

    pub fn from_fn(batches: usize, mut f: impl FnMut(StageKind, usize) -> f64) -> Self {
        let mut durations = Vec::with_capacity(6 * batches);
        for kind in StageKind::ALL {
            for n in 1..=batches {
                durations.push(f(kind, n));
            }
        }
        Self { batches, durations }
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn get(&self, kind: StageKind, batch: usize) -> f64 {
        self.durations[kind.index() * self.batches + batch - 1]
    }

    pub fn set(&mut self, kind: StageKind, batch: usize, value: f64) {
        self.durations[kind.index() * self.batches + batch - 1] = value;
    }

    /// Duration of stage kind for micro-batch 1.
    pub fn of_kind(&self, kind: StageKind) -> f64 {
        self.get(kind, 1)
    }

    pub fn total(&self) -> f64 {
        self.durations.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            batches: self.batches,
            durations: self.durations.iter().map(|t| t * factor).collect(),
        }
    }

    /// Durations laid out by the graph's dense stage index.
    pub(crate) fn dense(&self) -> &[f64] {
        &self.durations
    }

    pub(crate) fn check(&self, graph: &StageGraph) -> Result<(), GraphError> {
        if self.batches != graph.batches() {
            return Err(GraphError::MissingTimes {
                times: self.batches,
                graph: graph.batches(),
            });
        }
        if let Some(i) = self.durations.iter().position(|t| !t.is_finite() || *t < 0.0) {
            return Err(GraphError::BadDuration(graph.stage(i)));
        }
        Ok(())
    }
}

/// Per-stage durations for split point `split` and parallel batch number
/// `batches`: layer sums on each side of the split, divided by `batches`;
/// transfers are the split layer's output volume over the link bandwidth.
pub fn stage_times(
    split: usize,
    batches: usize,
    profiles: &LayerProfiles,
    net: &NetworkProfile,
) -> Result<StageTimes, GraphError> {
    let q = profiles.len();
    if split == 0 || split > q {
        return Err(GraphError::SplitOutOfRange {
            point: split,
            layers: q,
        });
    }
    if batches == 0 {
        return Err(GraphError::ZeroBatches);
    }
    if !(net.uplink_mbps > 0.0 && net.downlink_mbps > 0.0) {
        return Err(GraphError::Bandwidth);
    }
    let n = batches as f64;
    let sums = profiles.split_sums(split);
    let cut = &profiles.layers()[split - 1];
    Ok(StageTimes::uniform(
        batches,
        [
            sums.device_forward / n,
            cut.forward_volume_mb / (net.uplink_mbps * n),
            sums.server_forward / n,
            sums.server_backward / n,
            cut.backward_volume_mb / (net.downlink_mbps * n),
            sums.device_backward / n,
        ],
    ))
}

/// Completion time of every stage, indexed densely, assuming each stage
/// starts the instant its last predecessor finishes.
pub fn finish_times(graph: &StageGraph, times: &StageTimes) -> Result<Vec<f64>, GraphError> {
    times.check(graph)?;
    let t = times.dense();
    let mut finish = vec![0.0; graph.len()];
    for &i in graph.topological_order() {
        let ready = graph
            .prev_indices(i)
            .iter()
            .map(|&j| finish[j])
            .fold(0.0, f64::max);
        finish[i] = ready + t[i];
    }
    Ok(finish)
}

/// Iteration makespan: the finish time of the final device backward stage.
pub fn estimate_makespan(graph: &StageGraph, times: &StageTimes) -> Result<f64, GraphError> {
    let finish = finish_times(graph, times)?;
    let sink = graph.index_of(graph.sink()).expect("sink belongs to graph");
    Ok(finish[sink])
}

/// One row of a Gantt-ready schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleEntry {
    pub stage: Stage,
    pub resource: Resource,
    pub start: f64,
    pub end: f64,
}

/// Earliest-start schedule implied by the estimator, ordered by start time
/// then stage.
pub fn earliest_schedule(
    graph: &StageGraph,
    times: &StageTimes,
) -> Result<Vec<ScheduleEntry>, GraphError> {
    let finish = finish_times(graph, times)?;
    let t = times.dense();
    let mut rows: Vec<ScheduleEntry> = (0..graph.len())
        .map(|i| {
            let stage = graph.stage(i);
            ScheduleEntry {
                stage,
                resource: stage.kind.resource(stage.device),
                start: finish[i] - t[i],
                end: finish[i],
            }
        })
        .collect();
    rows.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.stage.cmp(&b.stage)));
    Ok(rows)
}

/// Writes a schedule as `stage,batch,device,lane,start_s,end_s` CSV.
pub fn schedule_csv(rows: &[ScheduleEntry]) -> String {
    let mut out = String::from("stage,batch,device,lane,start_s,end_s\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:?},{:?}\n",
            r.stage.kind.symbol(),
            r.stage.batch,
            r.stage.device,
            r.resource,
            r.start,
            r.end
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use StageKind::*;

    fn st(kind: StageKind, n: usize) -> Stage {
        Stage::new(kind, n, 0)
    }

    #[test]
    fn single_batch_is_a_chain() {
        let g = build_iteration_graph(1, 0).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.edge_count(), 5);
        for pair in StageKind::ALL.windows(2) {
            assert_eq!(g.prev(st(pair[1], 1)), vec![st(pair[0], 1)]);
        }
        assert!(g.prev(g.source()).is_empty());
    }

    #[test]
    fn two_batches_boundary_rows() {
        let g = build_iteration_graph(2, 0).unwrap();
        let mut p = g.prev(st(DeviceBackward, 1));
        p.sort();
        assert_eq!(p, vec![st(DeviceForward, 2), st(Download, 1)]);
        let mut p = g.prev(st(ServerForward, 2));
        p.sort();
        assert_eq!(p, vec![st(Upload, 2), st(ServerBackward, 1)]);
        assert_eq!(g.edge_count(), 10 * 2 - 4);
    }

    #[test]
    fn zero_batches_rejected() {
        assert_eq!(build_iteration_graph(0, 0).unwrap_err(), GraphError::ZeroBatches);
    }

    #[test]
    fn chain_makespan_is_sum() {
        let g = build_iteration_graph(1, 0).unwrap();
        let t = StageTimes::uniform(1, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(estimate_makespan(&g, &t).unwrap(), 21.0);
        let zero = StageTimes::uniform(1, [0.0; 6]);
        assert_eq!(estimate_makespan(&g, &zero).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_times_rejected() {
        let g = build_iteration_graph(3, 0).unwrap();
        let t = StageTimes::uniform(2, [1.0; 6]);
        assert!(matches!(
            estimate_makespan(&g, &t),
            Err(GraphError::MissingTimes { .. })
        ));
        let mut bad = StageTimes::uniform(3, [1.0; 6]);
        bad.set(Upload, 2, -1.0);
        assert!(matches!(
            estimate_makespan(&g, &bad),
            Err(GraphError::BadDuration(_))
        ));
    }

    #[test]
    fn schedule_csv_has_header_and_rows() {
        let g = build_iteration_graph(2, 0).unwrap();
        let t = StageTimes::uniform(2, [1.0; 6]);
        let rows = earliest_schedule(&g, &t).unwrap();
        assert_eq!(rows.len(), 12);
        let csv = schedule_csv(&rows);
        assert!(csv.starts_with("stage,batch,device,lane,start_s,end_s\nfc,1,0,device0,0.0,1.0\n"));
    }
}
