use std::fmt::Write as _;

use crate::stage_graph::Resource;

use super::engine::Timeline;
use super::{ScheduleMode, TaskLabel};

/// One executed task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub label: TaskLabel,
    pub resource: Resource,
    pub start: f64,
    pub end: f64,
    pub megabits: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneUsage {
    pub resource: Resource,
    /// Length of the union of the lane's task intervals.
    pub busy: f64,
    pub idle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub mode: ScheduleMode,
    pub makespan: f64,
    pub server_busy: f64,
    pub server_idle: f64,
    pub device_busy: Vec<f64>,
    pub device_idle: Vec<f64>,
    /// Devices first, then the server, uplinks and downlinks.
    pub lanes: Vec<LaneUsage>,
    pub transmitted_mb: f64,
    pub avg_throughput_mbps: f64,
    /// Training iterations per device.
    pub iterations: Vec<usize>,
    /// Empty unless tracing was requested.
    pub trace: Vec<TraceRecord>,
}

impl RunMetrics {
    pub fn lane(&self, resource: Resource) -> Option<&LaneUsage> {
        self.lanes.iter().find(|l| l.resource == resource)
    }

    /// Trace records of one lane, ordered by start time.
    pub fn lane_trace(&self, resource: Resource) -> Vec<TraceRecord> {
        let mut v: Vec<TraceRecord> = self
            .trace
            .iter()
            .filter(|r| r.resource == resource)
            .copied()
            .collect();
        v.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.label.cmp(&b.label)));
        v
    }
}

fn union_length(intervals: &mut [(f64, f64)]) -> f64 {
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut total = 0.0;
    let mut current: Option<(f64, f64)> = None;
    for &(s, e) in intervals.iter() {
        match current {
            Some((cs, ce)) if s <= ce => current = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                current = Some((s, e));
            }
            None => current = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = current {
        total += ce - cs;
    }
    total
}

/// Sum of the gaps between `[0, makespan]` and the union of `intervals`.
fn gap_length(intervals: &mut [(f64, f64)], makespan: f64) -> f64 {
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut idle = 0.0;
    let mut reached = 0.0f64;
    for &(s, e) in intervals.iter() {
        if s > reached {
            idle += s - reached;
        }
        reached = reached.max(e);
    }
    idle + (makespan - reached).max(0.0)
}

pub(crate) struct Accumulator {
    resources: Vec<Resource>,
    busy: Vec<f64>,
    record: bool,
    trace: Vec<TraceRecord>,
    transmitted: f64,
    makespan: f64,
}

impl Accumulator {
    pub fn new(resources: Vec<Resource>, record: bool) -> Self {
        Self {
            busy: vec![0.0; resources.len()],
            resources,
            record,
            trace: Vec::new(),
            transmitted: 0.0,
            makespan: 0.0,
        }
    }

    fn slot(&self, r: Resource) -> usize {
        self.resources
            .iter()
            .position(|&x| x == r)
            .expect("resource registered")
    }

    /// Adds `repeats` back-to-back copies of `timeline`, the `i`-th shifted by
    /// `i * period` with its iteration numbers advanced by `i`.
    pub fn add_periodic(&mut self, timeline: &Timeline, period: f64, repeats: usize) {
        let mut per_lane: Vec<Vec<(f64, f64)>> = vec![Vec::new(); self.resources.len()];
        for (i, t) in timeline.tasks.iter().enumerate() {
            if t.hidden {
                continue;
            }
            per_lane[self.slot(t.resource)].push((timeline.start[i], timeline.finish[i]));
            self.transmitted += t.megabits * repeats as f64;
        }
        for (lane, intervals) in per_lane.iter_mut().enumerate() {
            self.busy[lane] += union_length(intervals) * repeats as f64;
        }
        if repeats > 0 {
            let last = timeline.finish.iter().copied().fold(0.0, f64::max);
            self.makespan = self.makespan.max(period * (repeats - 1) as f64 + last);
        }
        if self.record {
            for rep in 0..repeats {
                let offset = period * rep as f64;
                for (i, t) in timeline.tasks.iter().enumerate() {
                    if t.hidden {
                        continue;
                    }
                    let mut label = t.label;
                    label.iteration += rep;
                    self.trace.push(TraceRecord {
                        label,
                        resource: t.resource,
                        start: offset + timeline.start[i],
                        end: offset + timeline.finish[i],
                        megabits: t.megabits,
                    });
                }
            }
        }
    }

    pub fn add_timeline(&mut self, timeline: &Timeline) {
        self.add_periodic(timeline, 0.0, 1);
    }

    pub fn finish(self, mode: ScheduleMode, iterations: Vec<usize>) -> RunMetrics {
        let makespan = self.makespan;
        let mut lanes = Vec::with_capacity(self.resources.len());
        for (slot, &resource) in self.resources.iter().enumerate() {
            let busy = self.busy[slot];
            let idle = if self.record {
                let mut intervals: Vec<(f64, f64)> = self
                    .trace
                    .iter()
                    .filter(|r| r.resource == resource)
                    .map(|r| (r.start, r.end))
                    .collect();
                gap_length(&mut intervals, makespan)
            } else {
                makespan - busy
            };
            lanes.push(LaneUsage {
                resource,
                busy,
                idle,
            });
        }
        let pick = |f: fn(&Resource) -> bool| -> Vec<&LaneUsage> {
            lanes.iter().filter(|l| f(&l.resource)).collect()
        };
        let devices = pick(|r| matches!(r, Resource::DeviceCompute(_)));
        let device_busy = devices.iter().map(|l| l.busy).collect();
        let device_idle = devices.iter().map(|l| l.idle).collect();
        let server = pick(|r| matches!(r, Resource::ServerCompute))[0];
        let (server_busy, server_idle) = (server.busy, server.idle);
        let avg_throughput_mbps = if makespan > 0.0 {
            self.transmitted / makespan
        } else {
            0.0
        };
        let mut trace = self.trace;
        trace.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.label.cmp(&b.label)));
        RunMetrics {
            mode,
            makespan,
            server_busy,
            server_idle,
            device_busy,
            device_idle,
            lanes,
            transmitted_mb: self.transmitted,
            avg_throughput_mbps,
            iterations,
            trace,
        }
    }
}

/// Metrics of an externally produced trace. `resources` fixes the lane
/// order; every record must name one of them.
pub(crate) fn from_records(
    mode: ScheduleMode,
    resources: Vec<Resource>,
    records: Vec<TraceRecord>,
    iterations: Vec<usize>,
) -> RunMetrics {
    let mut acc = Accumulator::new(resources, true);
    let mut per_lane: Vec<Vec<(f64, f64)>> = vec![Vec::new(); acc.resources.len()];
    for r in &records {
        per_lane[acc.slot(r.resource)].push((r.start, r.end));
        acc.transmitted += r.megabits;
        acc.makespan = acc.makespan.max(r.end);
    }
    for (lane, intervals) in per_lane.iter_mut().enumerate() {
        acc.busy[lane] = union_length(intervals);
    }
    acc.trace = records;
    acc.finish(mode, iterations)
}

/// Event log as CSV: one `start` and one `finish` row per traced task,
/// ordered by time, finishes before starts, then task label.
pub fn event_log_csv(metrics: &RunMetrics) -> String {
    let mut events: Vec<(f64, u8, &TraceRecord)> = Vec::with_capacity(metrics.trace.len() * 2);
    for r in &metrics.trace {
        events.push((r.start, 1, r));
        events.push((r.end, 0, r));
    }
    events.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.label.cmp(&b.2.label))
    });
    let mut out = String::from("time_s,event,lane,device,iteration,batch,task\n");
    for (time, kind, r) in events {
        let _ = writeln!(
            out,
            "{:?},{},{},{},{},{},{}",
            time,
            if kind == 0 { "finish" } else { "start" },
            r.resource,
            r.label.device,
            r.label.iteration,
            r.label.batch,
            r.label.kind.name()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn union_merges_overlaps() {
        let mut v = vec![(0.0, 2.0), (1.0, 3.0), (5.0, 6.0)];
        assert_eq!(union_length(&mut v), 4.0);
        let mut v = vec![(1.0, 2.0), (4.0, 5.0)];
        assert_eq!(gap_length(&mut v, 6.0), 4.0);
        assert_eq!(gap_length(&mut [], 3.0), 3.0);
    }
}
