//! Event-driven execution of a task DAG over capacity-limited lanes.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::stage_graph::Resource;

use super::{SimError, TaskLabel};

/// How a lane admits concurrent tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LanePolicy {
    /// One task at a time, ready tasks served in (ready time, label) order.
    Exclusive,
    /// One task at a time in a fixed global sequence (see `sequence_key`).
    Ordered,
    /// All resident tasks progress at rate `1 / resident`.
    ProcessorSharing,
    /// Every ready task starts immediately.
    Unlimited,
}

#[derive(Debug, Clone)]
pub(crate) struct Task {
    pub label: TaskLabel,
    pub resource: Resource,
    pub lane: usize,
    pub duration: f64,
    pub megabits: f64,
    /// Hidden tasks occupy no resource and are left out of traces.
    pub hidden: bool,
    pub preds: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    label: TaskLabel,
    task: usize,
    version: u32,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then_with(|| self.label.cmp(&other.label))
            .then_with(|| self.task.cmp(&other.task))
    }
}

/// Ready-queue entry for exclusive lanes.
#[derive(Debug, Clone, Copy)]
struct Ready {
    since: f64,
    label: TaskLabel,
    task: usize,
}

impl PartialEq for Ready {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ready {}
impl PartialOrd for Ready {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ready {
    fn cmp(&self, other: &Self) -> Ordering {
        self.since
            .total_cmp(&other.since)
            .then_with(|| self.label.cmp(&other.label))
            .then_with(|| self.task.cmp(&other.task))
    }
}

struct Lane {
    policy: LanePolicy,
    running: Option<usize>,
    queue: BinaryHeap<Reverse<Ready>>,
    // Ordered lanes
    sequence: Vec<usize>,
    position: usize,
    // Processor-sharing lanes: (task, remaining work)
    resident: Vec<(usize, f64)>,
    last_update: f64,
    // Unlimited lanes and newly ready processor-sharing tasks
    pending: Vec<usize>,
}

impl Lane {
    fn new(policy: LanePolicy) -> Self {
        Self {
            policy,
            running: None,
            queue: BinaryHeap::new(),
            sequence: Vec::new(),
            position: 0,
            resident: Vec::new(),
            last_update: 0.0,
            pending: Vec::new(),
        }
    }
}

/// Start and finish time of every task.
pub(crate) struct Timeline {
    pub tasks: Vec<Task>,
    pub start: Vec<f64>,
    pub finish: Vec<f64>,
}

pub(crate) struct Engine {
    tasks: Vec<Task>,
    succs: Vec<Vec<usize>>,
    waiting: Vec<usize>,
    ready_flag: Vec<bool>,
    version: Vec<u32>,
    lanes: Vec<Lane>,
    events: BinaryHeap<Reverse<Event>>,
    now: f64,
    start: Vec<f64>,
    finish: Vec<f64>,
    done: usize,
}

impl Engine {
    /// `lanes[i]` is the policy of lane `i`; each task names its lane. For
    /// ordered lanes the service sequence is the tasks of that lane sorted by
    /// `sequence_key`.
    pub fn new(
        tasks: Vec<Task>,
        lanes: &[LanePolicy],
        sequence_key: impl Fn(&TaskLabel) -> (usize, usize, usize, usize),
    ) -> Self {
        let n = tasks.len();
        let mut succs = vec![Vec::new(); n];
        for (i, t) in tasks.iter().enumerate() {
            for &p in &t.preds {
                succs[p].push(i);
            }
        }
        let mut lane_states: Vec<Lane> = lanes.iter().map(|&p| Lane::new(p)).collect();
        for (i, t) in tasks.iter().enumerate() {
            if lane_states[t.lane].policy == LanePolicy::Ordered {
                lane_states[t.lane].sequence.push(i);
            }
        }
        for lane in lane_states.iter_mut() {
            lane.sequence
                .sort_by_key(|&i| (sequence_key(&tasks[i].label), i));
        }
        Self {
            waiting: tasks.iter().map(|t| t.preds.len()).collect(),
            ready_flag: vec![false; n],
            version: vec![0; n],
            succs,
            lanes: lane_states,
            events: BinaryHeap::new(),
            now: 0.0,
            start: vec![f64::NAN; n],
            finish: vec![f64::NAN; n],
            done: 0,
            tasks,
        }
    }

    pub fn run(mut self) -> Result<Timeline, SimError> {
        for i in 0..self.tasks.len() {
            if self.waiting[i] == 0 {
                self.make_ready(i);
            }
        }
        self.dispatch();
        while let Some(Reverse(ev)) = self.events.pop() {
            if ev.version != self.version[ev.task] {
                continue;
            }
            self.now = ev.time;
            self.complete(ev.task);
            while let Some(Reverse(next)) = self.events.peek() {
                if next.time != self.now {
                    break;
                }
                let next = *next;
                self.events.pop();
                if next.version == self.version[next.task] {
                    self.complete(next.task);
                }
            }
            self.dispatch();
        }
        if self.done != self.tasks.len() {
            return Err(SimError::Deadlock {
                finished: self.done,
                total: self.tasks.len(),
            });
        }
        Ok(Timeline {
            tasks: self.tasks,
            start: self.start,
            finish: self.finish,
        })
    }

    fn make_ready(&mut self, i: usize) {
        self.ready_flag[i] = true;
        let lane = &mut self.lanes[self.tasks[i].lane];
        match lane.policy {
            LanePolicy::Exclusive => lane.queue.push(Reverse(Ready {
                since: self.now,
                label: self.tasks[i].label,
                task: i,
            })),
            LanePolicy::Ordered => {}
            LanePolicy::ProcessorSharing | LanePolicy::Unlimited => lane.pending.push(i),
        }
    }

    fn schedule_finish(&mut self, task: usize, time: f64) {
        self.version[task] += 1;
        self.events.push(Reverse(Event {
            time,
            label: self.tasks[task].label,
            task,
            version: self.version[task],
        }));
    }

    fn complete(&mut self, i: usize) {
        self.finish[i] = self.now;
        self.done += 1;
        let lane_idx = self.tasks[i].lane;
        match self.lanes[lane_idx].policy {
            LanePolicy::Exclusive => self.lanes[lane_idx].running = None,
            LanePolicy::Ordered => {
                let lane = &mut self.lanes[lane_idx];
                lane.running = None;
                lane.position += 1;
            }
            LanePolicy::ProcessorSharing => {
                self.advance_shared(lane_idx);
                self.lanes[lane_idx].resident.retain(|&(t, _)| t != i);
                self.reschedule_shared(lane_idx);
            }
            LanePolicy::Unlimited => {}
        }
        for k in 0..self.succs[i].len() {
            let s = self.succs[i][k];
            self.waiting[s] -= 1;
            if self.waiting[s] == 0 {
                self.make_ready(s);
            }
        }
    }

    fn advance_shared(&mut self, lane_idx: usize) {
        let now = self.now;
        let lane = &mut self.lanes[lane_idx];
        let m = lane.resident.len() as f64;
        if m > 0.0 {
            let progress = (now - lane.last_update) / m;
            for (_, remaining) in lane.resident.iter_mut() {
                *remaining = (*remaining - progress).max(0.0);
            }
        }
        lane.last_update = now;
    }

    fn reschedule_shared(&mut self, lane_idx: usize) {
        let m = self.lanes[lane_idx].resident.len() as f64;
        let plan: Vec<(usize, f64)> = self.lanes[lane_idx]
            .resident
            .iter()
            .map(|&(t, rem)| (t, self.now + rem * m))
            .collect();
        for (t, at) in plan {
            self.schedule_finish(t, at);
        }
    }

    fn begin(&mut self, i: usize) {
        self.start[i] = self.now;
        let at = self.now + self.tasks[i].duration;
        self.schedule_finish(i, at);
    }

    fn dispatch(&mut self) {
        for lane_idx in 0..self.lanes.len() {
            match self.lanes[lane_idx].policy {
                LanePolicy::Exclusive => {
                    if self.lanes[lane_idx].running.is_none() {
                        if let Some(Reverse(r)) = self.lanes[lane_idx].queue.pop() {
                            self.lanes[lane_idx].running = Some(r.task);
                            self.begin(r.task);
                        }
                    }
                }
                LanePolicy::Ordered => {
                    let lane = &self.lanes[lane_idx];
                    if lane.running.is_none() {
                        if let Some(&next) = lane.sequence.get(lane.position) {
                            if self.ready_flag[next] {
                                self.lanes[lane_idx].running = Some(next);
                                self.begin(next);
                            }
                        }
                    }
                }
                LanePolicy::Unlimited => {
                    let pending = std::mem::take(&mut self.lanes[lane_idx].pending);
                    for i in pending {
                        self.begin(i);
                    }
                }
                LanePolicy::ProcessorSharing => {
                    if self.lanes[lane_idx].pending.is_empty() {
                        continue;
                    }
                    self.advance_shared(lane_idx);
                    let pending = std::mem::take(&mut self.lanes[lane_idx].pending);
                    for i in pending {
                        self.start[i] = self.now;
                        let d = self.tasks[i].duration;
                        self.lanes[lane_idx].resident.push((i, d));
                    }
                    self.reschedule_shared(lane_idx);
                }
            }
        }
    }
}
