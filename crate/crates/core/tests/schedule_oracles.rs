use std::collections::HashMap;

use pipelearn::cost_model::synthetic::RandomFamily;
use pipelearn::cost_model::{epoch_time, EpochShape, NetworkProfile};
use pipelearn::optimizer::{select_params, shortlist};
use pipelearn::sim::{exhaustive_search, simulate, DeviceSetup, ScheduleMode, SimConfig};
use pipelearn::optimizer::PipelineParams;
use pipelearn::stage_graph::{build_iteration_graph, estimate_makespan, stage_times, Stage, StageKind, StageTimes};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn all_stages(n: usize) -> Vec<Stage> {
    (1..=n)
        .flat_map(|b| StageKind::ALL.into_iter().map(move |k| Stage::new(k, b, 0)))
        .collect()
}

#[test]
fn graphs_admit_a_topological_order() {
    for n in 1..=40 {
        let g = build_iteration_graph(n, 0).unwrap();
        let stages = all_stages(n);
        let mut indegree: HashMap<Stage, usize> = stages.iter().map(|&s| (s, g.prev(s).len())).collect();
        let mut ready: Vec<Stage> = stages.iter().copied().filter(|s| indegree[s] == 0).collect();
        assert_eq!(ready, vec![Stage::new(StageKind::DeviceForward, 1, 0)]);
        let mut visited = 0;
        while let Some(s) = ready.pop() {
            visited += 1;
            for t in g.next(s) {
                let d = indegree.get_mut(&t).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(t);
                }
            }
        }
        assert_eq!(visited, 6 * n, "cycle for N = {n}");
        let sinks: Vec<Stage> = stages.iter().copied().filter(|&s| g.next(s).is_empty()).collect();
        assert_eq!(sinks, vec![Stage::new(StageKind::DeviceBackward, n, 0)]);
    }
}

/// Longest weighted path ending at `s`, by enumerating every path.
fn longest_path_to(g: &pipelearn::stage_graph::StageGraph, times: &StageTimes, s: Stage) -> f64 {
    let own = times.get(s.kind, s.batch);
    g.prev(s)
        .into_iter()
        .map(|p| longest_path_to(g, times, p))
        .fold(0.0, f64::max)
        + own
}

#[test]
fn makespan_is_the_longest_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let n = rng.gen_range(1..=4);
        let times = StageTimes::from_fn(n, |_, _| rng.gen_range(0.0..5.0));
        let g = build_iteration_graph(n, 0).unwrap();
        let brute = longest_path_to(&g, &times, g.sink());
        let dp = estimate_makespan(&g, &times).unwrap();
        assert!((brute - dp).abs() < 1e-12, "{brute} vs {dp}");
    }
    let zero = StageTimes::from_fn(3, |_, _| 0.0);
    assert_eq!(estimate_makespan(&build_iteration_graph(3, 0).unwrap(), &zero).unwrap(), 0.0);
}

#[test]
fn upload_of_ten_megabits_over_4g_takes_a_second() {
    let mut p = RandomFamily::mixed().sample(1);
    let q = p.len();
    let mut layers = p.layers().to_vec();
    layers[q - 1].forward_volume_mb = 10.0;
    p = pipelearn::cost_model::LayerProfiles::new("t", layers).unwrap();
    let net = NetworkProfile::preset("4g").unwrap();
    let t = stage_times(q, 1, &p, &net).unwrap();
    assert!((t.get(StageKind::Upload, 1) - 1.0).abs() < 1e-15);
    assert_eq!(t.get(StageKind::ServerForward, 1), 0.0);
    assert_eq!(t.get(StageKind::ServerBackward, 1), 0.0);
    let t2 = stage_times(1, 2, &p, &net).unwrap();
    let t1 = stage_times(1, 1, &p, &net).unwrap();
    for k in StageKind::ALL {
        assert!((2.0 * t2.get(k, 1) - t1.get(k, 1)).abs() < 1e-15);
    }
}

/// Earliest-start schedule computed directly from the predecessor table.
fn list_schedule(g: &pipelearn::stage_graph::StageGraph, times: &StageTimes) -> f64 {
    let n = g.batches();
    let mut finish: HashMap<Stage, f64> = HashMap::new();
    let mut pending = all_stages(n);
    while !pending.is_empty() {
        pending.retain(|&s| {
            let prev = g.prev(s);
            if prev.iter().all(|p| finish.contains_key(p)) {
                let ready = prev.iter().map(|p| finish[p]).fold(0.0, f64::max);
                finish.insert(s, ready + times.get(s.kind, s.batch));
                false
            } else {
                true
            }
        });
    }
    finish[&g.sink()]
}

#[test]
fn single_device_simulation_matches_list_schedule() {
    let family = RandomFamily::mixed();
    let cfg = SimConfig {
        include_aggregation: false,
        unlimited_lanes: true,
        ..SimConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..1000u64 {
        let p = family.sample(seed);
        let split = rng.gen_range(1..=p.len());
        let n = rng.gen_range(1..=20);
        let net = NetworkProfile::presets()[seed as usize % 3].clone();
        let dev = DeviceSetup {
            params: PipelineParams::new(split, n),
            profiles: p.clone(),
            net: net.clone(),
            shape: EpochShape::new(100, 100).unwrap(),
        };
        let sim = simulate(ScheduleMode::PipeLearnParallelServer, &[dev], &cfg).unwrap();
        let g = build_iteration_graph(n, 0).unwrap();
        let oracle = list_schedule(&g, &stage_times(split, n, &p, &net).unwrap());
        assert!((sim.makespan - oracle).abs() < 1e-9, "seed {seed}: {} vs {oracle}", sim.makespan);
    }
}

#[test]
fn selection_is_the_best_shortlisted_estimate() {
    let shape = EpochShape::new(10_000, 100).unwrap();
    for seed in 0..100u64 {
        let p = RandomFamily::mixed().sample(seed);
        for net in NetworkProfile::presets() {
            let sel = select_params(&p, &net, &shape).unwrap();
            let best = shortlist(&p, &net, 100)
                .unwrap()
                .into_iter()
                .map(|c| epoch_time(c.split, c.batches, &p, &net, &shape, ScheduleMode::PipeLearnParallelServer).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(sel.estimated_time, best);
            let one = epoch_time(sel.params.split, 1, &p, &net, &shape, ScheduleMode::PipeLearnParallelServer).unwrap();
            assert!(one >= sel.estimated_time);
        }
    }
}

#[test]
fn weak_devices_split_after_the_first_layer() {
    let shape = EpochShape::new(10_000, 100).unwrap();
    for seed in 0..100u64 {
        let p = RandomFamily::weak_device().sample(seed);
        for net in NetworkProfile::presets() {
            assert_eq!(select_params(&p, &net, &shape).unwrap().params.split, 1, "seed {seed} {}", net.name);
        }
    }
}

#[test]
fn oracle_never_loses_to_the_selection() {
    let shape = EpochShape::new(10_000, 100).unwrap();
    let net = NetworkProfile::preset("4g").unwrap();
    let cfg = SimConfig::default();
    for seed in 0..100u64 {
        let p = RandomFamily::mixed().sample(seed);
        let sel = select_params(&p, &net, &shape).unwrap();
        let oracle = exhaustive_search(&p, &net, &shape, ScheduleMode::PipeLearnParallelServer, 1..=p.len(), 1..=100, &cfg).unwrap();
        let selected = oracle.table.iter().find(|(c, _)| *c == sel.params).unwrap().1;
        assert!(oracle.best_time <= selected);
        assert_eq!(oracle.table.len(), p.len() * 100);
    }
}
