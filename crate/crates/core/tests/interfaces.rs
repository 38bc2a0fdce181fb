//! External-interface checks: file formats, serialization shapes, and the
//! determinism contract across module boundaries.

use belucb_core::core_math::AgentGraph;
use belucb_core::disbe::{run_disbe, RunConfig};
use belucb_core::environment::{build_instance, DecisionSupport, GroundTruth};
use belucb_core::harness::{emit_outputs, run_experiment, Algorithm, ExperimentConfig};

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("belucb-if-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn graph_edge_list_file_round_trip() {
    let dir = scratch("graph");
    let g = AgentGraph::star(5).unwrap();
    let path = dir.join("star.txt");
    std::fs::write(&path, g.to_edge_list_text()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let parsed = AgentGraph::parse_edge_list(&text).unwrap();
    assert_eq!(parsed.n(), 5);
    assert_eq!(parsed.edges(), g.edges());
    assert_eq!(parsed.delta_max(), 4);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn support_and_ground_truth_serialize_together() {
    let (support, gt) = build_instance(5, 3, 4, 6, 0.1, true).unwrap();
    let bundle = serde_json::json!({ "support": support, "ground_truth": gt });
    let text = serde_json::to_string_pretty(&bundle).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(value["support"]["d"], 3);
    assert_eq!(value["support"]["K"], 4);
    let support2: DecisionSupport = serde_json::from_value(value["support"].clone()).unwrap();
    let gt2: GroundTruth = serde_json::from_value(value["ground_truth"].clone()).unwrap();
    assert_eq!(support2.sets, support.sets);
    assert_eq!(gt2.theta_star, gt.theta_star);
}

#[test]
fn per_round_trace_format() {
    let (support, env) = build_instance(6, 2, 3, 4, 0.1, true).unwrap();
    let cfg = RunConfig::new(2, 2, 3, 200, 6);
    let out = run_disbe(&env, &support, &cfg).unwrap();
    let csv = out.per_round_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,agent,inst_regret,cum_regret_total,comm_scalars,comm_bits"
    );
    // one row per (round, agent)
    assert_eq!(csv.lines().count(), 1 + 200 * 2);
    // cum_regret_total column is nondecreasing and the comm column ends at
    // the ledger total
    let mut last_cum = 0.0f64;
    let mut last_scalars = 0u64;
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let cum: f64 = f[3].parse().unwrap();
        assert!(cum >= last_cum - 1e-12);
        last_cum = cum;
        last_scalars = f[4].parse().unwrap();
    }
    assert_eq!(last_scalars, out.comm.scalars_sent());
    assert!((last_cum - out.regret.cumulative_total()).abs() < 1e-9);

    let summary = out.summary_json();
    assert!(summary["communication"]["scalars_sent"].is_u64());
    assert!(summary["regret"]["total"].is_number());
}

#[test]
fn sweep_dump_writes_trace_files() {
    let dir = scratch("dump");
    let text = r#"{
        "algorithm": "disbe",
        "sweep": {"n_agents": [2], "d": [2], "horizon": [150]},
        "seeds": [3],
        "k_arms": 3,
        "support_size": 5,
        "downsample_checkpoints": 10,
        "dump_per_round": true
    }"#;
    let cfg = ExperimentConfig::from_json(text).unwrap();
    assert_eq!(cfg.algorithm, Algorithm::Disbe);
    let results = run_experiment(&cfg).unwrap();
    let emitted = emit_outputs(&results, &dir).unwrap();
    assert!(emitted.runs_csv.exists());
    let trace = dir.join("trace_disbe_n2_d2_t150_seed3.csv");
    assert!(trace.exists(), "per-round trace file missing");
    let run_summary = dir.join("run_disbe_n2_d2_t150_seed3.json");
    assert!(run_summary.exists());
    let lines = std::fs::read_to_string(&trace).unwrap().lines().count();
    assert_eq!(lines, 1 + 150 * 2);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn parallel_and_serial_sweeps_are_bit_identical() {
    let text = r#"{
        "algorithm": "decbe",
        "sweep": {"n_agents": [4], "d": [2], "horizon": [400]},
        "seeds": [1, 2, 3, 4],
        "k_arms": 3,
        "support_size": 5,
        "graph": {"family": "cycle"},
        "s_rounds": 2,
        "downsample_checkpoints": 20
    }"#;
    let cfg = ExperimentConfig::from_json(text).unwrap();
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_experiment(&cfg))
        .unwrap();
    let parallel = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| run_experiment(&cfg))
        .unwrap();
    assert_eq!(
        belucb_core::harness::runs_csv_text(&serial),
        belucb_core::harness::runs_csv_text(&parallel)
    );
}
