mod common;

use common::{load_space, stub_target, teardown_count};
use microtune_core::exec::run_external;
use microtune_core::protocol::MeasurementProtocol;
use microtune_core::space::{Configuration, Value};
use microtune_core::trial::{reason, TrialStatus};

fn heap(bytes: i64) -> Configuration {
    [("heap", Value::Int(bytes))].into_iter().collect()
}

const MIB: i64 = 1 << 20;

fn evaluate(name: &str, config: &Configuration, timeout_s: f64) -> (TrialStatus, Option<f64>, usize) {
    let scratch = tempfile::tempdir().unwrap();
    let target = stub_target(name, scratch.path());
    let protocol = MeasurementProtocol::new(50, 5, timeout_s).unwrap();
    let eval = run_external(&load_space("stub-heap.json"), config, &target, &protocol).unwrap();
    (eval.status, eval.stats.map(|s| s.mean), teardown_count(scratch.path()))
}

#[test]
fn healthy_stub_is_complete() {
    let (status, mean, teardowns) = evaluate("healthy", &heap(256 * MIB), 30.0);
    assert_eq!(status, TrialStatus::Complete);
    assert!((mean.unwrap() - 0.81).abs() < 1e-12);
    assert_eq!(teardowns, 1);
}

#[test]
fn failure_fixtures_report_their_reason() {
    let cases = [
        ("launch-failed", 256 * MIB, 30.0, reason::LAUNCH_FAILED),
        ("readiness-timeout", 256 * MIB, 30.0, reason::READINESS_TIMEOUT),
        ("workload-failed", 16 * MIB, 30.0, reason::WORKLOAD_FAILED),
        ("traces-missing", 256 * MIB, 30.0, reason::TRACES_MISSING),
        ("timeout", 256 * MIB, 1.0, reason::TIMEOUT),
    ];
    for (name, bytes, timeout, expected) in cases {
        let (status, _, teardowns) = evaluate(name, &heap(bytes), timeout);
        assert_eq!(status.reason(), Some(expected), "{name}: {status:?}");
        assert_eq!(teardowns, 1, "{name}: teardown must run exactly once");
    }
}

#[test]
fn workload_stub_only_fails_on_tiny_heap() {
    let (status, _, _) = evaluate("workload-failed", &heap(512 * MIB), 30.0);
    assert!(status.is_complete());
}
