#![allow(dead_code)]

use std::path::PathBuf;

use microtune_core::exec::TargetSpec;
use microtune_core::space::{parse_space, SearchSpace};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn load_space(name: &str) -> SearchSpace {
    let text = std::fs::read_to_string(data_dir().join("spaces").join(name)).unwrap();
    parse_space(&text).unwrap()
}

/// Loads a bundled stub target, redirecting its trace file and teardown
/// marker into `scratch` so tests never write into the source tree.
pub fn stub_target(name: &str, scratch: &std::path::Path) -> TargetSpec {
    let mut target = TargetSpec::load(&data_dir().join("targets").join(format!("{name}.json"))).unwrap();
    target.trace_source = scratch.join("traces.jsonl");
    target
        .environment
        .insert("TEARDOWN_MARKER".into(), scratch.join("teardown.log").to_string_lossy().into_owned());
    target
}

pub fn teardown_count(scratch: &std::path::Path) -> usize {
    std::fs::read_to_string(scratch.join("teardown.log"))
        .map(|s| s.lines().count())
        .unwrap_or(0)
}
