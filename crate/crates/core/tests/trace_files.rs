//! Trace file stability and replay. Set `LTRI_BLESS=1` to rewrite the
//! golden file after an intentional generator or format change.

use std::path::PathBuf;

use ltri_core::engine::{run_stream, EngineConfig};
use ltri_core::context_memory::StreamConfig;
use ltri_core::synth::{default_signal_heads, NeedleSpec, SyntheticTrace, TraceSpec};
use ltri_core::trace::{write_trace, TraceReader, TraceSource};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden.ltri")
}

fn small_spec() -> TraceSpec {
    TraceSpec {
        seed: 11,
        layers: 2,
        heads: 1,
        d: 4,
        prefill_tokens: 320,
        decode_steps: 3,
        block_size: 16,
        l_init: 8,
        window_hint: 64,
        band: 8,
        span_min: 4,
        span_max: 7,
        question_tokens: 8,
        needle: Some(NeedleSpec {
            length: 6,
            ..NeedleSpec::default()
        }),
        signal_heads: default_signal_heads(2, 1),
        ..TraceSpec::desk(11)
    }
}

fn small_engine(spec: &TraceSpec) -> EngineConfig {
    EngineConfig {
        stream: StreamConfig {
            l_init: 8,
            l_win: 64,
            block_size: 16,
            chunk_size: 32,
            prefill_last_chunk: 8,
            ..StreamConfig::default()
        },
        top_k: 4,
        retrieval_heads: spec.signal_heads.clone(),
        ..EngineConfig::default()
    }
}

#[test]
fn generator_output_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let fresh = dir.path().join("fresh.ltri");
    write_trace(&mut SyntheticTrace::new(small_spec()).unwrap(), &fresh, 100).unwrap();
    let bytes = std::fs::read(&fresh).unwrap();
    if std::env::var_os("LTRI_BLESS").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), &bytes).unwrap();
    }
    let golden = std::fs::read(golden_path()).expect("golden trace missing; run with LTRI_BLESS=1");
    assert_eq!(bytes.len(), golden.len());
    assert!(bytes == golden, "generated trace differs from the golden file");
}

#[test]
fn reader_replays_generator_chunk_for_chunk() {
    let mut reader = TraceReader::open(&golden_path()).unwrap();
    let mut synth = SyntheticTrace::new(small_spec()).unwrap();
    assert_eq!(reader.header(), synth.header());
    assert_eq!(reader.needles(), synth.needles());
    // Uneven request sizes cross section boundaries in both directions.
    let sizes = [1usize, 7, 100, 33, 64, 1, 200];
    let mut k = 0;
    loop {
        let n = sizes[k % sizes.len()];
        k += 1;
        let (a, b) = (reader.next_chunk(n).unwrap(), synth.next_chunk(n).unwrap());
        assert_eq!(a, b);
        if a.is_none() {
            break;
        }
    }
}

#[test]
fn engine_reports_match_between_file_and_generator() {
    let spec = small_spec();
    let cfg = small_engine(&spec);
    let from_file = run_stream(&mut TraceReader::open(&golden_path()).unwrap(), &cfg).unwrap();
    let from_synth = run_stream(&mut SyntheticTrace::new(spec).unwrap(), &cfg).unwrap();
    assert!(from_file.summary.blocks > 0);
    assert_eq!(
        serde_json::to_string(&from_file.reports).unwrap(),
        serde_json::to_string(&from_synth.reports).unwrap()
    );
    assert_eq!(
        serde_json::to_string(&from_file.summary).unwrap(),
        serde_json::to_string(&from_synth.summary).unwrap()
    );
}
