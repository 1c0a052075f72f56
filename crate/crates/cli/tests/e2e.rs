//! End-to-end checks: the `skipspec` binary through its full pipeline
//! (synth → search → run-stream → report), its exit-code contract, and
//! library-level agreement between the serving modes.

use std::path::Path;
use std::process::{Command, Output};

use skipspec_cli::{run_stream, run_vanilla, Mode, StreamRunConfig};
use skipspec_core::engine::DraftConfig;
use skipspec_core::model::corpus::synth_corpus;
use skipspec_core::model::spec::default_planted_spec;
use skipspec_core::model::{build_model, greedy_decode};
use skipspec_core::router::{fit_router, FitConfig};
use skipspec_core::search::{BOConfig, ObjectiveMode};
use skipspec_core::stream::{generate_stream, InitialDomain, StreamConfig};

fn skipspec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skipspec"))
        .args(args)
        .output()
        .expect("binary launches")
}

fn expect_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("temp paths are valid UTF-8")
}

#[test]
fn binary_pipeline_produces_consistent_artifacts() {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec_path = dir.path().join("model.json");
    let corpora_dir = dir.path().join("corpora");
    let fit_dir = dir.path().join("fit");
    let runs_dir = dir.path().join("runs");

    let synth = skipspec(&[
        "synth",
        "--model-spec",
        path_str(&spec_path),
        "--corpora-dir",
        path_str(&corpora_dir),
        "--num-domains",
        "3",
        "--per-domain",
        "8",
        "--prompt-len",
        "6",
        "--seed",
        "5",
    ]);
    expect_success(&synth, "synth");
    for d in 0..3 {
        assert!(corpora_dir.join(format!("domain-{d}.jsonl")).is_file());
    }

    let search = skipspec(&[
        "search",
        "--model-spec",
        path_str(&spec_path),
        "--corpora-dir",
        path_str(&corpora_dir),
        "--out-dir",
        path_str(&fit_dir),
        "--iterations",
        "60",
        "--k-anchors",
        "4",
        "--bo-samples",
        "2",
        "--gamma",
        "4",
        "--draft-mode",
        "fixed",
        "--seed",
        "5",
    ]);
    expect_success(&search, "search");
    assert!(fit_dir.join("registry.json").is_file());
    assert!(fit_dir.join("anchors.jsonl").is_file());
    assert!(fit_dir.join("fit-report.json").is_file());
    for d in 0..3 {
        assert!(fit_dir.join(format!("trace-domain-{d}.csv")).is_file());
    }

    for mode in ["vanilla", "ssd-fixed", "ssd-mixed", "knn-ssd"] {
        let run = skipspec(&[
            "run-stream",
            "--model-spec",
            path_str(&spec_path),
            "--corpora-dir",
            path_str(&corpora_dir),
            "--registry",
            path_str(&fit_dir),
            "--out-dir",
            path_str(&runs_dir),
            "--mode",
            mode,
            "--mix-ratio",
            "0.5",
            "--stream-len",
            "12",
            "--max-new",
            "8",
            "--gamma",
            "4",
            "--draft-mode",
            "fixed",
            "--iterations",
            "40",
            "--seed",
            "5",
        ]);
        expect_success(&run, &format!("run-stream {mode}"));
        let tag = format!("{mode}-r0.50-seed5");
        assert!(runs_dir.join(format!("records-{tag}.jsonl")).is_file());
        assert!(runs_dir.join(format!("vanilla-{tag}.jsonl")).is_file());
        assert!(runs_dir.join(format!("report-{tag}.json")).is_file());
        assert!(runs_dir.join(format!("run-{tag}.json")).is_file());
    }

    let summary_a = dir.path().join("summary-a");
    let summary_b = dir.path().join("summary-b");
    for out_dir in [&summary_a, &summary_b] {
        let report = skipspec(&[
            "report",
            "--stats-dir",
            path_str(&runs_dir),
            "--out-dir",
            path_str(out_dir),
            "--model-spec",
            path_str(&spec_path),
            "--corpora-dir",
            path_str(&corpora_dir),
        ]);
        expect_success(&report, "report");
    }
    let csv = std::fs::read_to_string(summary_a.join("summary.csv")).expect("summary.csv");
    for mode in ["vanilla", "ssd-fixed", "ssd-mixed", "knn-ssd"] {
        assert!(csv.contains(mode), "summary.csv misses mode {mode}:\n{csv}");
    }
    assert!(summary_a.join("summary.json").is_file());
    assert!(summary_a.join("projection.csv").is_file());

    // Reporting is a pure function of the recorded runs.
    let csv_again = std::fs::read_to_string(summary_b.join("summary.csv")).expect("second csv");
    assert_eq!(csv, csv_again, "report is not idempotent");
}

#[test]
fn binary_maps_operational_failures_to_exit_2() {
    let dir = tempfile::tempdir().expect("tempdir");
    let missing = dir.path().join("nope");

    // run-stream against a registry directory that was never created.
    let spec_path = dir.path().join("model.json");
    let corpora_dir = dir.path().join("corpora");
    expect_success(
        &skipspec(&[
            "synth",
            "--model-spec",
            path_str(&spec_path),
            "--corpora-dir",
            path_str(&corpora_dir),
            "--num-domains",
            "3",
            "--per-domain",
            "4",
            "--prompt-len",
            "5",
        ]),
        "synth",
    );
    let out = skipspec(&[
        "run-stream",
        "--model-spec",
        path_str(&spec_path),
        "--corpora-dir",
        path_str(&corpora_dir),
        "--registry",
        path_str(&missing),
        "--out-dir",
        path_str(&dir.path().join("runs")),
        "--mode",
        "knn-ssd",
    ]);
    assert_eq!(out.status.code(), Some(2), "missing registry should exit 2");
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    // report over a directory with no run manifests.
    std::fs::create_dir_all(dir.path().join("empty")).expect("mkdir");
    let out = skipspec(&[
        "report",
        "--stats-dir",
        path_str(&dir.path().join("empty")),
        "--out-dir",
        path_str(&dir.path().join("summary")),
        "--model-spec",
        path_str(&spec_path),
        "--corpora-dir",
        path_str(&corpora_dir),
    ]);
    assert_eq!(out.status.code(), Some(2), "empty stats dir should exit 2");

    // synth beyond the planted backend's domain capacity.
    let out = skipspec(&[
        "synth",
        "--model-spec",
        path_str(&dir.path().join("big.json")),
        "--corpora-dir",
        path_str(&dir.path().join("big")),
        "--num-domains",
        "100",
    ]);
    assert_eq!(out.status.code(), Some(2), "oversized synth should exit 2");
}

#[test]
fn vanilla_runs_match_greedy_decoding() {
    let spec = default_planted_spec(3, 9).expect("spec");
    let model = build_model(&spec).expect("model");
    let layout = model.layout().expect("planted layout").clone();
    for d in 0..3 {
        for p in synth_corpus(&layout, d, 3, 6, 40 + d as u64).expect("corpus") {
            let (tokens, record) = run_vanilla(&model, &p, 16).expect("vanilla run");
            let reference = greedy_decode(&model, &p.tokens, 16).expect("greedy");
            assert_eq!(tokens, reference);
            assert_eq!(record.drafted, 0);
            assert_eq!(record.accepted, 0);
            assert_eq!(record.alpha, None);
            assert_eq!(record.m, 1.0);
            assert_eq!(record.passes, record.emitted());
            assert_eq!(record.mask_id, "vanilla");
        }
    }
}

#[test]
fn routed_mode_collapses_to_fixed_on_a_pure_stream() {
    let spec = default_planted_spec(3, 13).expect("spec");
    let model = build_model(&spec).expect("model");
    let layout = model.layout().expect("planted layout").clone();
    let corpora: Vec<_> = (0..3)
        .map(|d| synth_corpus(&layout, d, 8, 6, 70 + d as u64).expect("corpus"))
        .collect();
    let fit = fit_router(
        &model,
        &corpora,
        &FitConfig {
            k_anchors: 3,
            bo_samples: 2,
            seed: 1,
            bo: BOConfig {
                iterations: 40,
                seed: 1,
                ..BOConfig::default()
            },
            draft_cfg: DraftConfig::fixed(4),
            ..FitConfig::default()
        },
    )
    .expect("fit");

    // Zero mixing keeps the stream in one domain, so per-item routing and
    // the single fixed mask must produce identical decode bookkeeping.
    let items = generate_stream(
        &corpora,
        &StreamConfig {
            mix_ratio: 0.0,
            num_domains: 3,
            length: 10,
            seed: 3,
            initial: InitialDomain::Uniform,
        },
    )
    .expect("stream");
    let cfg = |mode: Mode| StreamRunConfig {
        mode,
        draft: DraftConfig::fixed(4),
        max_new: 12,
        beta: 2.3,
        objective: ObjectiveMode::Analytic,
        pooled_bo: BOConfig {
            iterations: 20,
            seed: 2,
            ..BOConfig::default()
        },
        pooled_per_domain: 2,
        parallel: false,
    };
    let routed = run_stream(
        &model,
        &items,
        &fit.registry,
        &fit.router,
        &corpora,
        &cfg(Mode::KnnSsd),
    )
    .expect("routed run");
    let fixed = run_stream(
        &model,
        &items,
        &fit.registry,
        &fit.router,
        &corpora,
        &cfg(Mode::SsdFixed),
    )
    .expect("fixed run");
    assert_eq!(routed.records.len(), fixed.records.len());
    for (r, f) in routed.records.iter().zip(&fixed.records) {
        assert_eq!(r.prompt_id, f.prompt_id);
        assert_eq!(r.domain, f.domain);
        assert_eq!(r.mask_id, f.mask_id);
        assert_eq!(r.m, f.m);
        assert_eq!(r.alpha, f.alpha);
        assert_eq!(r.drafted, f.drafted);
        assert_eq!(r.accepted, f.accepted);
        assert_eq!(r.passes, f.passes);
    }
}
