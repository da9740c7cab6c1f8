use std::fs;
use std::path::{Path, PathBuf};

use lmk::harness::*;
use lmk::kaczmarz::StopReason;

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn repeated_runs_write_identical_bytes() {
    let spec = ExperimentSpec::new("block-linear-16", SolverKind::Llmk, 0.02, 5);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    compare(&spec, Some(a.path())).unwrap();
    compare(&spec, Some(b.path())).unwrap();
    let fa = files_under(a.path());
    let fb = files_under(b.path());
    assert_eq!(fa.len(), 9);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(a.path()).unwrap(), y.strip_prefix(b.path()).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
    assert!(fa.iter().all(|p| !p.to_string_lossy().ends_with(".tmp")));
}

#[test]
fn summary_checksums_cover_the_written_files() {
    let spec = ExperimentSpec::new("elliptic1d-9loads", SolverKind::Llmk, 0.01, 2);
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&spec, Some(dir.path())).unwrap();
    let run_dir = dir.path().join(spec.run_name());
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(run_dir.join(SUMMARY_FILE)).unwrap()).unwrap();
    let sums = summary["checksums"].as_object().unwrap();
    assert_eq!(sums.len(), 3);
    for (name, digest) in sums {
        assert_eq!(digest.as_str().unwrap(), sha256_hex(&fs::read(run_dir.join(name)).unwrap()));
    }
    assert_eq!(summary["stop_index"].as_u64().unwrap() as usize, out.records[0].result.stop_index);
    assert_eq!(summary["noise_seed"].as_u64(), Some(2));
}

#[test]
fn trace_file_has_one_row_per_step_up_to_the_stop() {
    for solver in [SolverKind::Llmk, SolverKind::Llk] {
        let spec = ExperimentSpec::new("block-linear-64", solver, 0.05, 1);
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&spec, Some(dir.path())).unwrap();
        let r = &out.records[0].result;
        assert_eq!(r.stop_reason, StopReason::DiscrepancyCycle);
        let mut reader = csv::Reader::from_path(dir.path().join(spec.run_name()).join(TRACE_FILE)).unwrap();
        let headers = reader.headers().unwrap().clone();
        assert_eq!(
            headers.iter().collect::<Vec<_>>(),
            ["k", "sub_index", "omega", "residual_norm", "Bk_norm", "h_norm", "error_to_truth", "alpha_used", "cg_iters"]
        );
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), r.stop_index + 1);
        for (k, row) in rows.iter().enumerate() {
            assert_eq!(row[0].parse::<usize>().unwrap(), k);
            let res: f64 = row[3].parse().unwrap();
            assert_eq!(res, r.trace[k].residual_norm);
        }
        let cycles = fs::read_to_string(dir.path().join(spec.run_name()).join(CYCLES_FILE)).unwrap();
        let last = cycles.lines().last().unwrap();
        assert_eq!(last, format!("{},0", r.cycles() - 1));
    }
}

#[test]
fn report_rebuilt_from_files_matches_memory() {
    let spec = ExperimentSpec::new("block-linear-64", SolverKind::Llmk, 0.05, 3);
    let dir = tempfile::tempdir().unwrap();
    let out = compare(&spec, Some(dir.path())).unwrap();
    let paths: Vec<PathBuf> = out
        .report
        .runs
        .iter()
        .map(|r| dir.path().join(&r.run_dir).join(RECORD_FILE))
        .collect();
    let rebuilt = ComparisonReport::from_record_files(&paths).unwrap();
    assert_eq!(rebuilt, out.report);
    assert_eq!(rebuilt.llmk_vs_llk(), out.report.llmk_vs_llk());
    let verified = verify_suite(&VerifyInput::Records(paths)).unwrap();
    assert!(verified.iter().all(|(_, r)| r.passed()));
}

#[test]
fn exact_data_summary_shows_every_step_updating() {
    let mut spec = ExperimentSpec::new("block-linear-16", SolverKind::LmkExact, 0.0, 0);
    spec.overrides.max_cycles = Some(20);
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&spec, Some(dir.path())).unwrap();
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join(spec.run_name()).join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary["all_omega_one"], serde_json::Value::Bool(true));
}

#[test]
fn spec_verification_runs_adjoint_checks_along_the_run() {
    let spec = ExperimentSpec::new("elliptic1d-9loads", SolverKind::Llmk, 0.01, 4);
    let reports = verify_suite(&VerifyInput::Spec(spec)).unwrap();
    let (_, report) = &reports[0];
    assert_eq!(report.get(CHECK_ADJOINT).unwrap().status, CheckStatus::Pass);
    assert!(report.passed(), "{report}");
}

#[test]
fn sweep_writes_its_table() {
    let spec = ExperimentSpec::new("block-linear-16", SolverKind::Llmk, 0.0, 7);
    let dir = tempfile::tempdir().unwrap();
    let report = noise_sweep(&spec, &[0.04, 0.02, 0.01], Some(dir.path())).unwrap();
    let text = fs::read_to_string(dir.path().join("block-linear-16/sweep-seed7/sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(report.fixed_k, 8);
    assert!(report.rows.windows(2).all(|w| w[1].delta_min < w[0].delta_min));
}

#[test]
fn selected_outputs_only() {
    let mut spec = ExperimentSpec::new("block-linear-16", SolverKind::Llmk, 0.05, 0);
    spec.outputs = vec![OutputKind::CycleSeriesCsv];
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&spec, Some(dir.path())).unwrap();
    assert_eq!(out.artifacts.len(), 1);
    assert!(out.artifacts[0].ends_with(CYCLES_FILE));
}
