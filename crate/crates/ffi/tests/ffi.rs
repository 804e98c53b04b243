use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use judge_audit_ffi::*;

fn d1() -> *mut JaDataset {
    let sizes = [2usize, 2];
    let judge = [0.8, 0.2, 0.6, 0.4];
    let oracle = [1.0, 0.0, 0.0, 1.0];
    let mut ds = ptr::null_mut();
    let st = unsafe { ja_dataset_from_arrays(sizes.as_ptr(), 2, judge.as_ptr(), oracle.as_ptr(), &mut ds) };
    assert_eq!(st, JaStatus::Ok);
    ds
}

fn last_error() -> String {
    let p = ja_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn metrics_on_d1() {
    let ds = d1();
    unsafe {
        assert_eq!((ja_dataset_n_prompts(ds), ja_dataset_n_records(ds)), (2, 4));
        let mut sv = JaSelectionValues::default();
        assert_eq!(ja_selection_values(ds, &mut sv), JaStatus::Ok);
        assert_eq!((sv.v_oracle, sv.v_random, sv.v_judge), (1.0, 0.5, 0.5));
        let mut v = f64::NAN;
        assert_eq!(ja_metric(ds, JaMetric::Recovery, &mut v), JaStatus::Ok);
        assert_eq!(v, 0.0);
        assert_eq!(ja_metric(ds, JaMetric::WithinCorrelation, &mut v), JaStatus::Ok);
        assert!((v - 0.2f64.sqrt()).abs() < 1e-12);
        assert_eq!(ja_metric(ds, JaMetric::AttenuationSlope, &mut v), JaStatus::Ok);
        assert!((v - 0.2).abs() < 1e-12);
        let policy = CString::new("oracle_optimal").unwrap();
        assert_eq!(ja_route_value(ds, policy.as_ptr(), 1.0, &mut v), JaStatus::Ok);
        assert_eq!(v, 1.0);
        let mut iv = JaInterval::default();
        assert_eq!(ja_dr_recovery(ds, JaOutcomeModel::Constant, &mut iv), JaStatus::Ok);
        assert_eq!(iv.point, 0.0);
        ja_dataset_free(ds);
    }
}

#[test]
fn audit_json_round_trips() {
    let ds = d1();
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(ja_audit_json(ds, 0, 0, &mut s), JaStatus::Ok);
        let json: serde_json::Value = serde_json::from_str(CStr::from_ptr(s).to_str().unwrap()).unwrap();
        assert_eq!(json["recovery"]["value"], 0.0);
        ja_string_free(s);
        assert_eq!(ja_audit_json(ds, 1, 0, &mut s), JaStatus::Config);
        assert!(last_error().contains("resamples"));
        ja_dataset_free(ds);
    }
}

#[test]
fn errors_are_reported_not_panicked() {
    unsafe {
        let mut ds = ptr::null_mut();
        let missing = CString::new("/nonexistent/file.jsonl").unwrap();
        assert_eq!(ja_dataset_load(missing.as_ptr(), false, &mut ds), JaStatus::NotFound);
        assert!(last_error().contains("no such input"));
        assert!(ds.is_null());
        assert_eq!(ja_dataset_load(ptr::null(), false, &mut ds), JaStatus::InvalidArgument);
        let mut v = 0.0;
        assert_eq!(ja_metric(ptr::null(), JaMetric::Recovery, &mut v), JaStatus::InvalidArgument);

        // Constant oracle within each prompt: recovery undefined.
        let sizes = [2usize];
        let (j, o) = ([0.1, 0.9], [0.5, 0.5]);
        let mut flat = ptr::null_mut();
        assert_eq!(ja_dataset_from_arrays(sizes.as_ptr(), 1, j.as_ptr(), o.as_ptr(), &mut flat), JaStatus::Ok);
        assert_eq!(ja_metric(flat, JaMetric::Recovery, &mut v), JaStatus::Undefined);
        let bad = CString::new("sideways").unwrap();
        assert_eq!(ja_route_value(flat, bad.as_ptr(), 0.5, &mut v), JaStatus::Config);
        ja_dataset_free(flat);
        ja_dataset_free(ptr::null_mut());
    }
}

#[test]
fn file_loading_and_pairwise() {
    let dir = tempfile::tempdir().unwrap();
    let pw_path = dir.path().join("pw.jsonl");
    std::fs::write(
        &pw_path,
        r#"{"prompt_id":"1","candidate_a":"a","candidate_b":"b","judge_choice":"A","oracle_choice":"A"}
{"prompt_id":"2","candidate_a":"a","candidate_b":"b","judge_choice":"A","oracle_choice":"A"}
{"prompt_id":"3","candidate_a":"a","candidate_b":"b","judge_choice":"A","oracle_choice":"B"}
{"prompt_id":"4","candidate_a":"a","candidate_b":"b","judge_choice":"TIE","oracle_choice":"B"}
"#,
    )
    .unwrap();
    let path = CString::new(pw_path.to_str().unwrap()).unwrap();
    unsafe {
        let mut pw = ptr::null_mut();
        assert_eq!(ja_pairwise_load(path.as_ptr(), &mut pw), JaStatus::Ok);
        let mut s = JaPairwiseStats::default();
        assert_eq!(ja_pairwise_stats(pw, &mut s), JaStatus::Ok);
        assert_eq!((s.p_eff, s.recovery_bo2, s.n_records), (0.625, 0.25, 4));
        ja_pairwise_free(pw);

        let pt_path = dir.path().join("pt.jsonl");
        std::fs::write(
            &pt_path,
            "{\"prompt_id\":\"P\",\"candidate_id\":\"a\",\"judge_score\":80,\"oracle_label\":1}\n{\"prompt_id\":\"P\",\"candidate_id\":\"b\",\"judge_score\":20,\"oracle_label\":0}\n",
        )
        .unwrap();
        let path = CString::new(pt_path.to_str().unwrap()).unwrap();
        let mut ds = ptr::null_mut();
        assert_eq!(ja_dataset_load(path.as_ptr(), false, &mut ds), JaStatus::Ok);
        let mut v = 0.0;
        assert_eq!(ja_metric(ds, JaMetric::Recovery, &mut v), JaStatus::Ok);
        assert_eq!(v, 1.0);
        ja_dataset_free(ds);
    }
}

#[test]
fn isotonic_fit_through_ffi() {
    let (x, y) = ([1.0, 2.0, 3.0], [3.0, 1.0, 2.0]);
    let mut fitted = [0.0; 3];
    let st = unsafe { ja_isotonic_fit(x.as_ptr(), y.as_ptr(), 3, fitted.as_mut_ptr()) };
    assert_eq!(st, JaStatus::Ok);
    assert_eq!(fitted, [2.0, 2.0, 2.0]);
    let st = unsafe { ja_isotonic_fit(x.as_ptr(), y.as_ptr(), 3, ptr::null_mut()) };
    assert_eq!(st, JaStatus::InvalidArgument);
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(ja_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn manifest_dir() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(manifest_dir().join("include/judge_audit.h")).unwrap();
    for name in [
        "ja_dataset_load",
        "ja_dataset_from_arrays",
        "ja_dataset_free",
        "ja_metric",
        "ja_audit_json",
        "ja_string_free",
        "ja_dr_recovery",
        "ja_route_value",
        "ja_isotonic_fit",
        "ja_pairwise_stats",
        "ja_last_error",
        "typedef struct JaDataset JaDataset",
        "JA_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

/// Target directory holding the static library (deps/ is the test binary's home).
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let lib = profile_dir().join("libjudge_audit_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler found; skipping");
        return;
    }
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let out_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let exe = out_dir.join("ja_smoke");
    let status = Command::new(&cc)
        .arg(manifest_dir().join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C smoke test failed to compile");
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "smoke exited {:?}: {}", run.status, String::from_utf8_lossy(&run.stdout));
    assert!(String::from_utf8_lossy(&run.stdout).contains("recovery=0.000 pcs=0.500"));
}
