use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use superweight_ffi::*;

const CONFIG: &str = r#"
seed = 3
budget_fraction = 0.6
epochs = 6
warmup_epochs = 1
refine_epoch = 3

[[members]]
hidden = [12, 12]

[[members]]
hidden = [12, 12]

[dataset]
kind = "spirals"
train = 200
val = 100
test = 100
"#;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = swn_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

#[test]
fn run_load_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let mut json = ptr::null_mut();
    let status = swn_run_experiment(cstr(&config).as_ptr(), cstr(dir.path()).as_ptr(), &mut json);
    assert_eq!(status, SwnStatus::Ok);
    assert!(swn_last_error_message().is_null());
    let summary: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(json) }.to_str().unwrap()).unwrap();
    unsafe { swn_string_free(json) };
    let run_dir = Path::new(summary["dir"].as_str().unwrap());
    let top1 = summary["report"]["test"]["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));

    let mut model = ptr::null_mut();
    assert_eq!(swn_model_load(cstr(&run_dir.join("checkpoint.swn")).as_ptr(), &mut model), SwnStatus::Ok);
    let (mut members, mut features, mut classes) = (0, 0, 0);
    assert_eq!(swn_model_member_count(model, &mut members), SwnStatus::Ok);
    assert_eq!(swn_model_input_features(model, &mut features), SwnStatus::Ok);
    assert_eq!(swn_model_classes(model, &mut classes), SwnStatus::Ok);
    assert_eq!((members, features, classes), (2, 2, 3));

    let rows = 5;
    let x: Vec<f64> = (0..rows * features).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut both = vec![0.0; rows * classes];
    let mut first = vec![0.0; rows * classes];
    let mut second = vec![0.0; rows * classes];
    for (mask, out) in [(0b11, &mut both), (0b01, &mut first), (0b10, &mut second)] {
        assert_eq!(swn_model_predict_proba(model, x.as_ptr(), rows, mask, out.as_mut_ptr(), out.len()), SwnStatus::Ok);
    }
    for row in both.chunks(classes) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
    for i in 0..both.len() {
        assert!((both[i] - 0.5 * (first[i] + second[i])).abs() < 1e-6);
    }
    let status = swn_model_predict_proba(model, x.as_ptr(), rows, 0b100, both.as_mut_ptr(), both.len());
    assert_eq!(status, SwnStatus::InvalidArgument);
    assert!(last_error().contains("no member"));
    unsafe { swn_model_free(model) };
}

#[test]
fn ece_matches_reference_case() {
    let probs = [0.6, 0.4, 0.4, 0.6, 0.9, 0.1, 0.1, 0.9];
    let labels = [0usize, 0, 0, 1];
    let mut e = f64::NAN;
    assert_eq!(swn_ece(probs.as_ptr(), 4, 2, labels.as_ptr(), 15, &mut e), SwnStatus::Ok);
    assert!((e - 0.1).abs() < 1e-12);
    let bad = [0usize, 0, 0, 7];
    assert_eq!(swn_ece(probs.as_ptr(), 4, 2, bad.as_ptr(), 15, &mut e), SwnStatus::Shape);
}

#[test]
fn grouping_fills_singletons() {
    let sim = [0.9, 0.5, -0.2];
    let a = [0u32, 1, 3];
    let b = [1u32, 2, 4];
    let mut groups = [u32::MAX; 6];
    let status = swn_group_by_queue(sim.as_ptr(), a.as_ptr(), b.as_ptr(), 3, 0.1, 6, groups.as_mut_ptr());
    assert_eq!(status, SwnStatus::Ok);
    assert_eq!(groups, [0, 0, 0, 1, 2, 3]);
    let self_pair = [2u32];
    let status = swn_group_by_queue(sim.as_ptr(), self_pair.as_ptr(), self_pair.as_ptr(), 1, 0.1, 6, groups.as_mut_ptr());
    assert_eq!(status, SwnStatus::InvalidArgument);
}

#[test]
fn failures_set_status_and_message() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/checkpoint.swn").unwrap();
    assert_eq!(swn_model_load(missing.as_ptr(), &mut model), SwnStatus::Io);
    assert!(last_error().contains("/nonexistent/checkpoint.swn"));
    assert!(model.is_null());
    assert_eq!(swn_model_load(ptr::null(), &mut model), SwnStatus::NullPointer);

    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("bad.swn");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(swn_model_load(cstr(&garbage).as_ptr(), &mut model), SwnStatus::Checkpoint);

    let config = dir.path().join("tight.toml");
    std::fs::write(&config, CONFIG.replace("budget_fraction = 0.6", "budget_fraction = 0.01")).unwrap();
    let mut json = ptr::null_mut();
    let status = swn_run_experiment(cstr(&config).as_ptr(), cstr(dir.path()).as_ptr(), &mut json);
    assert_eq!(status, SwnStatus::BudgetTooSmall);
    assert!(json.is_null());
    unsafe { swn_model_free(ptr::null_mut()) };
    unsafe { swn_string_free(ptr::null_mut()) };
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/superweight.h")).unwrap();
    for name in [
        "swn_last_error_message",
        "swn_model_load",
        "swn_model_free",
        "swn_model_member_count",
        "swn_model_input_features",
        "swn_model_classes",
        "swn_model_predict_proba",
        "swn_ece",
        "swn_group_by_queue",
        "swn_run_experiment",
        "swn_string_free",
        "typedef struct SwnModelHandle SwnModelHandle",
        "SWN_STATUS_BUDGET_TOO_SMALL = 7",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
