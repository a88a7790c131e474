use std::ffi::{CStr, CString};
use std::ptr;

use cotrain_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(cotrain_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn trainer_lifecycle() {
    let cfg = CString::new(r#"{"mode": "policy_reward_env", "steps": 3, "eval_every": 1}"#).unwrap();
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(cotrain_trainer_new(cfg.as_ptr(), 7, &mut t), CotrainStatus::Ok);
        assert!(!t.is_null());
        assert_eq!(cotrain_trainer_is_done(t), 0);
        for step in 0..3 {
            let mut json = ptr::null();
            assert_eq!(cotrain_trainer_step(t, &mut json), CotrainStatus::Ok);
            let rec: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
            assert_eq!(rec["step"], step);
        }
        assert_eq!(cotrain_trainer_steps_done(t), 3);
        assert_eq!(cotrain_trainer_is_done(t), 1);
        assert_eq!(cotrain_trainer_step(t, ptr::null_mut()), CotrainStatus::State);
        assert!(!last_error().is_empty());

        let mut json = ptr::null();
        assert_eq!(cotrain_trainer_summary(t, &mut json), CotrainStatus::Ok);
        let summary: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(summary["seed"], 7);
        cotrain_trainer_free(t);
    }
}

#[test]
fn bad_config_reports_an_error() {
    let cfg = CString::new(r#"{"steps": "many"}"#).unwrap();
    let mut t = ptr::null_mut();
    let status = unsafe { cotrain_trainer_new(cfg.as_ptr(), 0, &mut t) };
    assert_ne!(status, CotrainStatus::Ok);
    assert!(t.is_null());
    assert!(!last_error().is_empty());

    let cfg = CString::new(r#"{"mode": "step_only"}"#).unwrap();
    assert_eq!(
        unsafe { cotrain_trainer_new(cfg.as_ptr(), 0, &mut t) },
        CotrainStatus::Config
    );
    assert!(last_error().contains("checkpoint"));
}

#[test]
fn null_handles_are_rejected() {
    unsafe {
        assert_eq!(
            cotrain_trainer_new(ptr::null(), 0, ptr::null_mut()),
            CotrainStatus::NullPointer
        );
        assert_eq!(
            cotrain_trainer_step(ptr::null_mut(), ptr::null_mut()),
            CotrainStatus::NullPointer
        );
        assert_eq!(cotrain_trainer_is_done(ptr::null()), -1);
        assert_eq!(cotrain_trainer_steps_done(ptr::null()), -1);
        cotrain_trainer_free(ptr::null_mut());
    }
}

#[test]
fn precision_matches_known_value() {
    let mut p = CotrainPrecision::default();
    assert_eq!(
        unsafe { cotrain_exact_precision(0.8, 0.7, 3, &mut p) },
        CotrainStatus::Ok
    );
    assert!((p.a_strict - 0.83216).abs() < 1e-12);
    assert!((p.a_strict + p.p_tie + p.p_below - 1.0).abs() < 1e-12);
    assert_eq!(
        unsafe { cotrain_exact_precision(1.5, 0.7, 3, &mut p) },
        CotrainStatus::Argument
    );
}

#[test]
fn hoeffding_bound_domain() {
    let mut b = 0.0;
    assert_eq!(unsafe { cotrain_hoeffding_bound(1.5, 16, &mut b) }, CotrainStatus::Ok);
    assert!((b - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
    assert_eq!(
        unsafe { cotrain_hoeffding_bound(1.0, 16, &mut b) },
        CotrainStatus::Argument
    );
    assert!(last_error().contains("mu > 1"));
}

#[test]
fn standardize_in_place() {
    let mut v = [1.0, 2.0, 3.0, 4.0];
    let p = v.as_mut_ptr();
    assert_eq!(unsafe { cotrain_standardize(p, 4, p) }, CotrainStatus::Ok);
    assert!(v.iter().sum::<f64>().abs() < 1e-12);
    let var = v.iter().map(|x| x * x).sum::<f64>() / 4.0;
    assert!((var - 1.0).abs() < 1e-12);
    let mut flat = [2.0; 3];
    let p = flat.as_mut_ptr();
    assert_eq!(unsafe { cotrain_standardize(p, 3, p) }, CotrainStatus::Ok);
    assert_eq!(flat, [0.0; 3]);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/cotrain.h")).unwrap();
    for sym in [
        "cotrain_trainer_new",
        "cotrain_trainer_step",
        "cotrain_trainer_free",
        "cotrain_exact_precision",
        "cotrain_last_error",
        "COTRAIN_STATUS_OK",
    ] {
        assert!(header.contains(sym), "{sym}");
    }
}
