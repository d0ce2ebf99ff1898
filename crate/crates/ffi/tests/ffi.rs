use std::ffi::{CStr, CString};
use std::ptr;

use cofuse_ffi::*;

const SMALL: &str = r#"{"grid":{"h":16,"w":16,"cell_m":2.0,"channels":4},"state_dim":4,"buffer":2,
"training":{"steps":2},"evaluation":{"scenarios":1,"ticks":2}}"#;

fn small() -> CString {
    CString::new(SMALL).unwrap()
}

fn last_error() -> String {
    let p = cofuse_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn create_evaluate_free() {
    let cfg = small();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(cofuse_model_new(cfg.as_ptr(), 3, &mut m), CofuseStatus::Ok);
        assert!(cofuse_model_num_values(m) > 0);
        let mut a = CofuseMetrics::default();
        let mut b = CofuseMetrics::default();
        assert_eq!(cofuse_evaluate(m, &mut a), CofuseStatus::Ok);
        assert_eq!(cofuse_evaluate(m, &mut b), CofuseStatus::Ok);
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.iou));
        assert_eq!(a.ticks, 2);
        cofuse_model_free(m);
        cofuse_model_free(ptr::null_mut());
    }
}

#[test]
fn train_save_and_reload() {
    let cfg = small();
    let mut trained = ptr::null_mut();
    let mut losses = [f64::NAN; 2];
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("p.catp").to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(
            cofuse_train(cfg.as_ptr(), &mut trained, losses.as_mut_ptr(), 2),
            CofuseStatus::Ok
        );
        assert!(losses.iter().all(|l| l.is_finite()));
        assert_eq!(cofuse_model_save(trained, path.as_ptr()), CofuseStatus::Ok);

        let mut fresh = ptr::null_mut();
        assert_eq!(cofuse_model_new(cfg.as_ptr(), 99, &mut fresh), CofuseStatus::Ok);
        let (mut a, mut b) = (CofuseMetrics::default(), CofuseMetrics::default());
        assert_eq!(cofuse_model_load(fresh, path.as_ptr()), CofuseStatus::Ok);
        assert_eq!(cofuse_evaluate(trained, &mut a), CofuseStatus::Ok);
        assert_eq!(cofuse_evaluate(fresh, &mut b), CofuseStatus::Ok);
        assert_eq!(a, b);
        cofuse_model_free(trained);
        cofuse_model_free(fresh);
    }
}

#[test]
fn error_codes() {
    let mut m = ptr::null_mut();
    let bad = CString::new(r#"{"retention": 2.0}"#).unwrap();
    let missing = CString::new("/nonexistent/dir/p.catp").unwrap();
    unsafe {
        assert_eq!(cofuse_model_new(bad.as_ptr(), 0, &mut m), CofuseStatus::Config);
        assert!(last_error().contains("retention"));
        assert!(m.is_null());
        assert_eq!(
            cofuse_model_new(ptr::null(), 0, ptr::null_mut()),
            CofuseStatus::NullPointer
        );
        assert_eq!(cofuse_evaluate(ptr::null(), ptr::null_mut()), CofuseStatus::NullPointer);
        assert_eq!(cofuse_model_num_values(ptr::null()), 0);

        let cfg = small();
        assert_eq!(cofuse_model_new(cfg.as_ptr(), 0, &mut m), CofuseStatus::Ok);
        assert_eq!(cofuse_model_load(m, missing.as_ptr()), CofuseStatus::Io);
        cofuse_model_free(m);
    }
}

#[test]
fn haar_round_trip_through_c_abi() {
    let (c, h, w) = (2, 4, 6);
    let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
    let mut packed = vec![0.0; x.len()];
    let mut back = vec![0.0; x.len()];
    unsafe {
        assert_eq!(
            cofuse_haar_forward(x.as_ptr(), c, h, w, packed.as_mut_ptr()),
            CofuseStatus::Ok
        );
        assert_eq!(
            cofuse_haar_inverse(packed.as_ptr(), c, h, w, back.as_mut_ptr()),
            CofuseStatus::Ok
        );
        assert_eq!(
            cofuse_haar_forward(x.as_ptr(), 1, 3, 8, packed.as_mut_ptr()),
            CofuseStatus::InvalidArgument
        );
    }
    // Mean of the first 2×2 block, scaled by 2.
    let ll = 0.5 * (x[0] + x[1] + x[w] + x[w + 1]);
    assert!((packed[0] - ll).abs() < 1e-15);
    for (a, b) in x.iter().zip(&back) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn header_declares_the_api() {
    let header = include_str!("../include/cofuse.h");
    for name in [
        "cofuse_last_error",
        "cofuse_model_new",
        "cofuse_train",
        "cofuse_model_free",
        "cofuse_evaluate",
        "cofuse_model_save",
        "cofuse_model_load",
        "cofuse_haar_forward",
        "cofuse_haar_inverse",
        "COFUSE_STATUS_DIVERGENCE",
        "typedef struct CofuseModel CofuseModel",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
