use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use costfilter_ffi::*;

fn last_error() -> String {
    let p = cf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn model(json: &str) -> (CfStatus, *mut CfModel) {
    let json = CString::new(json).unwrap();
    let mut m = ptr::null_mut();
    let s = unsafe { cf_model_new(json.as_ptr(), &mut m) };
    (s, m)
}

fn textured(h: usize, w: usize, seed: u32) -> Vec<f32> {
    (0..3 * h * w)
        .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) >> 8) as f32 / (1u32 << 24) as f32)
        .collect()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(cf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn match_evaluate_and_write() {
    let (s, m) = model(r#"{"filter":"none","max_disp":16,"downsample":1}"#);
    assert_eq!(s, CfStatus::Ok);
    assert_eq!(unsafe { cf_model_max_disp(m) }, 16);
    let (h, w) = (16, 32);
    let left = textured(h, w, 1);
    let mut d = ptr::null_mut();
    let s = unsafe { cf_match(m, left.as_ptr(), left.as_ptr(), 3, h, w, &mut d) };
    assert_eq!(s, CfStatus::Ok);
    assert!(cf_last_error().is_null());
    unsafe {
        assert_eq!((cf_disparity_width(d), cf_disparity_height(d)), (w, h));
        let vals = std::slice::from_raw_parts(cf_disparity_values(d), w * h);
        assert!(vals.iter().all(|v| (0.0..=15.0).contains(v)));
        let valid = std::slice::from_raw_parts(cf_disparity_valid(d), w * h);
        assert!(valid.iter().all(|&b| b));

        let mut metrics = CfMetrics::default();
        assert_eq!(cf_evaluate(d, d, CfBadRule::Or, &mut metrics), CfStatus::Ok);
        assert_eq!(metrics, CfMetrics { epe: 0.0, bad1: 0.0, bad3: 0.0, pixels: w * h });

        let dir = tempfile::tempdir().unwrap();
        for name in ["d.pfm", "d.png"] {
            let path = CString::new(dir.path().join(name).to_str().unwrap()).unwrap();
            assert_eq!(cf_disparity_write(d, path.as_ptr()), CfStatus::Ok);
            let mut back = ptr::null_mut();
            assert_eq!(cf_disparity_read(path.as_ptr(), 1e9, &mut back), CfStatus::Ok);
            assert_eq!(cf_evaluate(back, d, CfBadRule::And, &mut metrics), CfStatus::Ok);
            assert!(metrics.epe < 1.0 / 256.0, "{name}: {}", metrics.epe);
            cf_disparity_free(back);
        }
        cf_disparity_free(d);
        cf_model_free(m);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let (s, m) = model(r#"{"filter":"sga"}"#);
    assert_eq!(s, CfStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("weights"));

    let (s, _) = model(r#"{"filtr":"sga"}"#);
    assert_eq!(s, CfStatus::Config);

    let (s, _) = model(r#"{"filter":"none","weights":"/nonexistent/w.bin"}"#);
    assert_eq!(s, CfStatus::Io);

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { cf_model_new(ptr::null(), ptr::null_mut()) }, CfStatus::NullArgument);
    let s = unsafe { cf_match(ptr::null(), ptr::null(), ptr::null(), 3, 4, 4, &mut out) };
    assert_eq!(s, CfStatus::NullArgument);

    let (s, m) = model(r#"{"filter":"none","max_disp":16,"downsample":2}"#);
    assert_eq!(s, CfStatus::Ok);
    let img = textured(7, 9, 3);
    let s = unsafe { cf_match(m, img.as_ptr(), img.as_ptr(), 3, 7, 9, &mut out) };
    assert_eq!(s, CfStatus::Config, "{}", last_error());
    let s = unsafe { cf_match(m, img.as_ptr(), img.as_ptr(), 3, 0, 9, &mut out) };
    assert_eq!(s, CfStatus::InvalidArgument);
    unsafe { cf_model_free(m) };

    let path = CString::new("/nonexistent/d.pfm").unwrap();
    assert_eq!(unsafe { cf_disparity_read(path.as_ptr(), 192.0, &mut out) }, CfStatus::Io);
}

#[test]
fn no_overlap_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("gt.pfm");
    let t = costfilter::tensor::Tensor::new(vec![1, 1, 2], vec![f32::INFINITY, f32::INFINITY]).unwrap();
    costfilter::io::write_pfm(&t, &p).unwrap();
    let path = CString::new(p.to_str().unwrap()).unwrap();
    let mut gt = ptr::null_mut();
    unsafe {
        assert_eq!(cf_disparity_read(path.as_ptr(), 192.0, &mut gt), CfStatus::Ok);
        let mut metrics = CfMetrics::default();
        assert_eq!(cf_evaluate(gt, gt, CfBadRule::Or, &mut metrics), CfStatus::Data);
        cf_disparity_free(gt);
    }
}

#[test]
fn header_declares_the_api_and_parses_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/costfilter.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "cf_version", "cf_last_error", "cf_model_new", "cf_model_free", "cf_match", "cf_disparity_read",
        "cf_disparity_write", "cf_disparity_values", "cf_disparity_free", "cf_evaluate", "typedef struct CfModel CfModel",
        "CF_STATUS_OK = 0",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    if let Ok(o) = Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"]).arg(&header).output() {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
}
