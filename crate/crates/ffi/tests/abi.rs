use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use geoloss::synthworld::rigid_scene;
use geoloss_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(geoloss_last_error()) }.to_string_lossy().into_owned()
}

fn rendered(width: usize, height: usize) -> *mut GeolossScene {
    let spec = CString::new(serde_json::to_string(&rigid_scene(width, height, 1)).unwrap()).unwrap();
    let mut scene = ptr::null_mut();
    let st = unsafe { geoloss_scene_render(spec.as_ptr(), &mut scene) };
    assert_eq!(st, GeolossStatus::Ok, "{}", last_error());
    scene
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(geoloss_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let st = unsafe { geoloss_config_new(ptr::null_mut()) };
    assert_eq!(st, GeolossStatus::NullPointer);
    assert!(last_error().contains("null"));
    let mut v = 0.0;
    let st = unsafe { geoloss_eval_loss(ptr::null(), ptr::null(), GeolossLoss::Ap, &mut v, ptr::null_mut()) };
    assert_eq!(st, GeolossStatus::NullPointer);
    unsafe {
        geoloss_scene_free(ptr::null_mut());
        geoloss_config_free(ptr::null_mut());
    }
}

#[test]
fn bad_config_json_is_a_format_error() {
    let json = CString::new("{\"lambda_s\": 0.1,\n \"bogus\": 1}").unwrap();
    let mut cfg = ptr::null_mut();
    let st = unsafe { geoloss_config_from_json(json.as_ptr(), &mut cfg) };
    assert_eq!(st, GeolossStatus::Format);
    assert!(last_error().contains("line 2"), "{}", last_error());
    assert!(cfg.is_null());
}

#[test]
fn ap_loss_vanishes_at_truth() {
    let scene = rendered(48, 36);
    let (mut w, mut h) = (0, 0);
    unsafe {
        assert_eq!(geoloss_scene_size(scene, &mut w, &mut h), GeolossStatus::Ok);
    }
    assert_eq!((w, h), (48, 36));
    let mut cfg = ptr::null_mut();
    let json = CString::new("{\"lambda_s\": 0.0}").unwrap();
    unsafe {
        assert_eq!(geoloss_config_from_json(json.as_ptr(), &mut cfg), GeolossStatus::Ok);
    }
    let mut value = f64::NAN;
    let mut map = vec![f64::NAN; w * h];
    let st = unsafe { geoloss_eval_loss(scene, cfg, GeolossLoss::Ap, &mut value, map.as_mut_ptr()) };
    assert_eq!(st, GeolossStatus::Ok, "{}", last_error());
    assert!(value <= 1e-6, "{value}");
    assert!(map.iter().all(|v| v.is_finite()));
    assert_eq!(last_error(), "");
    unsafe {
        geoloss_config_free(cfg);
        geoloss_scene_free(scene);
    }
}

#[test]
fn written_scene_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let scene = rendered(32, 24);
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(geoloss_scene_write(scene, path.as_ptr()), GeolossStatus::Ok, "{}", last_error());
    }
    let mut loaded = ptr::null_mut();
    unsafe {
        assert_eq!(geoloss_scene_load(path.as_ptr(), GeolossLoss::Op, &mut loaded), GeolossStatus::Ok);
    }
    let (mut a, mut b) = (f64::NAN, f64::NAN);
    unsafe {
        geoloss_eval_loss(scene, ptr::null(), GeolossLoss::Op, &mut a, ptr::null_mut());
        geoloss_eval_loss(loaded, ptr::null(), GeolossLoss::Op, &mut b, ptr::null_mut());
        // loaded images are float32 copies
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        geoloss_scene_free(loaded);
    }
    // a loaded scene has no ground truth to write
    let other = tempfile::tempdir().unwrap();
    let other_path = CString::new(other.path().to_str().unwrap()).unwrap();
    let mut reloaded = ptr::null_mut();
    unsafe {
        geoloss_scene_load(path.as_ptr(), GeolossLoss::Op, &mut reloaded);
        assert_eq!(geoloss_scene_write(reloaded, other_path.as_ptr()), GeolossStatus::InvalidArgument);
        geoloss_scene_free(reloaded);
        geoloss_scene_free(scene);
    }
}

#[test]
fn missing_scene_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut scene = ptr::null_mut();
    let st = unsafe { geoloss_scene_load(path.as_ptr(), GeolossLoss::Ap, &mut scene) };
    assert_eq!(st, GeolossStatus::MissingInput);
    assert!(last_error().contains("it.ppm"), "{}", last_error());
}

#[test]
fn uniform_flow_leaves_first_column_uncovered() {
    let (w, h) = (5, 4);
    let u = vec![1.0; w * h];
    let v = vec![0.0; w * h];
    let mut occ = vec![f64::NAN; w * h];
    let st = unsafe { geoloss_occlusion_map(u.as_ptr(), v.as_ptr(), w, h, w, h, occ.as_mut_ptr()) };
    assert_eq!(st, GeolossStatus::Ok);
    for y in 0..h {
        assert_eq!(occ[y * w], 0.0);
        assert!(occ[y * w + 1..(y + 1) * w].iter().all(|&m| m == 1.0));
    }
    let mut range = vec![0.0; w * h];
    let st = unsafe { geoloss_range_map(u.as_ptr(), v.as_ptr(), w, h, w, h, range.as_mut_ptr()) };
    assert_eq!(st, GeolossStatus::Ok);
    assert_eq!(range.iter().sum::<f64>(), ((w - 1) * h) as f64);
}

#[test]
fn empty_grid_is_invalid() {
    let mut out = [0.0];
    let st = unsafe { geoloss_range_map([0.0].as_ptr(), [0.0].as_ptr(), 0, 1, 1, 1, out.as_mut_ptr()) };
    assert_eq!(st, GeolossStatus::InvalidArgument);
}

#[test]
fn weights_through_the_abi() {
    let (l_bo, l_fo) = ([0.3, 1.0, 0.0], [0.3, 0.0, 1.0]);
    let (mut w_bo, mut w_fo) = ([0.0; 3], [0.0; 3]);
    let st = unsafe { geoloss_direction_weights(l_bo.as_ptr(), l_fo.as_ptr(), 3, w_bo.as_mut_ptr(), w_fo.as_mut_ptr()) };
    assert_eq!(st, GeolossStatus::Ok);
    assert_eq!(w_bo[0], 1.0);
    for i in 0..3 {
        assert!((w_bo[i] * w_fo[i] - 1.0).abs() < 1e-12);
    }
    let (l_o, l_d) = ([0.0, 5.0, 0.1], [5.0, 0.0, 0.1]);
    let (mut w_o, mut w_d) = ([0.0; 3], [0.0; 3]);
    let st = unsafe { geoloss_task_weights(l_o.as_ptr(), l_d.as_ptr(), 3, 0.28, w_o.as_mut_ptr(), w_d.as_mut_ptr()) };
    assert_eq!(st, GeolossStatus::Ok);
    assert_eq!(w_o, [1.0, 0.0, 1.0]);
    assert_eq!(w_d, [0.0, 1.0, 1.0]);
    let st = unsafe { geoloss_task_weights(l_o.as_ptr(), l_d.as_ptr(), 3, 1.5, w_o.as_mut_ptr(), w_d.as_mut_ptr()) };
    assert_eq!(st, GeolossStatus::InvalidArgument);
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/geoloss.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "geoloss_eval_loss",
        "geoloss_range_map",
        "geoloss_occlusion_map",
        "geoloss_direction_weights",
        "geoloss_task_weights",
        "geoloss_scene_render",
        "geoloss_scene_load",
        "geoloss_last_error",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    // compile check only where a C compiler is installed
    let Ok(status) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("cc not found; skipping compile check");
        return;
    };
    assert!(status.success());
}
