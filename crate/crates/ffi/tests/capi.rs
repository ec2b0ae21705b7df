use std::ffi::CStr;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;
use std::sync::Arc;

use psar::cle::FitOptions;
use psar::inference::fit_estimator;
use psar::network::{gen_dyad, prepare};
use psar::sim::{add_privacy_noise, gen_covariates, simulate_sar};
use psar::{EstimatorKind, NoiseLaw, ObservedData, PrivacyConfig, Theta};
use psar_ffi::*;

struct Raw {
    d: ObservedData,
    x_rows: Vec<f64>,
    src: Vec<usize>,
    dst: Vec<usize>,
}

fn sample(n: usize, seed: u64) -> Raw {
    let prep = prepare(&gen_dyad(n, seed).unwrap()).unwrap();
    assert_eq!(prep.dropped, 0, "pick a seed without isolated nodes");
    let theta = Theta::new(0.2, vec![0.3, 0.3], 1.0);
    let w = Arc::new(prep.weights);
    let x = gen_covariates(n, 2, seed + 1);
    let t = simulate_sar(w, &theta, x, seed + 2, NoiseLaw::Normal).unwrap();
    let privacy = PrivacyConfig { lambda2: 0.5, lambda2_x: 0.5, p1: 1, p2: 1, noise_law: NoiseLaw::Normal };
    let d = add_privacy_noise(&t, &privacy, seed + 3).unwrap();
    let x_rows = (0..n).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| d.x_star[(i, j)]).collect();
    let (src, dst) = prep.adjacency.edges().unzip();
    Raw { d, x_rows, src, dst }
}

unsafe fn new_data(r: &Raw) -> (PsarStatus, *mut PsarData) {
    let mut h = ptr::null_mut();
    let s = psar_data_new(
        r.d.n(),
        2,
        r.d.y_star.as_ptr(),
        r.x_rows.as_ptr(),
        r.src.len(),
        r.src.as_ptr(),
        r.dst.as_ptr(),
        0.5,
        0.5,
        1,
        0,
        &mut h,
    );
    (s, h)
}

#[test]
fn fit_matches_library() {
    let r = sample(150, 3);
    unsafe {
        let (s, data) = new_data(&r);
        assert_eq!(s, PsarStatus::Ok, "{:?}", last_error_string());
        for (code, kind) in [(PsarEstimator::Cle, EstimatorKind::Cle), (PsarEstimator::Cls, EstimatorKind::Cls)] {
            let mut fit = ptr::null_mut();
            assert_eq!(psar_fit(data, code as u32, 0, 1, &mut fit), PsarStatus::Ok);
            let want = fit_estimator(kind, &r.d, None, &FitOptions::default()).unwrap();
            let k = psar_fit_n_params(fit);
            assert_eq!(k, 4);
            let mut got = vec![0.0; k];
            assert_eq!(psar_fit_params(fit, got.as_mut_ptr(), k), PsarStatus::Ok);
            assert_eq!(got, want.point.to_vec());
            assert_eq!(psar_fit_iterations(fit), want.iterations);

            // No bootstrap was requested.
            assert_eq!(psar_fit_se(fit, got.as_mut_ptr(), k), PsarStatus::InvalidArgument);
            assert!(last_error_string().unwrap().contains("standard errors"));

            let json = psar_fit_to_json(fit);
            assert!(!json.is_null());
            let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
            assert_eq!(v["point"]["rho"].as_f64().unwrap(), got[0]);
            psar_string_free(json);
            psar_fit_free(fit);
        }
        psar_data_free(data);
    }
}

#[test]
fn bootstrap_se_through_abi() {
    let r = sample(120, 8);
    unsafe {
        let (_, data) = new_data(&r);
        let mut fit = ptr::null_mut();
        assert_eq!(psar_fit(data, PsarEstimator::Cle as u32, 20, 9, &mut fit), PsarStatus::Ok);
        let mut se = [0.0; 4];
        assert_eq!(psar_fit_se(fit, se.as_mut_ptr(), 4), PsarStatus::Ok);
        assert!(se.iter().all(|&v| v.is_finite() && v > 0.0), "{se:?}");
        assert!(psar_last_error().is_null(), "success clears the last error");
        psar_fit_free(fit);
        psar_data_free(data);
    }
}

#[test]
fn errors_are_codes_not_crashes() {
    let r = sample(60, 5);
    unsafe {
        // Null output pointer.
        let s = psar_data_new(1, 1, ptr::null(), ptr::null(), 0, ptr::null(), ptr::null(), 0.0, 0.0, 0, 0, ptr::null_mut());
        assert_eq!(s, PsarStatus::NullPointer);

        // Node 2 has no out-edges.
        let y = [0.0; 3];
        let x = [1.0; 3];
        let (src, dst) = ([0usize, 1], [1usize, 0]);
        let mut h = ptr::null_mut();
        let s = psar_data_new(3, 1, y.as_ptr(), x.as_ptr(), 2, src.as_ptr(), dst.as_ptr(), 0.0, 0.0, 0, 0, &mut h);
        assert_eq!(s, PsarStatus::ZeroOutDegree);
        assert!(h.is_null());
        assert!(last_error_string().unwrap().contains("out-degree"));

        // Edge id out of range, too many protected columns, unknown noise law.
        let (src, dst) = ([0usize, 1, 2], [1usize, 7, 0]);
        let s = psar_data_new(3, 1, y.as_ptr(), x.as_ptr(), 3, src.as_ptr(), dst.as_ptr(), 0.0, 0.0, 0, 0, &mut h);
        assert_eq!(s, PsarStatus::InvalidArgument);
        let s = psar_data_new(3, 1, y.as_ptr(), x.as_ptr(), 0, ptr::null(), ptr::null(), 0.0, 0.0, 2, 0, &mut h);
        assert_eq!(s, PsarStatus::InvalidArgument);
        let s = psar_data_new(3, 1, y.as_ptr(), x.as_ptr(), 0, ptr::null(), ptr::null(), 0.0, 0.0, 0, 9, &mut h);
        assert_eq!(s, PsarStatus::InvalidArgument);
        // Negative variance.
        let (_, ok) = new_data(&r);
        let s = psar_data_new(
            r.d.n(),
            2,
            r.d.y_star.as_ptr(),
            r.x_rows.as_ptr(),
            r.src.len(),
            r.src.as_ptr(),
            r.dst.as_ptr(),
            -1.0,
            0.5,
            1,
            0,
            &mut h,
        );
        assert_eq!(s, PsarStatus::InvalidArgument);

        let mut fit = ptr::null_mut();
        assert_eq!(psar_fit(ptr::null(), 0, 0, 0, &mut fit), PsarStatus::NullPointer);
        assert_eq!(psar_fit(ok, 42, 0, 0, &mut fit), PsarStatus::InvalidArgument);
        assert_eq!(psar_fit(ok, 1, 1, 0, &mut fit), PsarStatus::InvalidArgument);
        assert!(fit.is_null());
        assert_eq!(psar_fit_params(ptr::null(), ptr::null_mut(), 0), PsarStatus::NullPointer);
        assert_eq!(psar_fit_n_params(ptr::null()), 0);
        assert!(psar_fit_to_json(ptr::null()).is_null());
        psar_fit_free(ptr::null_mut());
        psar_string_free(ptr::null_mut());
        psar_data_free(ok);
    }
}

#[test]
fn last_error_is_per_thread() {
    unsafe {
        let s = psar_data_new(0, 1, ptr::null(), ptr::null(), 0, ptr::null(), ptr::null(), 0.0, 0.0, 0, 0, &mut ptr::null_mut());
        assert_eq!(s, PsarStatus::InvalidArgument);
    }
    assert!(last_error_string().is_some());
    let other = std::thread::spawn(last_error_string).join().unwrap();
    assert!(other.is_none());
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(psar_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_is_current_and_compiles() {
    let header = std::fs::read_to_string(crate_dir().join("include/psar.h")).unwrap();
    for sym in [
        "psar_data_new",
        "psar_data_free",
        "psar_fit",
        "psar_fit_free",
        "psar_fit_params",
        "psar_fit_se",
        "psar_fit_to_json",
        "psar_string_free",
        "psar_last_error",
        "PSAR_ESTIMATOR_CLS",
        "PSAR_STATUS_ZERO_OUT_DEGREE",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
    let Some(cc) = compiler() else { return };
    let out = Command::new(&cc)
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(crate_dir().join("include/psar.h"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn compiler() -> Option<String> {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    Command::new(&cc).arg("--version").output().ok().filter(|o| o.status.success()).map(|_| cc)
}

/// `target/<profile>` of the running test binary.
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let lib = profile_dir().join("libpsar_ffi.a");
    let (Some(cc), true) = (compiler(), lib.exists()) else {
        eprintln!("skipping: no C compiler or {} not built", lib.display());
        return;
    };
    let dir = std::env::temp_dir().join(format!("psar-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let exe = dir.join("smoke");
    let out = Command::new(&cc)
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "link failed: {}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    let _ = std::fs::remove_dir_all(&dir);
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).contains("rho="));
}
