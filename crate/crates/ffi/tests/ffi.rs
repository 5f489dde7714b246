use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use facade_risk::model::{checkpoint, Architecture, MultiTaskModel, YearNorm};
use facade_risk::synthgen::{render_facade, FacadeParams};
use facade_risk_ffi::*;

fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let model = MultiTaskModel::new(Architecture::default(), YearNorm::default(), 1).unwrap();
    let ckpt = dir.join("m.ckpt");
    checkpoint::save(&model, &ckpt).unwrap();
    let img = dir.join("f.png");
    render_facade(&FacadeParams {
        hue_deg: 40.0,
        floors: 5,
        width: 96,
        offset_x: 0,
        brightness: 0.0,
        noise_seed: 2,
    })
    .save(&img)
    .unwrap();
    (ckpt, img)
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = fr_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn fireproof_table_through_the_abi() {
    let expect = [
        (FrStructure::ConcreteLike, FrPropertyType::Communal, FrFireproof::M),
        (FrStructure::ConcreteLike, FrPropertyType::NonCommunal, FrFireproof::M),
        (FrStructure::SteelLike, FrPropertyType::Communal, FrFireproof::M),
        (FrStructure::SteelLike, FrPropertyType::NonCommunal, FrFireproof::T),
        (FrStructure::WoodenLike, FrPropertyType::Communal, FrFireproof::H),
        (FrStructure::WoodenLike, FrPropertyType::NonCommunal, FrFireproof::H),
    ];
    for (s, p, f) in expect {
        let mut out = u32::MAX;
        assert_eq!(unsafe { fr_fireproof_class(s as u32, p as u32, &mut out) }, FrStatus::Ok);
        assert_eq!(out, f as u32);
    }
    let mut out = 0;
    assert_eq!(unsafe { fr_fireproof_class(3, 0, &mut out) }, FrStatus::InvalidArgument);
    assert!(last_error().contains("structure"));
    assert_eq!(unsafe { fr_fireproof_class(0, 0, ptr::null_mut()) }, FrStatus::NullPointer);
}

#[test]
fn loss_and_metrics() {
    let mut v = 0.0;
    let l = [4.0];
    let s = [(4.0f64).ln()];
    assert_eq!(unsafe { fr_combined_loss(l.as_ptr(), s.as_ptr(), 1, &mut v) }, FrStatus::Ok);
    assert!((v - (0.5 + 2f64.ln())).abs() < 1e-12);
    let bad = [f64::NAN];
    assert_eq!(unsafe { fr_combined_loss(bad.as_ptr(), s.as_ptr(), 1, &mut v) }, FrStatus::NonFinite);

    let mut r = FrRegression { mae: 0.0, rmse: 0.0, medae: 0.0, n: 0 };
    let p = [2002.0, 2006.0];
    let t = [2000.0, 2010.0];
    assert_eq!(unsafe { fr_regression_metrics(p.as_ptr(), t.as_ptr(), 2, &mut r) }, FrStatus::Ok);
    assert_eq!((r.mae, r.medae, r.n), (3.0, 3.0, 2));
    assert_eq!(unsafe { fr_regression_metrics(p.as_ptr(), t.as_ptr(), 0, &mut r) }, FrStatus::InvalidArgument);
    assert_eq!(unsafe { fr_regression_metrics(ptr::null(), t.as_ptr(), 2, &mut r) }, FrStatus::NullPointer);
    assert_eq!(fr_hamming(0, u64::MAX), 64);
}

#[test]
fn model_handle_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, img) = fixture(dir.path());
    let mut handle: *mut FrModel = ptr::null_mut();
    assert_eq!(unsafe { fr_model_load(cstr(&ckpt).as_ptr(), &mut handle) }, FrStatus::Ok);
    assert!(!handle.is_null());
    assert!(unsafe { fr_model_param_count(handle) } > 0);

    let mut from_file = unsafe { std::mem::zeroed::<FrPrediction>() };
    assert_eq!(
        unsafe { fr_model_predict_file(handle, cstr(&img).as_ptr(), &mut from_file) },
        FrStatus::Ok
    );
    let mut expect = 0;
    unsafe { fr_fireproof_class(from_file.structure, from_file.ptype, &mut expect) };
    assert_eq!(expect, from_file.fireproof);

    let rgb = image::open(&img).unwrap().to_rgb8();
    let mut from_buf = unsafe { std::mem::zeroed::<FrPrediction>() };
    assert_eq!(
        unsafe { fr_model_predict_rgb(handle, rgb.as_ptr(), rgb.width(), rgb.height(), &mut from_buf) },
        FrStatus::Ok
    );
    assert_eq!(from_file, from_buf);
    assert_eq!(
        unsafe { fr_model_predict_rgb(handle, rgb.as_ptr(), 0, 4, &mut from_buf) },
        FrStatus::InvalidArgument
    );

    let mut h = 0u64;
    assert_eq!(unsafe { fr_phash_file(cstr(&img).as_ptr(), &mut h) }, FrStatus::Ok);
    assert_eq!(h, facade_risk::dedup::phash_file(&img).unwrap().0);
    unsafe { fr_model_free(handle) };
    unsafe { fr_model_free(ptr::null_mut()) };
}

#[test]
fn load_errors_carry_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut handle: *mut FrModel = ptr::null_mut();
    let missing = cstr(&dir.path().join("none.ckpt"));
    assert_eq!(unsafe { fr_model_load(missing.as_ptr(), &mut handle) }, FrStatus::Io);
    assert!(handle.is_null());
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(unsafe { fr_model_load(cstr(&junk).as_ptr(), &mut handle) }, FrStatus::Checkpoint);
    assert!(last_error().contains("junk.ckpt"));
    let mut h = 0;
    assert_eq!(unsafe { fr_phash_file(cstr(&junk).as_ptr(), &mut h) }, FrStatus::ImageDecode);
}

#[test]
fn header_is_generated_and_compiles_with_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include/facade_risk.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["fr_model_load", "fr_model_free", "fr_fireproof_class", "FR_STATUS_OK", "typedef struct FrModel FrModel"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }

    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = deps.parent().unwrap().join("libfacade_risk_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.exists() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C toolchain or static library; skipping C link check");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C smoke program failed to build");
    let (ckpt, img) = fixture(dir.path());
    let out = Command::new(&exe).arg(&ckpt).arg(&img).output().unwrap();
    assert!(out.status.success(), "C smoke exited with {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("year="));
}
