use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use sae_sensitivity::fixture;
use sae_sensitivity::linalg::Matrix;
use sae_sensitivity::sae::max_decoder_cosine;
use sae_sensitivity_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sse_last_error()) }.to_string_lossy().into_owned()
}

fn write_sae(dir: &Path) -> (CString, sae_sensitivity::sae::SaeModel) {
    let tok = fixture::tokenizer();
    let backend = fixture::backend(&tok);
    let model = fixture::relu_sae(&tok, &backend);
    let path = dir.join("sae.safetensors");
    model.save(&path).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), model)
}

#[test]
fn load_encode_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = write_sae(dir.path());
    let mut sae = ptr::null_mut();
    assert_eq!(unsafe { sse_sae_load(path.as_ptr(), &mut sae) }, SseStatus::Ok);
    assert!(!sae.is_null());
    let (width, d_model) = unsafe { (sse_sae_width(sae), sse_sae_d_model(sae)) };
    assert_eq!((width, d_model), (model.width, model.d_model));

    let n = 3;
    let input: Vec<f32> = (0..n * d_model).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    let mut out = vec![0f32; n * width];
    let status = unsafe { sse_sae_encode(sae, input.as_ptr(), n, d_model, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, SseStatus::Ok, "{}", last_error());
    let expected = model.encode(&Matrix::from_vec(n, d_model, input.clone()).unwrap()).unwrap();
    assert_eq!(out, expected.as_slice());

    let mut cos = 0.0;
    assert_eq!(unsafe { sse_sae_max_decoder_cosine(sae, 3, &mut cos) }, SseStatus::Ok);
    assert_eq!(cos, max_decoder_cosine(&model, 3).unwrap());

    let bad = unsafe { sse_sae_max_decoder_cosine(sae, width as u32, &mut cos) };
    assert_eq!(bad, SseStatus::OutOfRange);
    assert!(!last_error().is_empty());

    let short = unsafe { sse_sae_encode(sae, input.as_ptr(), n, d_model, out.as_mut_ptr(), 1) };
    assert_eq!(short, SseStatus::Shape);
    let wrong_dim = unsafe { sse_sae_encode(sae, input.as_ptr(), 1, d_model + 1, out.as_mut_ptr(), out.len()) };
    assert_eq!(wrong_dim, SseStatus::Shape);

    unsafe { sse_sae_free(sae) };
}

#[test]
fn load_reports_missing_file() {
    let path = CString::new("/nonexistent/sae.safetensors").unwrap();
    let mut sae = ptr::null_mut();
    assert_eq!(unsafe { sse_sae_load(path.as_ptr(), &mut sae) }, SseStatus::Io);
    assert!(sae.is_null());
    assert!(last_error().contains("nonexistent"), "{}", last_error());
    assert_eq!(unsafe { sse_sae_load(ptr::null(), &mut sae) }, SseStatus::NullPointer);
}

#[test]
fn null_handles_are_harmless() {
    unsafe {
        sse_sae_free(ptr::null_mut());
        assert_eq!(sse_sae_width(ptr::null()), 0);
        assert_eq!(sse_sae_d_model(ptr::null()), 0);
        let mut out = 0.0;
        assert_eq!(sse_sae_max_decoder_cosine(ptr::null(), 0, &mut out), SseStatus::NullPointer);
    }
}

#[test]
fn lcs_through_c_abi() {
    let a = [1u32, 2, 3, 4, 5];
    let b = [9u32, 2, 3, 4, 7];
    let mut out = 0usize;
    unsafe {
        assert_eq!(sse_lcs(a.as_ptr(), a.len(), b.as_ptr(), b.len(), &mut out), SseStatus::Ok);
        assert_eq!(out, 3);
        assert_eq!(sse_lcs_ending_at(a.as_ptr(), a.len(), 2, b.as_ptr(), b.len(), &mut out), SseStatus::Ok);
        assert_eq!(out, 2);
        assert_eq!(sse_lcs(ptr::null(), 0, b.as_ptr(), b.len(), &mut out), SseStatus::Ok);
        assert_eq!(out, 0);
        assert_eq!(
            sse_lcs_ending_at(a.as_ptr(), a.len(), 5, b.as_ptr(), b.len(), &mut out),
            SseStatus::OutOfRange
        );
        assert_eq!(sse_lcs(ptr::null(), 2, b.as_ptr(), b.len(), &mut out), SseStatus::NullPointer);
    }
}

#[test]
fn spearman_through_c_abi() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [2.0, 1.0, 4.0, 3.0, 5.0];
    let mut rho = 0.0;
    unsafe {
        assert_eq!(sse_spearman(x.as_ptr(), y.as_ptr(), 5, &mut rho), SseStatus::Ok);
        assert!((rho - 0.8).abs() < 1e-12);
        let flat = [1.0; 5];
        assert_eq!(sse_spearman(x.as_ptr(), flat.as_ptr(), 5, &mut rho), SseStatus::Undefined);
        assert_eq!(sse_spearman(x.as_ptr(), y.as_ptr(), 1, &mut rho), SseStatus::InvalidArgument);
    }
    assert!(!last_error().is_empty());
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(sse_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sae_sensitivity.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "sse_last_error",
        "sse_version",
        "sse_sae_load",
        "sse_sae_free",
        "sse_sae_width",
        "sse_sae_d_model",
        "sse_sae_encode",
        "sse_sae_max_decoder_cosine",
        "sse_lcs",
        "sse_lcs_ending_at",
        "sse_spearman",
        "typedef struct SseSae SseSae",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler found; skipped syntax check");
        return;
    };
    assert!(status.success(), "header does not compile as C");
}
