use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use icb_core::cli::{self, RunConfig};
use icb_ffi::*;

const SMALL: &str = "model_dim=16\nheads=2\nblocks=2\nsteps=2\nref_height=4\nref_width=4\ntarget_height=4\ntarget_width=4\n";

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = icb_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn small_config() -> *mut IcbConfig {
    let mut cfg = ptr::null_mut();
    let text = cstr(SMALL);
    assert_eq!(
        unsafe { icb_config_parse(text.as_ptr(), &mut cfg) },
        IcbStatus::Ok
    );
    cfg
}

#[test]
fn insert_matches_core() {
    let cfg = small_config();
    let mut res = ptr::null_mut();
    assert_eq!(unsafe { icb_insert(cfg, &mut res) }, IcbStatus::Ok);

    let (mut h, mut w, mut c) = (0, 0, 0);
    assert_eq!(
        unsafe { icb_result_dims(res, &mut h, &mut w, &mut c) },
        IcbStatus::Ok
    );
    let mut buf = vec![0.0f32; h * w * c];
    assert_eq!(
        unsafe { icb_result_copy_generated(res, buf.as_mut_ptr(), buf.len()) },
        IcbStatus::Ok
    );

    let core_cfg = cli::parse_config_str(SMALL, std::path::Path::new("x")).unwrap();
    let direct = cli::run_insert(&core_cfg, cli::load_inputs(&core_cfg).unwrap()).unwrap();
    assert_eq!(buf, direct.output.generated.data());

    let mut hex = [0 as std::ffi::c_char; 65];
    assert_eq!(
        unsafe { icb_result_sha256(res, hex.as_mut_ptr(), hex.len()) },
        IcbStatus::Ok
    );
    let hex = unsafe { CStr::from_ptr(hex.as_ptr()) }.to_str().unwrap();
    assert_eq!(hex, direct.generated_sha256());

    let mut short = [0 as std::ffi::c_char; 64];
    assert_eq!(
        unsafe { icb_result_sha256(res, short.as_mut_ptr(), short.len()) },
        IcbStatus::BufferTooSmall
    );

    let dir = tempfile::tempdir().unwrap();
    let d = cstr(dir.path().to_str().unwrap());
    assert_eq!(unsafe { icb_result_write(res, d.as_ptr()) }, IcbStatus::Ok);
    let written = std::fs::read(dir.path().join("generated.icbt")).unwrap();
    assert_eq!(cli::sha256_hex(&written), hex);

    unsafe {
        icb_result_free(res);
        icb_config_free(cfg);
    }
}

#[test]
fn config_errors_are_reported() {
    let cfg = small_config();
    let (k, v) = (cstr("alpha1"), cstr("-1"));
    assert_eq!(
        unsafe { icb_config_set(cfg, k.as_ptr(), v.as_ptr()) },
        IcbStatus::Config
    );
    assert!(last_error().contains("alpha1"));
    let (k, v) = (cstr("heads"), cstr("3"));
    assert_eq!(
        unsafe { icb_config_set(cfg, k.as_ptr(), v.as_ptr()) },
        IcbStatus::Config
    );
    let (k, v) = (cstr("alpha2"), cstr("0.25"));
    assert_eq!(
        unsafe { icb_config_set(cfg, k.as_ptr(), v.as_ptr()) },
        IcbStatus::Ok
    );

    let mut out = ptr::null_mut();
    let bad = cstr("colour=red");
    assert_eq!(
        unsafe { icb_config_parse(bad.as_ptr(), &mut out) },
        IcbStatus::Config
    );
    assert!(out.is_null());
    let missing = cstr("/nonexistent/icb.cfg");
    assert_eq!(
        unsafe { icb_config_load(missing.as_ptr(), &mut out) },
        IcbStatus::Io
    );
    assert_eq!(
        unsafe { icb_config_parse(ptr::null(), &mut out) },
        IcbStatus::NullPointer
    );
    let mut res = ptr::null_mut();
    assert_eq!(
        unsafe { icb_insert(ptr::null(), &mut res) },
        IcbStatus::NullPointer
    );
    unsafe {
        icb_config_free(cfg);
        icb_config_free(ptr::null_mut());
        icb_result_free(ptr::null_mut());
    }
}

#[test]
fn empty_mask_has_no_score() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        model_dim: 16,
        heads: 2,
        blocks: 1,
        steps: 2,
        ..RunConfig::default()
    };
    cli::cmd_gen_inputs(&cfg, 3, dir.path()).unwrap();
    let zero = icb_core::layout::BinaryMask::zeros(8, 8);
    cli::write_tensor(&dir.path().join("mask.icbt"), &(&zero).into()).unwrap();
    let p = |n: &str| dir.path().join(n).display().to_string();
    let text = format!(
        "model_dim=16\nheads=2\nblocks=1\nsteps=2\nprompt={}\nreference={}\ntarget={}\nmask={}\n",
        p("prompt.icbt"),
        p("reference.icbt"),
        p("target.icbt"),
        p("mask.icbt")
    );
    let text = cstr(&text);
    let mut c = ptr::null_mut();
    let mut res = ptr::null_mut();
    let mut score = 0.0;
    unsafe {
        assert_eq!(icb_config_parse(text.as_ptr(), &mut c), IcbStatus::Ok);
        assert_eq!(icb_insert(c, &mut res), IcbStatus::Ok);
        assert_eq!(
            icb_result_proxy_score(res, &mut score),
            IcbStatus::UndefinedScore
        );
        icb_result_free(res);
        icb_config_free(c);
    }
}

#[test]
fn verify_status() {
    assert_eq!(icb_verify(5, 1, false), IcbStatus::Ok);
    assert_eq!(icb_verify(5, 1, true), IcbStatus::VerificationFailed);
    assert!(last_error().contains("FAIL"));
}

fn c_compiler() -> Option<&'static str> {
    ["cc", "gcc", "clang"].into_iter().find(|c| {
        Command::new(c)
            .arg("--version")
            .output()
            .is_ok_and(|o| o.status.success())
    })
}

#[test]
fn c_program_links_against_header() {
    let Some(cc) = c_compiler() else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // tests run from target/<profile>/deps
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = profile_dir.join("libicb_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let hex = String::from_utf8(out.stdout).unwrap();
    assert_eq!(hex.trim().len(), 64);
}
