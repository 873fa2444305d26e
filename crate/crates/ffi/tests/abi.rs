use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use d2dmoe_ffi::*;

const CONFIG: &str = r#"{"vocab_size": 256, "context_length": 8, "num_layers": 1, "model_dim": 16,
  "num_heads": 2, "expansion_factor": 2, "ffn_kind": "standard", "activation": "relu",
  "task_head": {"kind": "lm"}}"#;

fn build() -> *mut D2dModel {
    let cfg = CString::new(CONFIG).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { d2d_model_build(cfg.as_ptr(), 7, &mut m) },
        D2dStatus::Ok
    );
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = d2d_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn forward_and_buffer_protocol() {
    let m = build();
    let ids: Vec<u32> = (0..16).collect();
    let mut len = 0usize;
    let st = unsafe {
        d2d_model_forward(
            m,
            ids.as_ptr(),
            2,
            8,
            ptr::null_mut(),
            &mut len,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, D2dStatus::BufferTooSmall);
    assert_eq!(len, 16 * 256);
    let mut logits = vec![0f32; len];
    let mut flops = 0f64;
    let st = unsafe {
        d2d_model_forward(
            m,
            ids.as_ptr(),
            2,
            8,
            logits.as_mut_ptr(),
            &mut len,
            &mut flops,
        )
    };
    assert_eq!(st, D2dStatus::Ok);
    assert!(logits.iter().all(|v| v.is_finite()));
    // 4·d² + 2·seq·d + 2·e·d² + d·vocab with d = 16, seq = 8, e = 2.
    assert_eq!(
        flops,
        (4 * 256 + 2 * 8 * 16 + 2 * 2 * 256 + 16 * 256) as f64
    );
    unsafe { d2d_model_free(m) };
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = build();
    assert_eq!(unsafe { d2d_model_save(m, path.as_ptr()) }, D2dStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(
        unsafe { d2d_model_load(path.as_ptr(), &mut back) },
        D2dStatus::Ok
    );
    let mut sites = 99usize;
    assert_eq!(
        unsafe { d2d_model_moe_sites(back, &mut sites) },
        D2dStatus::Ok
    );
    assert_eq!(sites, 0);
    let mut dim = 0usize;
    assert_eq!(
        unsafe { d2d_model_output_dim(back, &mut dim) },
        D2dStatus::Ok
    );
    assert_eq!(dim, 256);
    unsafe {
        d2d_model_free(m);
        d2d_model_free(back);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { d2d_model_load(ptr::null(), &mut out) },
        D2dStatus::NullPointer
    );
    assert!(last_error().contains("null"));

    let missing = CString::new("/nonexistent/dir/m.ckpt").unwrap();
    assert_eq!(
        unsafe { d2d_model_load(missing.as_ptr(), &mut out) },
        D2dStatus::Io
    );

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { d2d_model_load(junk.as_ptr(), &mut out) },
        D2dStatus::Format
    );
    assert!(out.is_null());

    let bad = CString::new(r#"{"vocab_size": 0}"#).unwrap();
    assert_eq!(
        unsafe { d2d_model_build(bad.as_ptr(), 0, &mut out) },
        D2dStatus::Invalid
    );

    let m = build();
    let ids = [999u32; 8];
    let mut len = 8 * 256;
    let mut logits = vec![0f32; len];
    let st = unsafe {
        d2d_model_forward(
            m,
            ids.as_ptr(),
            1,
            8,
            logits.as_mut_ptr(),
            &mut len,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, D2dStatus::Invalid);
    assert!(last_error().contains("out of range"));
    // Without MoE sites a policy change touches nothing.
    assert_eq!(unsafe { d2d_model_set_top_k(m, 1) }, D2dStatus::Ok);
    unsafe { d2d_model_free(m) };
    unsafe { d2d_model_free(ptr::null_mut()) };
}

#[test]
fn flops_ratio_spot_value() {
    let mut r = 0.0;
    assert_eq!(
        unsafe { d2d_flops_ratio(64, 4, 16, 8, 4.0, &mut r) },
        D2dStatus::Ok
    );
    assert_eq!(r, 0.26953125);
    assert_eq!(
        unsafe { d2d_flops_ratio(64, 4, 7, 8, 4.0, &mut r) },
        D2dStatus::Invalid
    );
    assert_eq!(
        unsafe { d2d_flops_ratio(64, 4, 16, 8, 17.0, &mut r) },
        D2dStatus::Invalid
    );
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(d2d_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/d2dmoe.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in [
        "d2d_model_load",
        "d2d_model_forward",
        "d2d_model_free",
        "d2d_last_error",
        "typedef struct D2dModel D2dModel",
    ] {
        assert!(text.contains(f), "header lacks {f}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"d2dmoe.h\"\nint main(void) { D2dModel *m = 0; size_t n = 0;\n\
         return d2d_model_output_dim(m, &n) == D2D_STATUS_NULL_POINTER ? 0 : 1; }\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args([
            "-std=c99",
            "-Wall",
            "-Werror",
            "-fsyntax-only",
            "-I",
            concat!(env!("CARGO_MANIFEST_DIR"), "/include"),
        ])
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler; skipped syntax check");
        return;
    };
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
