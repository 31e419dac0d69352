use std::path::PathBuf;
use std::process::Command;

/// Directory holding the built `libconformal_decode_ffi.a`.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent()
        .and_then(|deps| deps.parent())
        .unwrap()
        .to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib_dir = artifact_dir();
    assert!(
        lib_dir.join("libconformal_decode_ffi.a").exists(),
        "static library missing from {}",
        lib_dir.display()
    );
    let out_dir = tempfile_dir();
    let exe = out_dir.join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(lib_dir.join("libconformal_decode_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler runs");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    // scores 0.9 and 0.6; rank ceil(3 * 0.6) = 2 picks the larger
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .starts_with("0.90000000000000002 "));
    std::fs::remove_dir_all(out_dir).unwrap();
}

fn tempfile_dir() -> PathBuf {
    let d = std::env::temp_dir().join(format!("cd-smoke-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/conformal_decode.h"),
    )
    .unwrap();
    for name in [
        "cd_dataset_read",
        "cd_model_fit",
        "cd_model_qhat",
        "cd_conformal_set",
        "cd_decode_step",
        "cd_last_error_message",
        "typedef struct CdModel CdModel;",
        "CD_STATUS_BUFFER_TOO_SMALL = 5",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
