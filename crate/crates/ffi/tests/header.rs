use std::path::PathBuf;
use std::process::Command;

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include").join("conecal.h")
}

fn compiles(compiler: &str, lang: &str) -> Option<bool> {
    let status = Command::new(compiler)
        .args(["-x", lang, "-fsyntax-only", "-Wall", "-Werror"])
        .arg(header())
        .status()
        .ok()?;
    Some(status.success())
}

#[test]
fn header_exports_the_api() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in [
        "conecal_last_error_message",
        "conecal_version",
        "conecal_scene_from_json",
        "conecal_scene_free",
        "conecal_scene_pose_count",
        "conecal_trace",
        "conecal_raycast",
        "conecal_distortion_vector",
        "conecal_project_corner",
        "conecal_rmse",
        "conecal_calibrate",
        "conecal_string_free",
        "CONECAL_STATUS_DIVERGED",
        "typedef struct ConecalScene ConecalScene;",
    ] {
        assert!(text.contains(name), "missing {name}");
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    match compiles("cc", "c") {
        Some(ok) => assert!(ok, "header does not compile as C"),
        None => eprintln!("no C compiler, skipping"),
    }
    if let Some(ok) = compiles("c++", "c++") {
        assert!(ok, "header does not compile as C++");
    }
}

const SMOKE: &str = r#"
#include <stdio.h>
#include <string.h>
#include "conecal.h"

int main(void) {
    double out[2];
    ConecalScene *scene = NULL;
    if (conecal_raycast(NULL, 0, 1.0, 1.0, out) != CONECAL_STATUS_NULL_POINTER) return 1;
    if (strstr(conecal_last_error_message(), "scene") == NULL) return 2;
    if (conecal_scene_from_json("{", &scene) != CONECAL_STATUS_JSON || scene != NULL) return 3;
    if (conecal_scene_pose_count(NULL) != 0) return 4;
    conecal_scene_free(NULL);
    printf("%s\n", conecal_version());
    return 0;
}
"#;

#[test]
fn c_program_links_against_the_static_library() {
    let Some(lib_dir) = std::env::current_exe().ok().and_then(|p| Some(p.parent()?.parent()?.to_path_buf())) else {
        return;
    };
    let lib = lib_dir.join("libconecal_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built, skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let exe = dir.path().join("smoke");
    std::fs::write(&src, SMOKE).unwrap();
    let include = header().parent().unwrap().to_path_buf();
    let Ok(status) = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
    else {
        eprintln!("no C compiler, skipping");
        return;
    };
    assert!(status.success(), "linking failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "smoke program exited with {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
