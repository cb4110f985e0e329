//! The generated header must exist, export the public surface, and be
//! valid C (checked with the system compiler when one is available).

use std::fs;
use std::path::Path;
use std::process::Command;

#[test]
fn header_exports_the_surface() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/auxlin.h");
    let text = fs::read_to_string(&header).expect("include/auxlin.h must be generated");
    for needle in [
        "typedef struct AuxlinEnsemble AuxlinEnsemble;",
        "AUXLIN_STATUS_OK",
        "auxlin_ensemble_new",
        "auxlin_ensemble_free",
        "auxlin_closed_form_error",
        "auxlin_utility_condition",
        "auxlin_optimal_weights",
        "auxlin_estimated_optimal_weights",
        "auxlin_gen_bound",
        "auxlin_status_message",
        "auxlin_version",
    ] {
        assert!(text.contains(needle), "header is missing {needle}");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let probe = dir.join("../../target/ffi_header_probe.c");
    fs::write(
        &probe,
        "#include \"auxlin.h\"\nint main(void) { return (int)AUXLIN_STATUS_OK; }\n",
    )
    .unwrap();
    let result = Command::new("cc")
        .arg("-std=c99")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&probe)
        .output();
    match result {
        Ok(out) => assert!(
            out.status.success(),
            "header failed to compile:\n{}",
            String::from_utf8_lossy(&out.stderr)
        ),
        Err(_) => eprintln!("no C compiler on PATH; skipping syntax check"),
    }
}
