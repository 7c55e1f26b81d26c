use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "heed.h"

int main(void) {
    double feats[2 * 2 * 2] = {1, 0, 0, 1, 1, 1, -1, 0};
    double rho[4], tilde[4], w[6];
    if (heed_patch_density(feats, 2, 2, 2, rho, tilde) != HEED_STATUS_OK) return 1;
    if (heed_sequence_weights(rho, 4, 2, 0.5, 1.0, w) != HEED_STATUS_OK) return 2;
    double sum = 0;
    for (int i = 0; i < 6; i++) sum += w[i];
    if (sum < 5.999999 || sum > 6.000001) return 3;

    HeedCache *c = heed_cache_new();
    if (heed_cache_push(c, 1, tilde, 4) != HEED_STATUS_OK) return 4;
    size_t need = 0;
    if (heed_cache_encode(c, NULL, 0, &need) != HEED_STATUS_BUFFER_TOO_SMALL) return 5;
    if (heed_last_error_message() == NULL) return 6;
    heed_cache_free(c);

    if (heed_patch_density(NULL, 2, 2, 2, rho, NULL) != HEED_STATUS_NULL_POINTER) return 7;
    printf("%s %zu\n", heed_version(), need);
    return 0;
}
"#;

fn include_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

fn compiler() -> String {
    std::env::var("CC").unwrap_or_else(|_| "cc".into())
}

#[test]
fn header_is_current() {
    let text = std::fs::read_to_string(include_dir().join("heed.h")).unwrap();
    for name in [
        "heed_last_error_message",
        "heed_version",
        "heed_patch_density",
        "heed_sequence_weights",
        "heed_residual_loss",
        "heed_kd_loss",
        "heed_cache_new",
        "heed_cache_free",
        "heed_cache_push",
        "heed_cache_decode",
        "heed_cache_encode",
        "heed_cache_len",
        "heed_cache_entry",
        "heed_cache_get",
        "HEED_STATUS_PANIC",
        "typedef struct HeedCache HeedCache",
    ] {
        assert!(text.contains(name), "{name} missing from heed.h");
    }
}

#[test]
fn c_program_links_and_runs() {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("heed_ffi_c");
    std::fs::create_dir_all(&dir).unwrap();
    let src = dir.join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();

    let status = Command::new(compiler())
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(include_dir())
        .arg(&src)
        .status()
        .expect("C compiler");
    assert!(status.success(), "header does not compile as C99");

    // target/<profile>/deps/<this test> -> target/<profile>
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let archive = profile_dir.join("libheed_ffi.a");
    assert!(
        archive.exists(),
        "static library not built at {}",
        archive.display()
    );
    let exe = dir.join("main");
    let status = Command::new(compiler())
        .args(["-std=c99", "-I"])
        .arg(include_dir())
        .arg(&src)
        .arg(&archive)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(
        status.success(),
        "linking against the static library failed"
    );
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "C program exited with {:?}",
        out.status.code()
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with(env!("CARGO_PKG_VERSION")), "{stdout}");
}
