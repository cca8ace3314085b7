//! Debuggee programs compiled at build time.
//!
//! Every fixture is built with frame pointers and without optimization so
//! that symbol layout, prologues and branch shapes stay predictable. Most
//! are non-PIE; `loop_pie` and the static variants cover the other layouts.

use std::path::{Path, PathBuf};

/// Directory holding the compiled fixtures.
pub fn dir() -> &'static Path {
    Path::new(env!("SCRIPTDBG_FIXTURE_DIR"))
}

/// Absolute path of a compiled fixture.
pub fn path(name: &str) -> PathBuf {
    dir().join(name)
}

/// Branch map of the `coverage` fixture, derived from its disassembly.
pub fn coverage_map() -> PathBuf {
    dir().join("coverage.map")
}
