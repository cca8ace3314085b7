//! Compiles the fixture programs under `c/` with the host C compiler and
//! derives the coverage fixture's branch map with `objdump`.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const COMMON: &[&str] = &["-O0", "-g0", "-fno-omit-frame-pointer"];

struct Fixture {
    name: &'static str,
    sources: &'static [&'static str],
    flags: &'static [&'static str],
    x86_only: bool,
}

const fn fx(name: &'static str, sources: &'static [&'static str], flags: &'static [&'static str]) -> Fixture {
    Fixture { name, sources, flags, x86_only: false }
}

const FIXTURES: &[Fixture] = &[
    fx("loop", &["loop.c"], &["-no-pie"]),
    fx("loop_pie", &["loop.c"], &["-pie", "-fPIE"]),
    fx("loop_static", &["loop.c"], &["-static", "-no-pie"]),
    fx("loop_exported", &["loop.c"], &["-no-pie", "-rdynamic"]),
    fx("argdump", &["argdump.c"], &["-no-pie"]),
    fx("sleeper", &["sleeper.c"], &["-no-pie", "-pthread"]),
    fx("writes", &["writes.c"], &["-no-pie"]),
    fx("syscall_script", &["syscall_script.c"], &["-static", "-no-pie"]),
    fx("threads", &["threads.c"], &["-no-pie", "-pthread"]),
    fx("clone1", &["clone1.c"], &["-no-pie", "-pthread"]),
    fx("signals", &["signals.c"], &["-no-pie"]),
    fx("echo", &["echo.c"], &["-no-pie"]),
    fx("overflow", &["overflow.c"], &["-no-pie", "-fno-stack-protector", "-Wno-stringop-overflow"]),
    fx("calls", &["calls.c"], &["-no-pie"]),
    fx("coverage", &["coverage.c"], &["-no-pie"]),
    fx("bench_bp", &["bench_bp.c"], &["-no-pie"]),
    fx("bench_sys", &["bench_sys.c"], &["-no-pie"]),
    fx("files", &["files.c"], &["-no-pie"]),
    fx("files_static", &["files.c"], &["-static", "-no-pie"]),
    fx("anon_map", &["anon_map.c"], &["-no-pie"]),
    fx("watch", &["watch.c"], &["-no-pie"]),
    fx("ticker", &["ticker.c"], &["-no-pie"]),
    Fixture {
        name: "first_write",
        sources: &["first_write.S"],
        flags: &["-nostdlib", "-static", "-no-pie"],
        x86_only: true,
    },
];

fn run(cmd: &mut Command) {
    let status = cmd.status().unwrap_or_else(|e| panic!("failed to run {cmd:?}: {e}"));
    assert!(status.success(), "command failed: {cmd:?}");
}

fn compile(cc: &str, src_dir: &Path, out: &Path, sources: &[&str], flags: &[&str]) {
    let mut cmd = Command::new(cc);
    cmd.args(COMMON).args(flags);
    for s in sources {
        cmd.arg(src_dir.join(s));
    }
    cmd.arg("-o").arg(out);
    run(&mut cmd);
}

/// One line per conditional jump inside `br0`..`br9`:
/// `<branch> <taken target> <fallthrough>`, addresses in hex.
fn branch_map(binary: &Path) -> String {
    let output = Command::new("objdump")
        .args(["-d", "--no-show-raw-insn"])
        .arg(binary)
        .output()
        .expect("objdump is required to derive the coverage branch map");
    assert!(output.status.success(), "objdump failed");
    let text = String::from_utf8_lossy(&output.stdout);

    let mut map = String::from("# <branch_addr> <taken_target> <fallthrough_target>\n");
    let mut in_branch_fn = false;
    let mut pending: Option<(u64, u64)> = None;
    for line in text.lines() {
        if line.ends_with(">:") {
            let name = line.split('<').nth(1).and_then(|s| s.strip_suffix(">:")).unwrap_or("");
            in_branch_fn = name.len() == 3 && name.starts_with("br");
            continue;
        }
        if !in_branch_fn {
            continue;
        }
        let mut parts = line.trim().splitn(2, ':');
        let (Some(addr), Some(rest)) = (parts.next(), parts.next()) else {
            continue;
        };
        let Ok(addr) = u64::from_str_radix(addr.trim(), 16) else {
            continue;
        };
        if let Some((branch, taken)) = pending.take() {
            map.push_str(&format!("{branch:#x} {taken:#x} {addr:#x}\n"));
        }
        let mut insn = rest.split_whitespace();
        let mnemonic = insn.next().unwrap_or("");
        if mnemonic.starts_with('j') && mnemonic != "jmp" {
            let target = insn
                .next()
                .and_then(|t| u64::from_str_radix(t, 16).ok())
                .expect("conditional jump without a direct target");
            pending = Some((addr, target));
        }
    }
    map
}

fn main() {
    let out_dir = PathBuf::from(env::var("OUT_DIR").unwrap());
    let src_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap()).join("c");
    let cc = env::var("CC").unwrap_or_else(|_| "cc".to_string());
    let target_arch = env::var("CARGO_CFG_TARGET_ARCH").unwrap();
    let bin_dir = out_dir.join("bin");
    fs::create_dir_all(&bin_dir).unwrap();

    println!("cargo:rerun-if-changed=c");
    println!("cargo:rerun-if-env-changed=CC");

    for f in FIXTURES {
        if f.x86_only && target_arch != "x86_64" {
            continue;
        }
        compile(&cc, &src_dir, &bin_dir.join(f.name), f.sources, f.flags);
    }

    compile(&cc, &src_dir, &bin_dir.join("libshadow.so"), &["shadow_lib.c"], &["-shared", "-fPIC"]);
    let mut cmd = Command::new(&cc);
    cmd.args(COMMON)
        .args(["-no-pie"])
        .arg(src_dir.join("shadow_main.c"))
        .arg("-L")
        .arg(&bin_dir)
        .args(["-lshadow", "-Wl,-rpath,$ORIGIN", "-o"])
        .arg(bin_dir.join("shadow_main"));
    run(&mut cmd);

    run(Command::new("strip")
        .arg("--strip-all")
        .arg("-o")
        .arg(bin_dir.join("loop_stripped"))
        .arg(bin_dir.join("loop_exported")));

    fs::write(bin_dir.join("coverage.map"), branch_map(&bin_dir.join("coverage"))).unwrap();

    println!("cargo:rustc-env=SCRIPTDBG_FIXTURE_DIR={}", bin_dir.display());
}
