use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use scriptdbg_tools::bench::{run_bench, BenchConfig, BenchMode};
use scriptdbg_tools::coverage::{parse_branch_map, run_coverage, CoverageReport};
use scriptdbg_tools::cyclic::{cyclic, cyclic_find, cyclic_find_value, DEFAULT_WIDTH};
use scriptdbg_tools::session::exit_code;
use scriptdbg_tools::trace::run_trace;
use scriptdbg_tools::triage::triage;
use scriptdbg_tools::{Result, RunOptions, Target, ToolError};

#[derive(Parser)]
#[command(name = "scriptdbg", version, about = "Debugger-backed analysis tools for Linux executables")]
struct Cli {
    /// Leave address space randomization enabled in the tracee.
    #[arg(long, global = true)]
    keep_aslr: bool,
    /// Kill the tracee after this many seconds.
    #[arg(long, global = true, value_name = "SEC")]
    timeout: Option<f64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Log every completed syscall.
    Trace {
        /// Comma-separated syscall names or numbers.
        #[arg(short = 'e', long, value_delimiter = ',')]
        filter: Option<Vec<String>>,
        /// Log file; standard error by default.
        #[arg(short, long)]
        output: Option<PathBuf>,
        binary: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
    /// Measure branch coverage of one run.
    Coverage {
        /// Branch map: `<branch> <taken> <fallthrough>` per line.
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Union with an existing report instead of replacing it.
        #[arg(long)]
        merge: bool,
        binary: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
    /// Analyse a crashing stdin payload and locate the fp and pc offsets.
    Triage {
        /// Payload file; a cyclic pattern of --max-len bytes by default.
        #[arg(long)]
        payload: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        max_len: usize,
        binary: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
    /// Time breakpoint or syscall handling over repeated runs.
    Bench {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 1000)]
        events: u64,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        /// CSV output; stats go to `<out>.stats`.
        #[arg(long)]
        out: PathBuf,
        /// Also time an equivalent scripted GDB session.
        #[arg(long)]
        compare_gdb: bool,
        #[arg(long, default_value = "gdb")]
        gdb: PathBuf,
        /// GDB sessions to time; defaults to --runs.
        #[arg(long)]
        gdb_runs: Option<usize>,
        #[arg(long)]
        fixture_dir: Option<PathBuf>,
    },
    /// Print a cyclic pattern.
    Cyclic {
        length: usize,
        #[arg(short = 'n', long, default_value_t = DEFAULT_WIDTH)]
        width: usize,
    },
    /// Find the offset of a window (text, or a 0x-prefixed little-endian value).
    CyclicFind {
        window: String,
        #[arg(short = 'n', long, default_value_t = DEFAULT_WIDTH)]
        width: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Breakpoint,
    Syscall,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("scriptdbg: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let opts = RunOptions {
        keep_aslr: cli.keep_aslr,
        timeout: cli.timeout.map(Duration::from_secs_f64),
        ..RunOptions::default()
    };
    match cli.command {
        Cmd::Trace { filter, output, binary, args } => {
            let target = Target::new(binary, args);
            let sink: Box<dyn Write> = match output {
                Some(p) => Box::new(BufWriter::new(File::create(p)?)),
                None => Box::new(io::stderr()),
            };
            let (status, mut sink) = run_trace(&target, filter.as_deref(), sink, &opts)?;
            sink.flush()?;
            Ok(exit_code(status).clamp(0, 255) as u8)
        }
        Cmd::Coverage { map, report, merge, binary, args } => {
            let specs = parse_branch_map(&std::fs::read_to_string(&map)?)?;
            if specs.is_empty() {
                eprintln!("warning: {} lists no branches; coverage is vacuously 1.0", map.display());
            }
            let (mut result, _) = run_coverage(&Target::new(binary, args), &specs, &opts)?;
            if merge && report.exists() {
                let previous = CoverageReport::parse(&std::fs::read_to_string(&report)?)?;
                result.merge(&previous);
            }
            std::fs::write(&report, result.to_text())?;
            eprintln!("coverage={}", result.branch_coverage());
            Ok(0)
        }
        Cmd::Triage { payload, max_len, binary, args } => {
            let payload = match payload {
                Some(p) => std::fs::read(p)?,
                None => cyclic(max_len, DEFAULT_WIDTH)?,
            };
            let finding = triage(&Target::new(binary, args), &payload, max_len, &opts)?;
            print!("{}", finding.to_text());
            Ok(0)
        }
        Cmd::Bench { mode, events, runs, out, compare_gdb, gdb, gdb_runs, fixture_dir } => {
            let mode = match mode {
                Mode::Breakpoint => BenchMode::Breakpoint,
                Mode::Syscall => BenchMode::Syscall,
            };
            let mut cfg = BenchConfig::new(mode, events, runs);
            cfg.compare_gdb = compare_gdb;
            cfg.gdb = gdb;
            cfg.gdb_runs = gdb_runs;
            cfg.keep_aslr = cli.keep_aslr;
            if let Some(dir) = fixture_dir {
                cfg.fixture_dir = dir;
            }
            let result = run_bench(&cfg)?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            result.write(&out)?;
            print!("{}", result.stats_text());
            Ok(0)
        }
        Cmd::Cyclic { length, width } => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(&cyclic(length, width)?)?;
            stdout.write_all(b"\n")?;
            Ok(0)
        }
        Cmd::CyclicFind { window, width } => {
            let offset = match window.strip_prefix("0x") {
                Some(hex) => {
                    let v = u64::from_str_radix(hex, 16).map_err(|_| ToolError::NotInPattern)?;
                    cyclic_find_value(v, width)?
                }
                None => cyclic_find(window.as_bytes(), width)?,
            };
            println!("{offset}");
            Ok(0)
        }
    }
}
