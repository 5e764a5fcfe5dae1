//! `fdt2` — harness for the conditioned-diffusion toy model.
//!
//! Exit codes: 0 on success, 1 when a value or input file is invalid
//! (bad config, missing checkpoint, failed invariant), 2 when the
//! invocation itself is malformed (unknown command or flag, missing value).

/// Writes one stdout line, treating a vanished consumer (closed pipe) as a
/// normal end of output rather than a failure.
macro_rules! say {
    ($($arg:tt)*) => { $crate::emit(format_args!($($arg)*)) };
}

mod commands;
mod flags;

use std::process::ExitCode;

use flags::Flags;

pub fn emit(args: std::fmt::Arguments) {
    use std::io::Write as _;
    let mut out = std::io::stdout().lock();
    let res = out
        .write_fmt(args)
        .and_then(|()| out.write_all(b"\n"))
        .and_then(|()| out.flush());
    if let Err(e) = res {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: cannot write to stdout: {e}");
        std::process::exit(1);
    }
}

#[derive(Debug)]
pub enum CliError {
    /// The invocation is malformed; fix the command line.
    Usage(String),
    /// The invocation is fine but a value, file, or invariant is not.
    Run(String),
}

impl From<fdt2_core::CoreError> for CliError {
    fn from(e: fdt2_core::CoreError) -> Self {
        CliError::Run(e.to_string())
    }
}

const USAGE: &str = "\
usage: fdt2 <command> [flags]

commands:
  cost        closed-form interaction counts and speedups per mechanism config
  attn-check  decoupled attention vs masked joint attention, random instances
  train       SGD on a synthetic task; writes checkpoint + loss curve
  sample      Euler sampler; writes latents + per-step cost and timing
  bench       every mechanism config on one parameter set; measured vs analytic
  analyze     context-redundancy diagnostics (concentration, similarity, ...)
  bi          block-importance report and data-driven layer choice

`fdt2 <command> --help` lists the command's flags.
Set FDT2_STRICT=1 to zero wall-clock fields for byte-identical reruns.
";

const COST_USAGE: &str = "\
usage: fdt2 cost [flags]

Closed-form attention-interaction counts for one sampling run, per
mechanism config, with speedups relative to the joint-attention baseline.
Defaults describe the reference scenario (30 steps, 28 layers, 5 active,
context twice the noisy length, half kept).

  --T n           sampling steps
  --L n           transformer layers
  --Ls n          layers that process context (must include layer 0)
  --Nx n          noisy tokens
  --Nc n          context tokens (exclusive with --ncx-ratio)
  --ncx-ratio r   context tokens = r * noisy tokens
  --sel-ratio f   kept fraction for token selection, in (0, 1]
  --configs a,b   mechanism configs to tabulate (default: all nine)
  --sweep n1,n2   repeat the table for each noisy-token count
  --out path      write CSV there instead of stdout
";

const ATTN_USAGE: &str = "\
usage: fdt2 attn-check [flags]

Random-instance check that decoupled attention (two attention calls)
matches joint attention under a context-blind mask, elementwise.

  --seeds n   number of random instances (default 1000)
";

const CONFIG_FLAGS: &str = "\
  --config path    key = value run-config file (defaults apply without it)
  --set key=value  override one config key; repeatable, applied in order
";

fn config_usage(intro: &str) -> String {
    format!("{intro}\n{CONFIG_FLAGS}")
}

fn run(args: &[String]) -> Result<(), CliError> {
    let Some(cmd) = args.first() else {
        return Err(CliError::Usage("missing command".into()));
    };
    if cmd == "--help" || cmd == "-h" || cmd == "help" {
        say!("{}", USAGE.trim_end_matches('\n'));
        return Ok(());
    }
    let rest = &args[1..];
    let wants_help = rest.iter().any(|a| a == "--help" || a == "-h");
    let parse = |allowed: &[&str]| Flags::parse(rest, allowed).map_err(CliError::Usage);
    match cmd.as_str() {
        "cost" => {
            if wants_help {
                say!("{}", COST_USAGE.trim_end_matches('\n'));
                return Ok(());
            }
            commands::cost(&parse(&[
                "T",
                "L",
                "Ls",
                "Nx",
                "Nc",
                "ncx-ratio",
                "sel-ratio",
                "configs",
                "sweep",
                "out",
            ])?)
        }
        "attn-check" => {
            if wants_help {
                say!("{}", ATTN_USAGE.trim_end_matches('\n'));
                return Ok(());
            }
            commands::attn_check(&parse(&["seeds"])?)
        }
        "train" | "sample" | "bench" | "analyze" | "bi" => {
            if wants_help {
                let intro = match cmd.as_str() {
                    "train" => "usage: fdt2 train [flags]\n\nTrains on the configured synthetic task and writes out_dir/model.fdt2\nplus out_dir/train_loss.csv. With a configured checkpoint, training\nresumes from it.",
                    "sample" => "usage: fdt2 sample [flags]\n\nRuns the Euler sampler on a task-drawn context and writes\nout_dir/latents.fdt2 plus out_dir/sample_steps.csv.",
                    "bench" => "usage: fdt2 bench [flags]\n\nRuns every mechanism config on one parameter set and writes\nout_dir/bench.csv with measured vs analytic interaction counts,\nwall time, and evaluation loss.",
                    "analyze" => "usage: fdt2 analyze [flags]\n\nWrites context-redundancy diagnostics to out_dir: concentration.csv,\nstep_similarity.csv, frame_diff.csv, layer_divergence.csv.",
                    _ => "usage: fdt2 bi [flags]\n\nMeasures per-layer block importance on probe states and picks the\nactive-layer set for the configured budget; writes out_dir/bi.csv.",
                };
                say!("{}", config_usage(intro).trim_end_matches('\n'));
                return Ok(());
            }
            let f = parse(&["config", "set"])?;
            match cmd.as_str() {
                "train" => commands::train(&f),
                "sample" => commands::sample(&f),
                "bench" => commands::bench(&f),
                "analyze" => commands::analyze(&f),
                _ => commands::bi(&f),
            }
        }
        other => Err(CliError::Usage(format!("unknown command {other:?}"))),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `fdt2 --help` for usage");
            ExitCode::from(2)
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
