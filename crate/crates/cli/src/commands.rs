//! The subcommand implementations behind `fdt2`.
//!
//! Every command is deterministic given its flags and config: model, task,
//! and sampling randomness are drawn from disjoint streams derived from the
//! single run seed. With `FDT2_STRICT=1` wall-clock fields are written as 0
//! so repeated runs produce byte-identical output files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fdt2_core::attention::{attn_decoupled, attn_masked_oracle, AttentionInputs};
use fdt2_core::checkpoint;
use fdt2_core::config::RunConfig;
use fdt2_core::cost::{analytic_interactions, cost_table, sweep_n_x, CostSpec};
use fdt2_core::model::{DiffusionState, Mode, Model, SampleOptions};
use fdt2_core::task::SyntheticTask;
use fdt2_core::tensor::{Rng, Tensor};
use fdt2_core::{analysis, caching, CoreError};

use crate::flags::Flags;
use crate::CliError;

// Disjoint seed streams per role, all derived from the one run seed.
const TASK_SALT: u64 = 0x7441_534b_0000_0001;
const TRAIN_SALT: u64 = 0x7452_4149_0000_0002;
const SAMPLE_SALT: u64 = 0x7341_4d50_0000_0003;
const PROBE_SALT: u64 = 0x7052_4f42_0000_0004;
const SIM_SALT: u64 = 0x7349_4d53_0000_0005;

/// Bit-exact replay mode: wall-clock output fields become 0.
fn strict() -> bool {
    std::env::var("FDT2_STRICT").map(|v| v == "1").unwrap_or(false)
}

fn wall(elapsed: f64) -> f64 {
    if strict() {
        0.0
    } else {
        elapsed
    }
}

fn parse_u64_flag(key: &str, v: &str) -> Result<u64, CliError> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("--{key}: cannot parse {v:?} as an integer")))
}

fn parse_usize_flag(key: &str, v: &str) -> Result<usize, CliError> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("--{key}: cannot parse {v:?} as an integer")))
}

fn parse_f64_flag(key: &str, v: &str) -> Result<f64, CliError> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("--{key}: cannot parse {v:?} as a number")))
}

fn parse_u64_list(key: &str, v: &str) -> Result<Vec<u64>, CliError> {
    v.split(',')
        .map(|part| parse_u64_flag(key, part.trim()))
        .collect()
}

/// `--configs a,b,c` → modes; absent → all of them, in the canonical order.
fn parse_modes(arg: Option<&str>) -> Result<Vec<Mode>, CliError> {
    match arg {
        None => Ok(Mode::ALL.to_vec()),
        Some(list) => list
            .split(',')
            .map(|s| Mode::parse(s.trim()).map_err(CliError::from))
            .collect(),
    }
}

/// Defaults, then the config file, then `--set key=value` overrides in order.
fn load_run_config(flags: &Flags) -> Result<RunConfig, CliError> {
    let mut rc = match flags.get("config") {
        Some(path) => RunConfig::from_file(Path::new(path))
            .map_err(|e| CliError::Run(format!("{path}: {e}")))?,
        None => RunConfig::default(),
    };
    for kv in flags.all("set") {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {kv:?}")))?;
        rc.set(key.trim(), value.trim())?;
    }
    Ok(rc)
}

/// Fresh seeded parameters, or the configured checkpoint if one is named.
fn load_or_init(rc: &RunConfig) -> Result<Model, CliError> {
    let cfg = rc.model_config()?;
    if rc.checkpoint.is_empty() {
        Ok(Model::init(cfg, rc.seed)?)
    } else {
        Ok(checkpoint::load_model(Path::new(&rc.checkpoint), cfg)?)
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(CoreError::Io)?;
        }
    }
    std::fs::write(path, text).map_err(CoreError::Io)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// cost
// ---------------------------------------------------------------------------

pub fn cost(flags: &Flags) -> Result<(), CliError> {
    let mut spec = CostSpec::reference();
    if let Some(v) = flags.get("T") {
        spec.t = parse_u64_flag("T", v)?;
    }
    if let Some(v) = flags.get("L") {
        spec.l = parse_u64_flag("L", v)?;
    }
    if let Some(v) = flags.get("Ls") {
        spec.l_s = parse_u64_flag("Ls", v)?;
    }
    if let Some(v) = flags.get("Nx") {
        spec.n_x = parse_u64_flag("Nx", v)?;
    }
    let ncx = flags
        .get("ncx-ratio")
        .map(|v| parse_u64_flag("ncx-ratio", v))
        .transpose()?;
    if flags.get("Nc").is_some() && ncx.is_some() {
        return Err(CliError::Usage(
            "--Nc and --ncx-ratio are mutually exclusive".into(),
        ));
    }
    if let Some(v) = flags.get("Nc") {
        spec.n_c = parse_u64_flag("Nc", v)?;
    }
    let scale_ctx = |n_x: u64, r: u64| -> Result<u64, CliError> {
        n_x.checked_mul(r)
            .ok_or_else(|| CliError::Run(format!("context count {r}*{n_x} overflows")))
    };
    if let Some(r) = ncx {
        spec.n_c = scale_ctx(spec.n_x, r)?;
    }
    if let Some(v) = flags.get("sel-ratio") {
        spec.ratio = parse_f64_flag("sel-ratio", v)?;
    }
    let modes = parse_modes(flags.get("configs"))?;
    spec.validate()?;

    let mut out = String::new();
    match flags.get("sweep") {
        None => {
            out.push_str("config,interactions,speedup_vs_baseline\n");
            for (mode, count, speedup) in cost_table(&spec, &modes)? {
                writeln!(out, "{},{count},{speedup}", mode.name()).unwrap();
            }
        }
        Some(list) => {
            let values = parse_u64_list("sweep", list)?;
            out.push_str("n_x,config,interactions,speedup_vs_baseline\n");
            // With --ncx-ratio the context grows in proportion to the noisy
            // tokens; otherwise the sweep holds the context count fixed.
            let tables: Vec<(u64, Vec<(Mode, u64, f64)>)> = match ncx {
                None => sweep_n_x(&spec, &modes, &values)?,
                Some(r) => values
                    .iter()
                    .map(|&n_x| {
                        let s = CostSpec {
                            n_x,
                            n_c: scale_ctx(n_x, r)?,
                            ..spec
                        };
                        Ok((n_x, cost_table(&s, &modes)?))
                    })
                    .collect::<Result<_, CliError>>()?,
            };
            for (n_x, rows) in tables {
                for (mode, count, speedup) in rows {
                    writeln!(out, "{n_x},{},{count},{speedup}", mode.name()).unwrap();
                }
            }
        }
    }

    match flags.get("out") {
        Some(path) => {
            write_file(Path::new(path), &out)?;
            say!("wrote {path}");
        }
        None => say!("{}", out.trim_end_matches('\n')),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// attn-check
// ---------------------------------------------------------------------------

pub fn attn_check(flags: &Flags) -> Result<(), CliError> {
    let instances = match flags.get("seeds") {
        Some(v) => parse_usize_flag("seeds", v)?,
        None => 1000,
    };
    if instances == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let mut max_diff = 0.0f64;
    for i in 0..instances {
        let mut rng = Rng::new(0x5EED ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let n_z = 1 + rng.below(16);
        let n_c = rng.below(17);
        let d = 2 + rng.below(31);
        let mut part = |rows: usize| rng.normal_tensor(vec![rows, d], 1.0);
        let inp = AttentionInputs {
            q_z: part(n_z),
            k_z: part(n_z),
            v_z: part(n_z),
            q_c: part(n_c),
            k_c: part(n_c),
            v_c: part(n_c),
            d_k: d,
        };
        let (dz, dc) = attn_decoupled(&inp)?;
        let (mz, mc) = attn_masked_oracle(&inp)?;
        let diff = dz.max_abs_diff(&mz)?.max(dc.max_abs_diff(&mc)?);
        if diff > max_diff {
            max_diff = diff;
        }
    }
    say!("checked {instances} instances: max |decoupled - masked joint| = {max_diff:e}");
    if max_diff < 1e-6 {
        Ok(())
    } else {
        Err(CliError::Run(format!(
            "decoupled attention deviates from the masked joint form by {max_diff:e}"
        )))
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn train(flags: &Flags) -> Result<(), CliError> {
    let rc = load_run_config(flags)?;
    let mut model = load_or_init(&rc)?;
    let task = SyntheticTask::for_config(rc.task, &model.cfg, rc.seed ^ TASK_SALT)?;
    let losses = model.train_toy(
        &task,
        rc.iters,
        rc.lr,
        rc.batch,
        &mut Rng::new(rc.seed ^ TRAIN_SALT),
    )?;
    let eval = task.eval_loss(&model, rc.eval_samples, false)?;

    let out = PathBuf::from(&rc.out_dir);
    let ckpt = out.join("model.fdt2");
    std::fs::create_dir_all(&out).map_err(CoreError::Io)?;
    checkpoint::save_model(&ckpt, &model)?;
    let mut csv = String::from("iter,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(csv, "{i},{l}").unwrap();
    }
    let curve = out.join("train_loss.csv");
    write_file(&curve, &csv)?;

    say!(
        "trained {} iters on task {} (batch {}, lr {}): eval_loss {}",
        rc.iters,
        rc.task.name(),
        rc.batch,
        rc.lr,
        eval
    );
    say!("wrote {} and {}", ckpt.display(), curve.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

pub fn sample(flags: &Flags) -> Result<(), CliError> {
    let rc = load_run_config(flags)?;
    let model = load_or_init(&rc)?;
    let task = SyntheticTask::for_config(rc.task, &model.cfg, rc.seed ^ TASK_SALT)?;
    let (_, contexts) = task.draw(&model.cfg, 0)?;
    let run = model.sample_run(
        &contexts,
        rc.steps,
        &mut Rng::new(rc.seed ^ SAMPLE_SALT),
        &SampleOptions::default(),
    )?;

    let out = PathBuf::from(&rc.out_dir);
    let latents = out.join("latents.fdt2");
    std::fs::create_dir_all(&out).map_err(CoreError::Io)?;
    checkpoint::save(&latents, &[("latents".to_string(), &run.latents)])?;
    let mut csv = String::from("step,t,attn_pairs,proj_flops,wall_seconds\n");
    for s in &run.steps {
        writeln!(
            csv,
            "{},{},{},{},{}",
            s.step,
            s.t,
            s.attn_pairs,
            s.proj_flops,
            wall(s.seconds)
        )
        .unwrap();
    }
    let steps_csv = out.join("sample_steps.csv");
    write_file(&steps_csv, &csv)?;

    say!(
        "sampled {}x{} latents over {} steps (mode {}): attn_pairs {}",
        model.cfg.n_z,
        model.cfg.d_latent,
        rc.steps,
        model.cfg.mode.name(),
        run.counter.attn_pairs
    );
    say!("wrote {} and {}", latents.display(), steps_csv.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub fn bench(flags: &Flags) -> Result<(), CliError> {
    let rc = load_run_config(flags)?;
    let base = load_or_init(&rc)?;
    let task = SyntheticTask::for_config(rc.task, &base.cfg, rc.seed ^ TASK_SALT)?;
    let (_, contexts) = task.draw(&base.cfg, 0)?;

    let mut csv = String::from("mode,measured_pairs,analytic_pairs,wall_seconds,eval_loss\n");
    let mut rows = Vec::with_capacity(Mode::ALL.len());
    // One shared parameter set; each row swaps only the mechanism config.
    for &mode in Mode::ALL.iter() {
        let model = base.reconfigured(mode, None)?;
        let analytic = analytic_interactions(&CostSpec::for_model(&model.cfg, rc.steps), mode)?;
        let started = Instant::now();
        let run = model.sample_run(
            &contexts,
            rc.steps,
            &mut Rng::new(rc.seed ^ SAMPLE_SALT),
            &SampleOptions::default(),
        )?;
        let seconds = wall(started.elapsed().as_secs_f64());
        let measured = run.counter.attn_pairs;
        if measured != analytic {
            return Err(CoreError::Invalid(format!(
                "{}: measured {measured} attention pairs, analytic model says {analytic}",
                mode.name()
            ))
            .into());
        }
        let eval = task.eval_loss(&model, rc.eval_samples, false)?;
        writeln!(csv, "{},{measured},{analytic},{seconds},{eval}", mode.name()).unwrap();
        rows.push((mode, measured, analytic, seconds, eval));
    }

    // The file lands before the table prints, so a consumer that stops
    // reading mid-table still leaves a complete bench.csv behind.
    let out = PathBuf::from(&rc.out_dir).join("bench.csv");
    write_file(&out, &csv)?;

    say!(
        "{:<17} {:>12} {:>12} {:>10} {:>12}",
        "mode", "measured", "analytic", "wall_s", "eval_loss"
    );
    for (mode, measured, analytic, seconds, eval) in rows {
        say!(
            "{:<17} {:>12} {:>12} {:>10.4} {:>12.6}",
            mode.name(),
            measured,
            analytic,
            seconds,
            eval
        );
    }
    say!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

/// Mid-trajectory states over task-drawn contexts: z_t at t = 1/2 between a
/// seeded noise draw and the task target.
fn probe_states(
    model: &Model,
    task: &SyntheticTask,
    seed: u64,
    count: usize,
) -> Result<Vec<DiffusionState>, CliError> {
    let mut probes = Vec::with_capacity(count);
    for i in 0..count {
        let (z1, contexts) = task.draw(&model.cfg, i as u64)?;
        let mut rng = Rng::new(seed ^ PROBE_SALT ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let z0 = rng.normal_tensor(vec![model.cfg.n_z, model.cfg.d_latent], 1.0);
        let data: Vec<f32> = z0
            .data()
            .iter()
            .zip(z1.data())
            .map(|(&a, &b)| (0.5 * (a as f64 + b as f64)) as f32)
            .collect();
        let z_t = Tensor::new(vec![model.cfg.n_z, model.cfg.d_latent], data)?;
        probes.push(DiffusionState {
            z_t,
            t: 0.5,
            contexts,
        });
    }
    Ok(probes)
}

pub fn analyze(flags: &Flags) -> Result<(), CliError> {
    let rc = load_run_config(flags)?;
    let model = load_or_init(&rc)?;
    let task = SyntheticTask::for_config(rc.task, &model.cfg, rc.seed ^ TASK_SALT)?;
    let probes = probe_states(&model, &task, rc.seed, rc.eval_samples)?;
    let out = PathBuf::from(&rc.out_dir);
    std::fs::create_dir_all(&out).map_err(CoreError::Io)?;

    // How few context tokens hold most of the attention mass.
    let layers: Vec<usize> = (0..model.cfg.layers).collect();
    let curve = analysis::attention_concentration(&model, &probes, &layers)?;
    let mut csv = String::from("fraction,cumulative_mass\n");
    for (f, c) in &curve.points {
        writeln!(csv, "{f},{c}").unwrap();
    }
    write_file(&out.join("concentration.csv"), &csv)?;
    let half = curve
        .points
        .iter()
        .find(|(_, c)| *c >= 0.5)
        .map(|(f, _)| *f)
        .unwrap_or(1.0);

    // How similar context representations stay across sampling steps.
    let sims = analysis::stepwise_similarity(
        &model,
        &probes[0].contexts,
        rc.steps,
        0,
        rc.seed ^ SIM_SALT,
    )?;
    let mut csv = String::from("step,ctx_cosine,noisy_cosine\n");
    for s in &sims {
        writeln!(csv, "{},{},{}", s.step, s.ctx, s.noisy).unwrap();
    }
    write_file(&out.join("step_similarity.csv"), &csv)?;

    // How much adjacent frames differ inside the first context segment
    // (one row per frame).
    let seg = &probes[0].contexts[0];
    let (rows, d) = seg.dims2()?;
    let frames = Tensor::new(vec![rows, 1, d], seg.data().to_vec())?;
    let diffs = analysis::frame_diff(&frames)?;
    let mut csv = String::from("pair,l1_diff\n");
    for (i, v) in diffs.iter().enumerate() {
        writeln!(csv, "{i},{v}").unwrap();
    }
    write_file(&out.join("frame_diff.csv"), &csv)?;

    // How differently the layers distribute attention over context tokens.
    let div = analysis::layerwise_divergence(&model, &probes)?;
    let mut csv = String::from("layer_i,layer_j,jsd_bits\n");
    for (i, row) in div.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            writeln!(csv, "{i},{j},{v}").unwrap();
        }
    }
    write_file(&out.join("layer_divergence.csv"), &csv)?;
    let adjacent: f64 = if model.cfg.layers > 1 {
        (0..model.cfg.layers - 1).map(|i| div[i][i + 1]).sum::<f64>()
            / (model.cfg.layers - 1) as f64
    } else {
        0.0
    };

    say!(
        "half the context attention mass sits in {:.1}% of the tokens; \
         mean adjacent-layer divergence {:.4} bits",
        half * 100.0,
        adjacent
    );
    say!(
        "wrote concentration.csv, step_similarity.csv, frame_diff.csv, layer_divergence.csv to {}",
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// bi
// ---------------------------------------------------------------------------

pub fn bi(flags: &Flags) -> Result<(), CliError> {
    let rc = load_run_config(flags)?;
    let model = load_or_init(&rc)?;
    let task = SyntheticTask::for_config(rc.task, &model.cfg, rc.seed ^ TASK_SALT)?;
    let probes = probe_states(&model, &task, rc.seed, rc.eval_samples)?;

    let report = caching::bi_report(&model, &probes)?;
    // The configured active-layer count is the budget for the data-driven pick.
    let budget = model.cfg.plan.l_s();
    let plan = caching::choose_layers(&report, budget - 1)?;

    let mut csv = String::from("layer,bi,mean_cosine,chosen\n");
    for l in 0..model.cfg.layers {
        writeln!(
            csv,
            "{l},{},{},{}",
            report.bi[l],
            report.mean_cosine[l],
            plan.contains(l)
        )
        .unwrap();
    }
    let out = PathBuf::from(&rc.out_dir).join("bi.csv");
    write_file(&out, &csv)?;

    let chosen: Vec<String> = plan.active().iter().map(|l| l.to_string()).collect();
    say!(
        "block importance over {} probes; chosen layers {} (budget {budget})",
        report.probes,
        chosen.join(",")
    );
    say!("wrote {}", out.display());
    Ok(())
}
