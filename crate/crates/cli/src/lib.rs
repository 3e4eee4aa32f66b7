//! Command-line surface: `cot <subcommand> [flags]`.
//!
//! Every config key is also a flag (`--spst-threshold 0.9` sets
//! `spst_threshold`). Values are layered flag over file over default.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use cot_core::checks::loss_gradient_checks;
use cot_core::config::Config;
use cot_core::datagen::{generate_benchmark, load_benchmark, write_benchmark};
use cot_core::eval::{
    classwise_mmd, evaluate, export_embeddings, features_and_probs, mean_diagonal, write_accuracy_csv,
    write_confusion_csv, write_mmd_csv,
};
use cot_core::pointcloud::{read_xyz, Domain};
use cot_core::renderer::{render_multiview, write_pgm};
use cot_core::trainer::{fit, spst_finetune, TrainState, BEST_CKPT};
use cot_core::{Error, Result};

pub const RUN_MANIFEST: &str = "run_manifest.txt";
pub const SPST_CKPT: &str = "spst.ckpt";
pub const SPST_METRICS: &str = "spst_metrics.csv";
pub const EMBEDDINGS: &str = "embeddings.csv";

/// Exit code for an error: 2 for I/O and unreadable inputs, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Parse { .. } => 2,
        _ => 1,
    }
}

fn config_args() -> Vec<Arg> {
    Config::KEYS
        .iter()
        .filter(|k| **k != "seed")
        .map(|k| Arg::new(*k).long(k.replace('_', "-")).value_name("VALUE").help(format!("overrides `{k}`")))
        .collect()
}

fn common(cmd: Command, out_help: &'static str) -> Command {
    cmd.arg(Arg::new("config").long("config").value_name("PATH").help("key = value config file"))
        .arg(Arg::new("out").long("out").value_name("DIR").required(true).help(out_help))
        .arg(Arg::new("seed").long("seed").value_name("U64").help("overrides `seed`"))
        .args(config_args())
}

fn data_arg() -> Arg {
    Arg::new("data").long("data").value_name("DIR").required(true).help("benchmark written by gen-data")
}

fn checkpoint_arg(required: bool) -> Arg {
    Arg::new("checkpoint")
        .long("checkpoint")
        .value_name("PATH")
        .required(required)
        .help("model checkpoint")
}

pub fn command() -> Command {
    Command::new("cot")
        .about("Contrastive learning and optimal transport domain adaptation for point clouds")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(common(Command::new("gen-data").about("Generate the synthetic two-domain benchmark"), "benchmark directory"))
        .subcommand(
            common(Command::new("train").about("Train encoders and classifier"), "run directory").arg(data_arg()),
        )
        .subcommand(
            common(Command::new("spst").about("Self-training on confident target predictions"), "run directory")
                .arg(data_arg())
                .arg(checkpoint_arg(false)),
        )
        .subcommand(
            common(Command::new("eval").about("Target accuracy, confusion and class-wise MMD"), "report directory")
                .arg(data_arg())
                .arg(checkpoint_arg(true)),
        )
        .subcommand(
            common(Command::new("render").about("Render multi-view PGM images of one XYZ cloud"), "image directory")
                .arg(Arg::new("input").long("input").value_name("XYZ").required(true).help("point cloud file")),
        )
        .subcommand(
            common(Command::new("export-emb").about("Export global features and predictions as CSV"), "export directory")
                .arg(data_arg())
                .arg(checkpoint_arg(true)),
        )
        .subcommand(
            common(Command::new("grad-check").about("Finite-difference checks of every objective"), "report directory")
                .arg(Arg::new("trials").long("trials").value_name("N").default_value("20").help("random batches per objective"))
                .arg(Arg::new("quiet").long("quiet").action(ArgAction::SetTrue).help("only set the exit code")),
        )
}

/// Config from defaults, then `--config`, then flags.
pub fn resolve_config(m: &ArgMatches) -> Result<Config> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => Config::load(Path::new(p))?,
        None => Config::default(),
    };
    for key in Config::KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_manifest(out: &Path, command: &str, cfg: &Config) -> Result<()> {
    fs::create_dir_all(out)?;
    let text = format!(
        "command = {command}\nconfig_hash = {}\nseed = {}\ncode_version = {}\n",
        cfg.hash(),
        cfg.seed,
        env!("CARGO_PKG_VERSION")
    );
    fs::write(out.join(RUN_MANIFEST), text)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn path(m: &ArgMatches, key: &str) -> PathBuf {
    PathBuf::from(m.get_one::<String>(key).expect("required argument"))
}

fn dispatch(name: &str, m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(m)?;
    let out = path(m, "out");
    write_manifest(&out, name, &cfg)?;
    match name {
        "gen-data" => {
            let bench = generate_benchmark(&cfg.benchmark())?;
            write_benchmark(&out, &bench)?;
            println!("wrote benchmark to {}", out.display());
        }
        "train" => {
            let bench = load_benchmark(&path(m, "data"), cfg.classes, false)?;
            let s = fit(&cfg, &bench.train.source, &bench.train.target, Some(&bench.test.source), &out)?;
            println!("trained {} steps; best source validation accuracy {:.4}", s.steps, s.best_val);
        }
        "spst" => {
            let bench = load_benchmark(&path(m, "data"), cfg.classes, false)?;
            let ckpt = m.get_one::<String>("checkpoint").map_or_else(|| out.join(BEST_CKPT), PathBuf::from);
            let mut state = TrainState::load(&cfg, &ckpt)?;
            let s = spst_finetune(&mut state, &cfg, &bench.train.source, &bench.train.target, Some(&out.join(SPST_METRICS)))?;
            state.save(&out.join(SPST_CKPT))?;
            for r in &s.rounds {
                println!("round {}: {} confident samples{}", r.round, r.selected, if r.skipped { " (skipped)" } else { "" });
            }
            println!("threshold {}; wrote {}", s.threshold, out.join(SPST_CKPT).display());
        }
        "eval" => {
            let bench = load_benchmark(&path(m, "data"), cfg.classes, true)?;
            let state = TrainState::load(&cfg, &path(m, "checkpoint"))?;
            let (src, tgt) = (&bench.test.source, &bench.test.target);
            let report = evaluate(&state.model, tgt)?;
            write_accuracy_csv(&out.join("accuracy.csv"), &report)?;
            write_confusion_csv(&out.join("confusion.csv"), &report)?;
            let to64 = |f: Vec<Vec<f32>>| -> Vec<Vec<f64>> {
                f.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect()
            };
            let (fs_, _) = features_and_probs(&state.model, &src.clouds)?;
            let (ft, _) = features_and_probs(&state.model, &tgt.clouds)?;
            let mmd = classwise_mmd(
                &to64(fs_),
                &src.evaluation_labels()?,
                &to64(ft),
                &tgt.evaluation_labels()?,
                cfg.classes,
            )?;
            write_mmd_csv(&out.join("mmd.csv"), &mmd)?;
            let source_acc = evaluate(&state.model, src)?.overall_accuracy;
            println!(
                "target accuracy {:.4}; source accuracy {source_acc:.4}; mean diagonal MMD {:.4}",
                report.overall_accuracy,
                mean_diagonal(&mmd).unwrap_or(f64::NAN)
            );
        }
        "render" => {
            let cloud = read_xyz(&path(m, "input"), None, Domain::Source)?;
            let stack = render_multiview(&cloud, &cfg.rig()?, &cfg.render())?;
            for (i, im) in stack.images.iter().enumerate() {
                write_pgm(&out.join(format!("view_{i:02}.pgm")), im)?;
            }
            println!("wrote {} views to {}", stack.images.len(), out.display());
        }
        "export-emb" => {
            let bench = load_benchmark(&path(m, "data"), cfg.classes, false)?;
            let state = TrainState::load(&cfg, &path(m, "checkpoint"))?;
            export_embeddings(&state.model, &[&bench.test.source, &bench.test.target], &out.join(EMBEDDINGS))?;
            println!("wrote {}", out.join(EMBEDDINGS).display());
        }
        "grad-check" => {
            let trials: usize = m
                .get_one::<String>("trials")
                .unwrap()
                .parse()
                .map_err(|e| Error::Config(format!("--trials: {e}")))?;
            let checks = loss_gradient_checks(cfg.seed, trials)?;
            let mut text = String::from("check,max_relative_error,tolerance,passed\n");
            for c in &checks {
                text.push_str(&format!("{},{},{},{}\n", c.name, c.max_error, c.tolerance, c.passed()));
                if !m.get_flag("quiet") {
                    println!("{:16} {:.3e} (tolerance {:.0e}) {}", c.name, c.max_error, c.tolerance, if c.passed() { "ok" } else { "FAIL" });
                }
            }
            fs::write(out.join("grad_check.csv"), text)?;
            if let Some(c) = checks.iter().find(|c| !c.passed()) {
                return Err(Error::Contract(format!("gradient check {} exceeded tolerance", c.name)));
            }
        }
        other => unreachable!("unknown subcommand {other}"),
    }
    Ok(())
}

/// Sizes the global worker pool from `COT_THREADS`, if set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("COT_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("COT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Parses `argv` (including the program name), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match dispatch(name, sub) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
