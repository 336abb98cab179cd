//! `lpanet`: generate scenes, train either stage, evaluate, ablate and
//! inspect. Exit status is 0 on success, 1 on runtime failure and 2 on
//! usage, configuration, path or validation errors.

mod pgm;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use lpanet::pipeline::config::KEYS;
use lpanet::pipeline::{
    ablate, ablation_table, evaluate, inspect, model_config, run_stage, Checkpoint, RunConfig,
    Stage,
};
use lpanet::synth::{write_dataset, Dataset};
use lpanet::tensor::{ten1, Tensor};
use lpanet::Error;

const THREADS_ENV: &str = "LPANET_THREADS";
const CONFIG_FILE: &str = "config.txt";
const LOSS_LOG: &str = "loss.jsonl";

fn config_args() -> Vec<Arg> {
    let mut args = vec![
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .help("key = value file applied on top of the defaults"),
        Arg::new("fast")
            .long("fast")
            .action(ArgAction::SetTrue)
            .help("Start from the quick profile (5 epochs, 32 samples) instead of the defaults"),
    ];
    for &key in KEYS {
        let kebab = key.replace('_', "-");
        let mut arg = Arg::new(key)
            .long(kebab.clone())
            .value_name("VALUE")
            .help(format!("Override `{key}`"));
        if kebab != key {
            arg = arg.alias(key);
        }
        args.push(arg);
    }
    args
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .help(help)
}

fn cli() -> Command {
    Command::new("lpanet")
        .about("Progressive semantic and spatial alignment for RGB-IR fusion on synthetic scenes")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .args_override_self(true)
        .subcommand(
            Command::new("gen")
                .about("Write a synthetic dataset and its manifest")
                .arg(path_arg("out", "Dataset directory").required(true))
                .args(config_args()),
        )
        .subcommand(
            Command::new("train")
                .about("Train one stage and write a checkpoint with its loss log")
                .arg(
                    Arg::new("stage")
                        .long("stage")
                        .value_parser(value_parser!(u8).range(1..=2))
                        .default_value("1"),
                )
                .arg(path_arg("data", "Dataset directory").required(true))
                .arg(path_arg(
                    "init",
                    "Stage-1 checkpoint to continue from (stage 2)",
                ))
                .arg(path_arg("out", "Checkpoint directory").required(true))
                .args(config_args()),
        )
        .subcommand(
            Command::new("eval")
                .about("Print the metrics of a checkpoint on a dataset as JSON")
                .arg(path_arg("ckpt", "Checkpoint directory").required(true))
                .arg(path_arg("data", "Dataset directory").required(true))
                .arg(path_arg("json", "Also write the metrics to this file")),
        )
        .subcommand(
            Command::new("ablate")
                .about("Train and evaluate baseline, +SAM, +ISM and +ESM under one budget")
                .arg(path_arg("data", "Training dataset directory").required(true))
                .arg(path_arg(
                    "eval-data",
                    "Evaluation dataset (defaults to --data)",
                ))
                .arg(path_arg("out", "Output directory").required(true))
                .args(config_args()),
        )
        .subcommand(
            Command::new("inspect")
                .about("Dump response maps, offset means and consistency vectors for one sample")
                .arg(path_arg("ckpt", "Checkpoint directory").required(true))
                .arg(path_arg("data", "Dataset directory").required(true))
                .arg(
                    Arg::new("sample")
                        .long("sample")
                        .value_parser(value_parser!(usize))
                        .default_value("0")
                        .help("Sample index in manifest order"),
                )
                .arg(path_arg("out", "Output directory").required(true)),
        )
}

/// Defaults, then `--fast`, then `--config`, then individual flags.
fn resolve(m: &ArgMatches) -> lpanet::Result<RunConfig> {
    let mut run = if m.get_flag("fast") {
        RunConfig::fast()
    } else {
        RunConfig::default()
    };
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        run.apply_text(&text, &path.display().to_string())?;
    }
    for &key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            run.set(key, v)?;
        }
    }
    run.validate()?;
    Ok(run)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn threads() -> lpanet::Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a PathBuf {
    m.get_one::<PathBuf>(name).expect("required argument")
}

fn create_dir(dir: &Path) -> lpanet::Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Writes the resolved configuration next to the command's outputs and to
/// standard error.
fn echo(run: &RunConfig, dir: &Path) -> lpanet::Result<()> {
    eprint!("{run}");
    run.save(&dir.join(CONFIG_FILE))
}

fn cmd_gen(m: &ArgMatches) -> lpanet::Result<()> {
    let run = resolve(m)?;
    let out = path(m, "out");
    create_dir(out)?;
    echo(&run, out)?;
    let manifest = write_dataset(&run.scene(), run.count, out)?;
    println!(
        "wrote {} samples to {}",
        manifest.entries.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(m: &ArgMatches) -> lpanet::Result<()> {
    let stage = Stage::from_number(*m.get_one::<u8>("stage").expect("defaulted"))?;
    let init = match (stage, m.get_one::<PathBuf>("init")) {
        (Stage::Two, None) => {
            return Err(Error::Usage(
                "--stage 2 requires --init <stage-1 checkpoint>".into(),
            ))
        }
        (_, Some(p)) => Some(Checkpoint::load(p)?),
        (Stage::One, None) => None,
    };
    let run = resolve(m)?;
    if let Some(ckpt) = &init {
        if ckpt.model.config != model_config(&run) {
            return Err(Error::Validation(format!(
                "--init checkpoint model ({:?}) differs from the configured model ({:?})",
                ckpt.model.config,
                model_config(&run)
            )));
        }
    }
    let data = Dataset::load(path(m, "data"))?;
    let out = path(m, "out");
    create_dir(out)?;
    echo(&run, out)?;
    let log_path = out.join(LOSS_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    let (ckpt, report) = run_stage(&run, stage, init, &data.samples, threads()?, Some(&mut log))?;
    log.flush().map_err(|e| io_err(&log_path, e))?;
    ckpt.save(out)?;
    match report.epoch_means.last() {
        Some(l) => println!(
            "stage {} done after {} epochs: l_det {:.6} l_sa {} l_sc {} total {:.6}",
            stage.number(),
            report.epoch_means.len(),
            l.l_det,
            l.l_sa.map_or("-".into(), |v| format!("{v:.6}")),
            l.l_sc.map_or("-".into(), |v| format!("{v:.6}")),
            l.total
        ),
        None => println!(
            "stage {} checkpoint written without training",
            stage.number()
        ),
    }
    Ok(())
}

/// The checkpoint's own state is the effective configuration of eval and
/// inspect.
fn echo_checkpoint(dir: &Path) -> lpanet::Result<()> {
    let p = dir.join(lpanet::pipeline::checkpoint::STATE_FILE);
    let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
    eprint!("# checkpoint {}\n{text}", dir.display());
    Ok(())
}

fn cmd_eval(m: &ArgMatches) -> lpanet::Result<()> {
    let dir = path(m, "ckpt");
    let ckpt = Checkpoint::load(dir)?;
    echo_checkpoint(dir)?;
    let data = Dataset::load(path(m, "data"))?;
    let metrics = evaluate(
        &ckpt.model,
        &data.samples,
        ckpt.state.stage,
        ckpt.state.weights,
        threads()?,
    )?;
    let json = metrics.to_json();
    if let Some(p) = m.get_one::<PathBuf>("json") {
        fs::write(p, format!("{json}\n")).map_err(|e| io_err(p, e))?;
    }
    println!("{json}");
    Ok(())
}

fn cmd_ablate(m: &ArgMatches) -> lpanet::Result<()> {
    let run = resolve(m)?;
    let train = Dataset::load(path(m, "data"))?;
    let held = match m.get_one::<PathBuf>("eval-data") {
        Some(p) => Some(Dataset::load(p)?),
        None => None,
    };
    let eval = held.as_ref().unwrap_or(&train);
    let out = path(m, "out");
    create_dir(out)?;
    echo(&run, out)?;
    let rows = ablate(&run, &train.samples, &eval.samples, threads()?)?;
    for r in &rows {
        let p = out.join(format!("{}.json", r.variant));
        fs::write(&p, format!("{}\n", r.metrics.to_json())).map_err(|e| io_err(&p, e))?;
    }
    let table = ablation_table(&rows);
    let p = out.join("summary.txt");
    fs::write(&p, &table).map_err(|e| io_err(&p, e))?;
    print!("{table}");
    Ok(())
}

fn save_ten(dir: &Path, name: &str, t: &Tensor<f32>) -> lpanet::Result<()> {
    ten1::save(t, &dir.join(name))
}

fn cmd_inspect(m: &ArgMatches) -> lpanet::Result<()> {
    let dir = path(m, "ckpt");
    let ckpt = Checkpoint::load(dir)?;
    echo_checkpoint(dir)?;
    let data = Dataset::load(path(m, "data"))?;
    let index = *m.get_one::<usize>("sample").expect("defaulted");
    let sample = data.samples.get(index).ok_or_else(|| {
        Error::Validation(format!(
            "sample {index} out of range, dataset has {}",
            data.samples.len()
        ))
    })?;
    let out = path(m, "out");
    create_dir(out)?;
    let view = inspect(&ckpt.model, sample, ckpt.state.stage)?;
    for (prefix, maps) in [
        ("ir_response", &view.ir_response),
        ("rgb_response", &view.rgb_response),
    ] {
        if let Some(maps) = maps {
            for c in 0..maps.shape()[0] {
                pgm::write(&out.join(format!("{prefix}_{c}.pgm")), maps, c)?;
            }
        }
    }
    if let Some((dy, dx)) = &view.offsets {
        save_ten(out, "offset_dy.ten", dy)?;
        save_ten(out, "offset_dx.ten", dx)?;
        let n = dy.numel() as f64;
        let mean_abs =
            |t: &Tensor<f32>| t.data().iter().map(|v| f64::from(v.abs())).sum::<f64>() / n;
        println!("mean_abs_offset_dy = {:.6}", mean_abs(dy));
        println!("mean_abs_offset_dx = {:.6}", mean_abs(dx));
    }
    for (name, t) in [
        ("best_index.ten", &view.best_index),
        ("v_ir_to_rgb.ten", &view.v_ir_to_rgb),
        ("v_rgb_to_ir.ten", &view.v_rgb_to_ir),
    ] {
        if let Some(t) = t {
            save_ten(out, name, t)?;
        }
    }
    println!("wrote inspection of sample {index} to {}", out.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } | Error::Shape { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("gen", m)) => cmd_gen(m),
        Some(("train", m)) => cmd_train(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("ablate", m)) => cmd_ablate(m),
        Some(("inspect", m)) => cmd_inspect(m),
        _ => unreachable!("subcommand is required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_config_file_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "epochs = 7\nseed = 3\n").unwrap();
        let m = cli()
            .try_get_matches_from([
                "lpanet",
                "gen",
                "--out",
                "x",
                "--fast",
                "--config",
                cfg.to_str().unwrap(),
                "--seed",
                "9",
                "--lr_stage1",
                "0.1",
            ])
            .unwrap();
        let run = resolve(m.subcommand_matches("gen").unwrap()).unwrap();
        assert_eq!(
            (run.epochs, run.seed, run.count, run.lr_stage1),
            (7, 9, 32, 0.1)
        );
    }
}
