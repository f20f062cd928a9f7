//! `ctxseg`: phantom generation, training, inference, evaluation,
//! iteration sweeps and slice rendering.
//!
//! Every configuration key is also a flag (`--train.lr 0.001`) and an
//! environment variable (`CTXSEG_TRAIN__LR=0.001`). Flags beat the
//! environment, which beats `--config`, which beats built-in defaults.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgMatches, Command};
use ctxseg_core::config::{env_name, RunConfig, ENV_PREFIX};
use ctxseg_core::{pipeline, Error};

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .required(true)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .help(help)
}

fn command() -> Command {
    let mut cmd = Command::new("ctxseg")
        .about("Context-aware volumetric segmentation on synthetic phantoms")
        .subcommand_required(true)
        .after_help(format!(
            "Every key flag can also be set through the environment as {ENV_PREFIX}<KEY>, upper-cased with '.' replaced by '__'.\n\
             Exit status: 0 ok, 1 usage or configuration error, 2 data error, 3 numeric error."
        ))
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("PATH")
                .value_parser(value_parser!(PathBuf))
                .help("TOML run configuration"),
        );
    for (key, default) in RunConfig::default().keys() {
        cmd = cmd.arg(
            Arg::new(key.clone())
                .long(key.clone())
                .global(true)
                .value_name("VALUE")
                .allow_negative_numbers(true)
                .help(format!("[default: {default}] [env: {}]", env_name(&key))),
        );
    }
    cmd.subcommand(
        Command::new("gen")
            .about("Write a synthetic phantom dataset and its cases.txt manifest")
            .arg(path_arg("out", "Output dataset directory")),
    )
    .subcommand(
        Command::new("train")
            .about("Train a model; writes logs, best/ and last/ checkpoints")
            .arg(path_arg("data", "Case manifest"))
            .arg(path_arg("out", "Output run directory")),
    )
    .subcommand(
        Command::new("infer")
            .about("Predict labels and probabilities for a case or a manifest")
            .arg(path_arg("checkpoint", "Checkpoint directory"))
            .arg(path_arg("input", "Case directory or case manifest"))
            .arg(path_arg("out", "Output prediction directory")),
    )
    .subcommand(
        Command::new("eval")
            .about("Score predictions against ground truth as a metrics CSV")
            .arg(path_arg("pred", "Prediction directory"))
            .arg(path_arg("truth", "Ground-truth directory"))
            .arg(path_arg("out", "Output CSV file")),
    )
    .subcommand(
        Command::new("sweep")
            .about("Train once per mean-field iteration count in sweep.iterations")
            .arg(path_arg("data", "Case manifest"))
            .arg(path_arg("out", "Output sweep directory")),
    )
    .subcommand(
        Command::new("render")
            .about("Render one slice of labels (PPM) or probabilities (PGM)")
            .arg(path_arg("input", "Case or prediction directory, or a tensor file"))
            .arg(
                Arg::new("axis")
                    .long("axis")
                    .value_parser(value_parser!(usize))
                    .default_value("0")
                    .help("Slice axis: 0 depth, 1 height, 2 width"),
            )
            .arg(
                Arg::new("slice")
                    .long("slice")
                    .required(true)
                    .value_parser(value_parser!(usize))
                    .help("Slice index along the axis"),
            )
            .arg(
                Arg::new("class")
                    .long("class")
                    .value_parser(value_parser!(usize))
                    .help("Probability channel to draw [default: tumor, 1 - background]"),
            )
            .arg(path_arg("out", "Output image file")),
    )
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a PathBuf {
    m.get_one::<PathBuf>(name).expect("required")
}

fn load_config(m: &ArgMatches) -> Result<RunConfig, Error> {
    let overrides: Vec<(String, String)> = RunConfig::default()
        .keys()
        .into_iter()
        .filter_map(|(k, _)| m.get_one::<String>(&k).map(|v| (k, v.clone())))
        .collect();
    let cfg = RunConfig::load(m.get_one::<PathBuf>("config").map(PathBuf::as_path), std::env::vars(), &overrides)?;
    if cfg.threads > 0 {
        // Fails only when a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    Ok(cfg)
}

fn run(m: &ArgMatches) -> Result<serde_json::Value, Error> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = load_config(sub)?;
    Ok(match name {
        "gen" => {
            let ids = pipeline::cmd_gen(&cfg, path(sub, "out"))?;
            serde_json::json!({ "cases": ids.len() })
        }
        "train" => serde_json::to_value(pipeline::cmd_train(&cfg, path(sub, "data"), path(sub, "out"))?).expect("json"),
        "infer" => {
            let ids = pipeline::cmd_infer(&cfg, path(sub, "checkpoint"), path(sub, "input"), path(sub, "out"))?;
            serde_json::json!({ "cases": ids })
        }
        "eval" => {
            let reports = pipeline::cmd_eval(path(sub, "pred"), path(sub, "truth"), path(sub, "out"))?;
            serde_json::json!({ "cases": reports.len() })
        }
        "sweep" => serde_json::to_value(pipeline::cmd_sweep(&cfg, path(sub, "data"), path(sub, "out"))?).expect("json"),
        "render" => {
            let axis = *sub.get_one::<usize>("axis").expect("defaulted");
            let slice = *sub.get_one::<usize>("slice").expect("required");
            pipeline::cmd_render(path(sub, "input"), axis, slice, path(sub, "out"), sub.get_one::<usize>("class").copied())?;
            serde_json::json!({ "written": path(sub, "out") })
        }
        _ => unreachable!("unknown subcommand {name}"),
    })
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let head = msg.split("\n\nUsage:").next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage: {}", single_line(head));
            return ExitCode::from(1);
        }
    };
    match run(&matches) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error kind={}: {}", e.kind(), single_line(&e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
