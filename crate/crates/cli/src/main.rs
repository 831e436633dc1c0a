use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};

use car_core::analysis::{compute_dependency_map, compute_relation_map, render_heatmap};
use car_core::config::KEYS;
use car_core::experiment::{compare, comparison_csv, comparison_table, Datasets};
use car_core::synth::{self, Split};
use car_core::train::evaluate_miou;
use car_core::{checkpoint, gradcheck, ExperimentConfig, Model, Sample};

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value config file; --<key> flags override it"),
    );
    KEYS.iter().fold(cmd, |cmd, key| {
        cmd.arg(Arg::new(*key).long(*key).value_name("VALUE").hide(true))
    })
}

fn data_arg(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("data")
            .long("data")
            .value_name("DIR")
            .help("dataset written by gen-data (default: regenerate from the config)"),
    )
}

fn split_arg(cmd: Command, default: &'static str) -> Command {
    cmd.arg(
        Arg::new("split")
            .long("split")
            .default_value(default)
            .value_parser(["train", "test_common", "test_rare"]),
    )
}

fn cli() -> Command {
    let checkpoint = Arg::new("checkpoint")
        .long("checkpoint")
        .value_name("FILE")
        .default_value("model.carm");
    Command::new("car")
        .about("Class-aware regularization experiments on synthetic segmentation data")
        .after_help(format!("Config keys (also accepted as --<key> VALUE):\n  {}", KEYS.join(", ")))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(
            Command::new("gen-data")
                .about("Write the synthetic dataset as PPM/PGM files plus index.csv")
                .arg(Arg::new("out").long("out").value_name("DIR").required(true)),
        ))
        .subcommand(data_arg(config_args(
            Command::new("train")
                .about("Train a model, writing a checkpoint and the per-iteration loss CSV")
                .arg(checkpoint.clone())
                .arg(Arg::new("log").long("log").value_name("FILE").default_value("loss.csv")),
        )))
        .subcommand(split_arg(
            data_arg(config_args(
                Command::new("eval")
                    .about("Per-class IoU and mIOU of a checkpoint on one split")
                    .arg(checkpoint.clone())
                    .arg(Arg::new("out").long("out").value_name("FILE").help("CSV path (default: stdout)")),
            )),
            "test_rare",
        ))
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference check of every loss; exit 0 iff all errors are within tolerance")
                .arg(Arg::new("seed").long("seed").default_value("0").value_parser(clap::value_parser!(u64)))
                .arg(
                    Arg::new("instances")
                        .long("instances")
                        .default_value("20")
                        .value_parser(clap::value_parser!(usize)),
                ),
        )
        .subcommand(split_arg(
            data_arg(config_args(
                Command::new("depmap")
                    .about("Class dependency map of a checkpoint (PPM + CSV)")
                    .arg(checkpoint.clone())
                    .arg(Arg::new("out").long("out").value_name("STEM").default_value("depmap"))
                    .arg(
                        Arg::new("raw")
                            .long("raw")
                            .action(ArgAction::SetTrue)
                            .help("raw dot products instead of cosine similarity"),
                    ),
            )),
            "test_common",
        ))
        .subcommand(split_arg(
            data_arg(config_args(
                Command::new("pixrel")
                    .about("Pixel relation map of one sample around an anchor pixel (PPM + CSV)")
                    .arg(checkpoint)
                    .arg(Arg::new("out").long("out").value_name("STEM").default_value("pixrel"))
                    .arg(Arg::new("sample").long("sample").default_value("0").value_parser(clap::value_parser!(usize)))
                    .arg(Arg::new("row").long("row").required(true).value_parser(clap::value_parser!(usize)))
                    .arg(Arg::new("col").long("col").required(true).value_parser(clap::value_parser!(usize))),
            )),
            "test_rare",
        ))
        .subcommand(config_args(
            Command::new("compare")
                .about("Baseline versus +CAR across seeds")
                .arg(Arg::new("seeds").long("seeds").default_value("0,1,2"))
                .arg(Arg::new("out").long("out").value_name("FILE").help("per-seed CSV")),
        ))
}

fn load_config(m: &ArgMatches) -> Result<ExperimentConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
            let mut cfg = ExperimentConfig::default();
            cfg.apply_text(&text).with_context(|| format!("parsing {path}"))?;
            cfg
        }
        None => ExperimentConfig::default(),
    };
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v).with_context(|| format!("--{key}"))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_samples(m: &ArgMatches, cfg: &ExperimentConfig, split: Split) -> Result<Vec<Sample>> {
    if let Some(dir) = m.get_one::<String>("data") {
        return Ok(synth::load_split(Path::new(dir), split)?);
    }
    let count = if split == Split::Train {
        cfg.train_count
    } else {
        cfg.test_count
    };
    Ok(synth::generate(&cfg.scene(), count, split)?)
}

fn split_of(m: &ArgMatches) -> Result<Split> {
    Ok(m.get_one::<String>("split").expect("defaulted").parse()?)
}

fn load_model(m: &ArgMatches) -> Result<Model<f32>> {
    let path = m.get_one::<String>("checkpoint").expect("defaulted");
    checkpoint::load(path).with_context(|| format!("loading checkpoint {path}"))
}

fn write_out(path: Option<&String>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {p}")),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_data(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m)?;
    let data = Datasets::generate(&cfg)?;
    let dir = PathBuf::from(m.get_one::<String>("out").expect("required"));
    let splits: Vec<(Split, Vec<Sample>)> = Split::ALL
        .iter()
        .map(|&s| (s, data.split(s).to_vec()))
        .collect();
    synth::write_dataset(&dir, &splits)?;
    println!(
        "wrote {} train, {} test_common, {} test_rare samples to {}",
        data.train.len(),
        data.test_common.len(),
        data.test_rare.len(),
        dir.display()
    );
    Ok(())
}

fn train_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m)?;
    let data = load_samples(m, &cfg, Split::Train)?;
    let model = Model::build(cfg.model.clone())?;
    let start = Instant::now();
    let (model, log) = car_core::train(model, &data, &cfg.train)?;
    let ckpt = m.get_one::<String>("checkpoint").expect("defaulted");
    let log_path = m.get_one::<String>("log").expect("defaulted");
    checkpoint::save(&model, ckpt)?;
    std::fs::write(log_path, log.to_csv()).with_context(|| format!("writing {log_path}"))?;
    let last = log.rows.last().map(|r| r.losses.total).unwrap_or(f64::NAN);
    println!(
        "trained {} iterations in {:.1}s, final loss {last:.6}; wrote {ckpt} and {log_path}",
        cfg.train.iterations,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn eval_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m)?;
    let model = load_model(m)?;
    let split = split_of(m)?;
    let samples = load_samples(m, &cfg, split)?;
    let report = evaluate_miou(&model, &samples)?;
    let mut csv = String::from("class,iou\n");
    for (k, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => writeln!(csv, "{k},{v:.6}")?,
            None => writeln!(csv, "{k},absent")?,
        }
    }
    writeln!(csv, "miou,{:.6}", report.miou)?;
    writeln!(csv, "pixel_accuracy,{:.6}", report.pixel_accuracy)?;
    write_out(m.get_one::<String>("out"), &csv)
}

fn gradcheck_cmd(m: &ArgMatches) -> Result<bool> {
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let n = *m.get_one::<usize>("instances").expect("defaulted");
    let reports = gradcheck::run_suite(seed, n)?;
    let mut worst: f64 = 0.0;
    for r in &reports {
        println!(
            "{:<20} instances {:>3}  active {:>3}  max relative error {:.3e}  {}",
            r.loss.name(),
            r.instances,
            r.active,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error {worst:.3e} (tolerance {:.0e})", gradcheck::TOLERANCE);
    Ok(reports.iter().all(|r| r.passed()))
}

fn depmap_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m)?;
    let model = load_model(m)?;
    let samples = load_samples(m, &cfg, split_of(m)?)?;
    let raw = m.get_flag("raw");
    let map = compute_dependency_map(&model, &samples, !raw)?;
    let stem = PathBuf::from(m.get_one::<String>("out").expect("defaulted"));
    render_heatmap(&map.matrix(), &stem)?;
    println!(
        "mean off-diagonal {} {:.6}; wrote {}.ppm and {}.csv",
        if raw { "dot product" } else { "cosine" },
        map.mean_off_diagonal(),
        stem.display(),
        stem.display()
    );
    Ok(())
}

fn pixrel_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m)?;
    let model = load_model(m)?;
    let samples = load_samples(m, &cfg, split_of(m)?)?;
    let id = *m.get_one::<usize>("sample").expect("defaulted");
    let Some(sample) = samples.get(id) else {
        bail!("sample {id} out of range ({} samples)", samples.len());
    };
    let anchor = (
        *m.get_one::<usize>("row").expect("required"),
        *m.get_one::<usize>("col").expect("required"),
    );
    let map = compute_relation_map(&model, sample, id, anchor)?;
    let stem = PathBuf::from(m.get_one::<String>("out").expect("defaulted"));
    render_heatmap(&map.matrix(), &stem)?;
    println!("wrote {}.ppm and {}.csv", stem.display(), stem.display());
    Ok(())
}

fn compare_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m)?;
    let seeds = m
        .get_one::<String>("seeds")
        .expect("defaulted")
        .split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    let rows = compare(&cfg, &seeds)?;
    print!("{}", comparison_table(&rows, true));
    print!("{}", comparison_table(&rows, false));
    let csv = comparison_csv(&rows);
    match m.get_one::<String>("out") {
        Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {p}"))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("gen-data", m)) => gen_data(m).map(|_| true),
        Some(("train", m)) => train_cmd(m).map(|_| true),
        Some(("eval", m)) => eval_cmd(m).map(|_| true),
        Some(("gradcheck", m)) => gradcheck_cmd(m),
        Some(("depmap", m)) => depmap_cmd(m).map(|_| true),
        Some(("pixrel", m)) => pixrel_cmd(m).map(|_| true),
        Some(("compare", m)) => compare_cmd(m).map(|_| true),
        _ => unreachable!("subcommand is required"),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
