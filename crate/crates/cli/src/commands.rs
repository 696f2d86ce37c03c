use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use moelab::checkpoint;
use moelab::compression::{edit_experts, merge_experts, prune_experts, CompressionMap};
use moelab::data::{generate_corpus, read_jsonl, split_corpus, write_jsonl};
use moelab::kd::calibrate_router;
use moelab::model::MoeModel;
use moelab::pipeline::{analyze, report_tables, AnalyzeOptions};
use moelab::train::train_teacher;
use serde::Serialize;

use crate::config::{Method, RunConfig};
use crate::error::{CliError, CliResult};
use crate::{AnalyzeArgs, CalibrateArgs, Cli, Command, CompressArgs, ReportArgs, TrainArgs};

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.clone();
    }
    match &cli.command {
        Command::TrainTeacher(args) => train(config, cli.seed, args),
        Command::Compress(args) => compress(config, args),
        Command::Calibrate(args) => calibrate(config, args),
        Command::Analyze(args) => analyze_cmd(&config, cli.seed, args),
        Command::Report(args) => report(args),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_json_lines<T: Serialize>(records: &[T], path: &Path) -> CliResult<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn stem(path: &Path) -> CliResult<String> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| CliError::Config(format!("{}: not a file path", path.display())))
}

fn or_run_file(path: &Option<PathBuf>, config: &RunConfig, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| config.output_dir.join(name))
}

fn read_corpus(path: &Path) -> CliResult<Vec<moelab::model::Sequence>> {
    read_jsonl(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn train(mut config: RunConfig, seed: Option<u64>, args: &TrainArgs) -> CliResult<()> {
    if let Some(s) = seed {
        config.set_seed(s);
    }
    if let Some(steps) = args.steps {
        config.teacher.steps = steps;
    }
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    let corpus = generate_corpus(&config.corpus)?;
    let (calib, held_out) = split_corpus(&corpus.sequences, config.calib_fraction)?;
    info!(
        "training teacher for {} steps on {} sequences",
        config.teacher.steps,
        calib.len()
    );
    let init = MoeModel::init(config.model.clone())?;
    let (teacher, log) = train_teacher(&init, &calib, &config.teacher)?;
    checkpoint::save(&teacher, out.join("teacher.moec"))?;
    write_json_lines(&log, &out.join("train_log.jsonl"))?;
    write_jsonl(&calib, out.join("calib.jsonl"))?;
    write_jsonl(&held_out, out.join("heldout.jsonl"))?;
    write_json(&config, &out.join("config.json"))?;
    if let Some(last) = log.last() {
        info!("final training loss {:.6}", last.loss);
    }
    Ok(())
}

fn compress(mut config: RunConfig, args: &CompressArgs) -> CliResult<()> {
    let c = &mut config.compression;
    if let Some(m) = args.method {
        c.method = m;
    }
    if let Some(r) = args.retention {
        c.retention = r;
    }
    if let Some(r) = args.rank_ratio {
        c.rank_ratio = r;
    }
    if args.target.is_some() {
        c.target = args.target;
    }
    let teacher = checkpoint::load(or_run_file(&args.teacher, &config, "teacher.moec"))?;
    let method = config.compression.method;
    let (student, map) = match method {
        Method::Prune => {
            let calib = read_corpus(&or_run_file(&args.calib, &config, "calib.jsonl"))?;
            let (s, m) = prune_experts(&teacher, config.compression.retention, &calib)?;
            (s, CompressionMap::Prune(m))
        }
        Method::Edit => {
            let (s, m) = edit_experts(&teacher, config.compression.rank_ratio)?;
            (s, CompressionMap::Edit(m))
        }
        Method::Merge => {
            let calib = read_corpus(&or_run_file(&args.calib, &config, "calib.jsonl"))?;
            let target = config.compression.merge_target(teacher.config.n_experts);
            let (s, m) = merge_experts(&teacher, target, &calib)?;
            (s, CompressionMap::Merge(m))
        }
    };
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    let name = method.name();
    checkpoint::save(&student, out.join(format!("student_{name}.moec")))?;
    write_json(&map, &out.join(format!("map_{name}.json")))?;
    info!("{name}: experts per layer {:?}", student.expert_counts());
    Ok(())
}

fn calibrate(mut config: RunConfig, args: &CalibrateArgs) -> CliResult<()> {
    let kd = &mut config.kd;
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field {
                kd.$field = v;
            }
        )*};
    }
    set!(
        temperature,
        learning_rate,
        epochs,
        batch_size,
        grad_accum,
        max_seq_len,
        max_samples,
        epsilon,
        optimizer
    );
    config.kd.validate()?;
    let teacher = checkpoint::load(or_run_file(&args.teacher, &config, "teacher.moec"))?;
    let student = checkpoint::load(&args.student)?;
    let calib = read_corpus(&or_run_file(&args.calib, &config, "calib.jsonl"))?;
    let run = calibrate_router(&teacher, &student, &calib, &config.kd)?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    checkpoint::save(&run.student, out.join(format!("{}_R.moec", stem(&args.student)?)))?;
    write_json_lines(&run.history, &out.join("kd_log.jsonl"))?;
    write_json(&config.kd, &out.join("kd_config.json"))?;
    info!(
        "{} distillation steps, final loss {:.6e}",
        run.history.len(),
        run.state.last_loss
    );
    Ok(())
}

fn analyze_cmd(config: &RunConfig, seed: Option<u64>, args: &AnalyzeArgs) -> CliResult<()> {
    let teacher = checkpoint::load(or_run_file(&args.teacher, config, "teacher.moec"))?;
    let student = checkpoint::load(&args.student)?;
    let map: Option<CompressionMap> = match &args.map {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            Some(serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let corpus = read_corpus(&or_run_file(&args.corpus, config, "heldout.jsonl"))?;
    let out = match &args.out {
        Some(p) => p.clone(),
        None => config.output_dir.join(format!("analysis_{}", stem(&args.student)?)),
    };
    fs::create_dir_all(&out)?;
    let options = AnalyzeOptions {
        spot_checks: args.spot_checks,
        seed: seed.unwrap_or(0),
        temperature: config.kd.temperature,
        epsilon: config.kd.epsilon,
    };
    let summary = analyze(&teacher, &student, map.as_ref(), &corpus, &out, &options)?;
    info!(
        "{}: kd loss {:.6e}, best {:.3}, worst {:.3}",
        out.display(),
        summary.kd_loss,
        summary.best,
        summary.worst
    );
    Ok(())
}

fn report(args: &ReportArgs) -> CliResult<()> {
    let (csv, text) = report_tables(&args.runs)?;
    let out = args.out.clone().unwrap_or_else(|| args.runs[0].clone());
    fs::create_dir_all(&out)?;
    fs::write(out.join("report.csv"), csv)?;
    fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
