//! Command-line front end. `run` returns the process exit code:
//! 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analysis::{cumulative_explained_variance, rank_directions};
use crate::config::{parse_eval_mode, RunConfig};
use crate::dssa::DssaMode;
use crate::error::{Result, ScptError};
use crate::gradcheck::{gradcheck, GradcheckConfig};
use crate::harness::{binary_metrics, build_loso, mean_std, segment_trial, synth_dataset_with, Sample, SynthConfig};
use crate::io::{
    load_checkpoint, load_dataset, load_waveform, matrix_to_pgm, read_text, save_checkpoint, save_dataset, save_tensors, tfr_tensors,
    write_csv, write_file,
};
use crate::model::{ModelConfig, ScptModel};
use crate::signal_tfr::{Morse, TfrPipeline};
use crate::tensor::Matrix;
use crate::train::{forward_all, predict, prepare_clips, run_fold, EpochLog, PreparedClip};

/// Gradient check tolerance on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "scpt", version, about = "Facial video + pulse emotion recognition with decoupled adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Morse scalogram of a waveform, band-cropped, resized and normalised.
    Tfr {
        wave: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 3.0)]
        gamma: f64,
        #[arg(long, default_value_t = 20.0)]
        beta: f64,
        #[arg(long, default_value_t = 16)]
        voices: usize,
        #[arg(long)]
        f_lo: Option<f64>,
        #[arg(long)]
        f_hi: Option<f64>,
        /// Also write a grayscale PGM of the image.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Synthetic dataset with subject confounds.
    Synth {
        #[arg(long)]
        subjects: usize,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        confound: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30.0)]
        seconds: f64,
        dir: PathBuf,
    },
    /// Leave-one-subject-out training.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Fold index or `all`.
        #[arg(long, default_value = "all")]
        fold: String,
        data_dir: PathBuf,
        run_dir: PathBuf,
    },
    /// Per-subject accuracy and F1 of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `train_path` or `invariant`.
        #[arg(long, default_value = "invariant")]
        mode: String,
        /// Run config; defaults to the `config.ini` next to or above the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
        data_dir: PathBuf,
    },
    /// Label relevance of the shared singular directions, per fold.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        /// Dataset directory; defaults to the one recorded by `train`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of the training gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "tiny")]
        profile: String,
        #[arg(long, default_value_t = 64)]
        entries: usize,
    },
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("SCPT_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ScptError::InvalidArgument(format!("SCPT_THREADS={v} is not a positive integer")))?;
    #[cfg(feature = "parallel")]
    {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Tfr { wave, out, size, gamma, beta, voices, f_lo, f_hi, pgm } => {
            let defaults = TfrPipeline::default();
            let pipeline = TfrPipeline {
                morse: Morse { gamma, beta },
                voices_per_octave: voices,
                f_lo_hz: f_lo.unwrap_or(defaults.f_lo_hz),
                f_hi_hz: f_hi.unwrap_or(defaults.f_hi_hz),
                out_rows: size,
                out_cols: size,
            };
            if size == 0 || voices == 0 {
                return Err(ScptError::InvalidArgument("size and voices must be >= 1".into()));
            }
            let tfr = pipeline.run(&load_waveform(&wave)?)?;
            save_tensors(&out, &tfr_tensors(&tfr))?;
            if let Some(p) = pgm {
                // Highest frequency on top.
                let flipped = Matrix::from_fn(tfr.rows(), tfr.cols(), |r, c| tfr.values[(tfr.rows() - 1 - r, c)]);
                write_file(&p, &matrix_to_pgm(&flipped))?;
            }
            println!("{}: {}x{} TFR, ridge at {:.3} Hz", out.display(), tfr.rows(), tfr.cols(), tfr.ridge_frequency());
            Ok(0)
        }
        Command::Synth { subjects, trials, confound, seed, seconds, dir } => {
            let cfg = SynthConfig { trial_seconds: seconds, ..Default::default() };
            let data = synth_dataset_with(&cfg, subjects, trials, confound, seed)?;
            save_dataset(&dir, &data)?;
            println!("wrote {} trials to {}", data.len(), dir.display());
            Ok(0)
        }
        Command::Train { config, fold, data_dir, run_dir } => train(&config, &fold, &data_dir, &run_dir),
        Command::Eval { checkpoint, mode, config, out, data_dir } => {
            let mode = parse_eval_mode(&mode).ok_or_else(|| ScptError::InvalidArgument(format!("mode `{mode}` is not train_path or invariant")))?;
            eval(&checkpoint, mode, config.as_deref(), out.as_deref(), &data_dir)
        }
        Command::Analyze { run, data } => analyze(&run, data.as_deref()),
        Command::Gradcheck { seed, profile, entries } => {
            let config = ModelConfig::profile(&profile).ok_or_else(|| ScptError::InvalidArgument(format!("unknown profile `{profile}`")))?;
            let report = gradcheck(&config, &GradcheckConfig { seed, max_entries: entries, ..Default::default() })?;
            for t in &report.tensors {
                println!("{:<40} checked {:>3} skipped {:>3} max rel err {:.3e}", t.name, t.checked, t.skipped, t.max_rel_err);
            }
            println!("max relative error: {:.3e}", report.max_rel_err);
            if report.passed(GRADCHECK_TOL) {
                Ok(0)
            } else {
                eprintln!("gradient check failed (tolerance {GRADCHECK_TOL:e})");
                Ok(3)
            }
        }
    }
}

/// Segments trials into clips and prepares model inputs.
pub fn prepare_dataset(cfg: &RunConfig, trials: &[Sample]) -> Result<Vec<PreparedClip>> {
    let mut clips = Vec::new();
    for t in trials {
        clips.extend(segment_trial(t, cfg.data.clip_seconds)?);
    }
    prepare_clips(&clips, &cfg.model, &cfg.tfr_pipeline())
}

fn fold_dir(run_dir: &Path, i: usize) -> PathBuf {
    run_dir.join(format!("fold_{i:02}"))
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn footer(acc: &[f64], f1: &[f64]) -> Vec<String> {
    let (am, asd) = mean_std(acc);
    let (fm, fsd) = mean_std(f1);
    vec![format!("mean±std,,{am:.4}±{asd:.4},{fm:.4}±{fsd:.4}")]
}

fn train(config: &Path, fold: &str, data_dir: &Path, run_dir: &Path) -> Result<i32> {
    let cfg = RunConfig::parse(&read_text(config)?)?;
    let data = prepare_dataset(&cfg, &load_dataset(data_dir)?)?;
    let keys: Vec<_> = data.iter().map(|c| c.key).collect();
    let plan = build_loso(&keys, cfg.data.split_seed)?;
    let folds: Vec<usize> = if fold == "all" {
        (0..plan.folds.len()).collect()
    } else {
        let i: usize = fold.parse().map_err(|_| ScptError::InvalidArgument(format!("fold `{fold}` is not an index or `all`")))?;
        if i >= plan.folds.len() {
            return Err(ScptError::InvalidArgument(format!("fold {i} out of range (0..{})", plan.folds.len())));
        }
        vec![i]
    };
    write_file(&run_dir.join("config.ini"), cfg.to_ini().as_bytes())?;
    let data_abs = std::fs::canonicalize(data_dir).map_err(|e| ScptError::io(data_dir, e))?;
    write_file(&run_dir.join("run.txt"), format!("data_dir={}\n", data_abs.display()).as_bytes())?;

    let mut rows = Vec::new();
    let (mut accs, mut f1s) = (Vec::new(), Vec::new());
    for i in folds {
        let f = &plan.folds[i];
        let mut logs: Vec<EpochLog> = Vec::new();
        let (model, result) = run_fold(&cfg.model, &cfg.train, &data, f, i, None, |l| {
            eprintln!(
                "fold {i} epoch {:>3} lr {:.2e} loss {:.4} (task {:.4}) val acc {:.4}",
                l.epoch, l.lr, l.total, l.task, l.val_accuracy
            );
            logs.push(l.clone());
        })?;
        let dir = fold_dir(run_dir, i);
        save_checkpoint(&model.store, &dir.join("checkpoint.scpt"))?;
        write_file(&dir.join("fold.txt"), format!("fold={i}\ntest_subject={}\n", f.test_subject).as_bytes())?;
        let log_rows: Vec<Vec<String>> = logs
            .iter()
            .map(|l| {
                vec![l.epoch.to_string(), format!("{:e}", l.lr), fmt(l.task), fmt(l.specific), fmt(l.orth), fmt(l.sub), fmt(l.total), fmt(l.val_accuracy), fmt(l.val_f1)]
            })
            .collect();
        write_csv(&dir.join("train_log.csv"), &["epoch", "lr", "task", "specific", "orth", "sub", "total", "val_acc", "val_f1"], &log_rows, &[])?;
        println!("fold {i} (subject {}): acc {:.4} f1 {:.4}", f.test_subject, result.test.accuracy, result.test.f1);
        accs.push(result.test.accuracy);
        f1s.push(result.test.f1);
        rows.push(vec![i.to_string(), f.test_subject.to_string(), fmt(result.test.accuracy), fmt(result.test.f1)]);
    }
    write_csv(&run_dir.join("results.csv"), &["fold", "test_subject", "accuracy", "f1"], &rows, &footer(&accs, &f1s))?;
    let (am, asd) = mean_std(&accs);
    println!("accuracy {am:.4} ± {asd:.4} over {} folds", accs.len());
    Ok(0)
}

fn find_config(checkpoint: &Path) -> Result<PathBuf> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    [dir.join("config.ini"), dir.join("..").join("config.ini")]
        .into_iter()
        .find(|p| p.exists())
        .ok_or_else(|| ScptError::InvalidArgument(format!("no config.ini near {}; pass --config", checkpoint.display())))
}

fn read_kv(path: &Path, key: &str) -> Result<Option<String>> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(read_text(path)?
        .lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim().to_string()))
}

fn load_model(checkpoint: &Path, cfg: &RunConfig) -> Result<ScptModel> {
    ScptModel::from_store(&cfg.model, load_checkpoint(checkpoint)?)
}

fn eval(checkpoint: &Path, mode: DssaMode, config: Option<&Path>, out: Option<&Path>, data_dir: &Path) -> Result<i32> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => find_config(checkpoint)?,
    };
    let cfg = RunConfig::parse(&read_text(&cfg_path)?)?;
    let model = load_model(checkpoint, &cfg)?;
    let data = prepare_dataset(&cfg, &load_dataset(data_dir)?)?;
    let fold_file = checkpoint.parent().unwrap_or(Path::new(".")).join("fold.txt");
    let only: Option<usize> = match read_kv(&fold_file, "test_subject")? {
        Some(v) => Some(v.parse().map_err(|_| ScptError::CorruptFile(format!("{}: bad test_subject", fold_file.display())))?),
        None => None,
    };
    let mut by_subject: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in data.iter().enumerate() {
        if only.is_none_or(|s| s == c.key.subject_id) {
            by_subject.entry(c.key.subject_id).or_default().push(i);
        }
    }
    if by_subject.is_empty() {
        return Err(ScptError::EmptyEvalSet);
    }
    let mut rows = Vec::new();
    let (mut accs, mut f1s) = (Vec::new(), Vec::new());
    for (subject, ids) in &by_subject {
        let preds: Vec<usize> = predict(&model, &data, ids, mode)?.into_iter().map(|(p, _)| p).collect();
        let labels: Vec<usize> = ids.iter().map(|&i| data[i].label(cfg.train.target)).collect();
        let m = binary_metrics(&preds, &labels)?;
        accs.push(m.accuracy);
        f1s.push(m.f1);
        rows.push(vec![subject.to_string(), ids.len().to_string(), fmt(m.accuracy), fmt(m.f1)]);
    }
    let header = ["subject", "clips", "accuracy", "f1"];
    let foot = if rows.len() > 1 { footer(&accs, &f1s) } else { Vec::new() };
    println!("{}", header.join(","));
    for r in &rows {
        println!("{}", r.join(","));
    }
    for f in &foot {
        println!("{f}");
    }
    if let Some(p) = out {
        write_csv(p, &header, &rows, &foot)?;
    }
    Ok(0)
}

fn analyze(run_dir: &Path, data: Option<&Path>) -> Result<i32> {
    let cfg = RunConfig::parse(&read_text(&run_dir.join("config.ini"))?)?;
    if !cfg.model.use_dssa {
        return Err(ScptError::InvalidArgument("analysis needs a model trained with the adapters".into()));
    }
    let data_dir = match data {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from(
            read_kv(&run_dir.join("run.txt"), "data_dir")?
                .ok_or_else(|| ScptError::InvalidArgument("no recorded dataset; pass --data".into()))?,
        ),
    };
    let data = prepare_dataset(&cfg, &load_dataset(&data_dir)?)?;
    let labels: Vec<usize> = data.iter().map(|c| c.label(cfg.train.target)).collect();
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut fold_dirs: Vec<PathBuf> = std::fs::read_dir(run_dir)
        .map_err(|e| ScptError::io(run_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("checkpoint.scpt").exists())
        .collect();
    fold_dirs.sort();
    if fold_dirs.is_empty() {
        return Err(ScptError::InvalidArgument(format!("no fold checkpoints in {}", run_dir.display())));
    }
    let s = cfg.model.subspace_rank;
    for dir in fold_dirs {
        let model = load_model(&dir.join("checkpoint.scpt"), &cfg)?;
        let outs = forward_all(&model, &data, &ids, DssaMode::InvariantInference)?;
        let d = cfg.model.dim;
        let mut features = Matrix::zeros(outs.len(), d);
        for (i, o) in outs.iter().enumerate() {
            let k = o.cls_shared.len() as f64;
            for f in &o.cls_shared {
                for (dst, v) in features.row_mut(i).iter_mut().zip(f.data()) {
                    *dst += v / k;
                }
            }
        }
        let report = rank_directions(&features, &labels, s)?;
        let rows: Vec<Vec<String>> = report
            .entries
            .iter()
            .map(|e| vec![e.direction.to_string(), fmt(e.abs_r_pb), format!("{:.6e}", e.p_value), e.rank.to_string(), u8::from(e.top_s).to_string()])
            .collect();
        write_csv(&dir.join("directions.csv"), &["direction", "abs_r_pb", "p_value", "rank", "top_s"], &rows, &[])?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match cumulative_explained_variance(&report.sigma) {
            Ok(cev) => {
                let rows: Vec<Vec<String>> = cev.iter().enumerate().map(|(k, v)| vec![(k + 1).to_string(), fmt(*v)]).collect();
                write_csv(&dir.join("cev.csv"), &["k", "cev"], &rows, &[])?;
                let dat: String = cev.iter().enumerate().map(|(k, v)| format!("{} {v}\n", k + 1)).collect();
                write_file(&dir.join("cev.dat"), format!("# k cev\n{dat}").as_bytes())?;
                let significant = report.entries.iter().filter(|e| e.top_s && e.p_value < 0.05).count();
                println!(
                    "{name}: top |r_pb| {:.3} (direction {}), {significant}/{} top directions with p < 0.05, CEV@{s} = {:.3}",
                    report.entries[0].abs_r_pb,
                    report.entries[0].direction,
                    s.min(report.entries.len()),
                    cev[s.min(cev.len()) - 1]
                );
            }
            Err(ScptError::AllZero) => println!("{name}: shared features are all zero (adapters untrained)"),
            Err(e) => return Err(e),
        }
    }
    Ok(0)
}
