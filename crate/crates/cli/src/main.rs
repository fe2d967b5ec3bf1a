//! `mdnet`: reproducible pipelines over the multi-decoder segmentation
//! network. All randomness is controlled by `--seed`; config comes from
//! `--config`, the `MDNET_CONFIG` env var, or built-in defaults.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.

mod plot;

use clap::{Args, Parser, Subcommand};
use mdnet_core::config::AppConfig;
use mdnet_core::error::Error;
use mdnet_core::metrics::{write_metrics_csv, CaseMetrics, FiltrationCurve};
use mdnet_core::model::MdNet;
use mdnet_core::nifti::{load_label_mask, load_scalar_volume, save_label_mask, save_scalar_volume};
use mdnet_core::phantom::PhantomNoiseConfig;
use mdnet_core::pipeline::{
    evaluate_case, generate_phantom_dataset, list_cases, load_case, load_training_set,
    load_uncertainty_maps, parallel_map, preprocess_case, save_uncertainty_maps, segment_case,
    uncertainty_for_case, CaseEntry,
};
use mdnet_core::postprocess::postprocess_probs;
use mdnet_core::train::{kfold_split, train_model, TrainSample};
use mdnet_core::volume::{MultiModalVolume, ProbabilityMapSet, Region};
use std::path::{Path, PathBuf};

type Scalar = mdnet_core::TrainScalar;

#[derive(Parser)]
#[command(name = "mdnet", version, about = "Multi-decoder brain tumor segmentation pipelines")]
struct Cli {
    /// JSON config file; defaults to $MDNET_CONFIG, then built-ins.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master random seed, overriding the config's train/augment seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-case stages; output is identical for any N.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset of N cases.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// Case extent as D,H,W.
        #[arg(long, value_delimiter = ',', default_values_t = [64, 64, 48])]
        shape: Vec<usize>,
    },
    /// Materialize preprocessed inputs (12-channel stacks) per case.
    Preprocess {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train models; cross-validation and ensembling via --folds/--ensemble.
    Train(TrainArgs),
    /// Segment a dataset with one model.
    Predict {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a dataset with a model ensemble (mean probabilities).
    EnsemblePredict {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint files, or a directory of *.ckpt files.
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run thresholding/nesting/component rules on saved probability maps.
    Postprocess {
        /// Directory holding {case}_prob_{whole,core,enhance}.nii.gz.
        #[arg(long)]
        probs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-region uncertainty score maps from an ensemble.
    Uncertainty {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth; write the metrics CSV.
    Evaluate {
        /// Directory holding {case}_seg.nii.gz predictions.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Directory holding {case}_unc_{region}.nii.gz maps.
        #[arg(long)]
        unc: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Emit PNG plots (filtration curves; loss curves with --history).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Training history CSVs to plot in the report.
        #[arg(long, num_args = 0..)]
        history: Vec<PathBuf>,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Cross-validation folds (1 = train on everything).
    #[arg(long)]
    folds: Option<usize>,
    /// Ensemble members per fold.
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    std::process::exit(match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    });
}

/// 1 for validation errors, 2 for runtime failures.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::MalformedFile(_) | Error::DivergedLoss(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> mdnet_core::Result<()> {
    let mut config = AppConfig::resolve(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        config.augment.seed = seed;
    }
    config.validate()?;
    log::info!(
        "effective config: {}",
        serde_json::to_string(&config).expect("config serializes")
    );
    let workers = cli.workers.max(1);

    match cli.command {
        Command::Phantom { out, n, shape } => {
            if shape.len() != 3 {
                return Err(Error::InvalidConfig("--shape takes D,H,W".into()));
            }
            let shape = [shape[0], shape[1], shape[2]];
            let seed = cli.seed.unwrap_or(config.train.seed);
            generate_phantom_dataset(&out, n, shape, seed, &PhantomNoiseConfig::default())?;
            println!("wrote {n} cases to {}", out.display());
        }
        Command::Preprocess { dataset, out } => {
            let cases = list_cases(&dataset)?;
            std::fs::create_dir_all(&out)?;
            let results = parallel_map(&cases, workers, |_, case| -> mdnet_core::Result<()> {
                let (vol, _) = load_case::<Scalar>(case)?;
                let pre = preprocess_case(&vol, &config.preprocess)?;
                save_scalar_volume(
                    &pre.input,
                    &out.join(format!("{}_input.nii.gz", case.name)),
                )
            });
            results.into_iter().collect::<mdnet_core::Result<()>>()?;
            println!("preprocessed {} cases", cases.len());
        }
        Command::Train(args) => train_cmd(args, &config, workers)?,
        Command::Predict {
            dataset,
            model,
            out,
        } => {
            let models = vec![MdNet::<Scalar>::load(&model)?];
            predict_cmd(&dataset, &models, &out, &config, workers)?;
        }
        Command::EnsemblePredict {
            dataset,
            models,
            out,
        } => {
            let models = load_models(&models)?;
            predict_cmd(&dataset, &models, &out, &config, workers)?;
        }
        Command::Postprocess { probs, out } => postprocess_cmd(&probs, &out, &config)?,
        Command::Uncertainty {
            dataset,
            models,
            out,
        } => {
            let models = load_models(&models)?;
            let cases = list_cases(&dataset)?;
            std::fs::create_dir_all(&out)?;
            let results = parallel_map(&cases, workers, |_, case| -> mdnet_core::Result<()> {
                let (vol, _) = load_case::<Scalar>(case)?;
                let maps = uncertainty_for_case(&models, &vol, &config)?;
                save_uncertainty_maps(&out, &case.name, &maps, vol.spacing)
            });
            results.into_iter().collect::<mdnet_core::Result<()>>()?;
            println!("wrote uncertainty maps for {} cases", cases.len());
        }
        Command::Evaluate {
            pred,
            dataset,
            unc,
            out,
            report,
            history,
        } => evaluate_cmd(&pred, &dataset, unc.as_deref(), &out, report.as_deref(), &history, &config, workers)?,
        Command::Selftest => {
            let ok = mdnet_core::selftest::run(|name, passed| {
                println!("{}: {name}", if passed { "PASS" } else { "FAIL" });
            })?;
            if !ok {
                return Err(Error::InvalidConfig("selftest failed".into()));
            }
        }
    }
    Ok(())
}

/// Expands directory arguments into their sorted `*.ckpt` contents.
fn load_models(paths: &[PathBuf]) -> mdnet_core::Result<Vec<MdNet<Scalar>>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    files.iter().map(MdNet::load).collect()
}

fn train_cmd(args: TrainArgs, config: &AppConfig, workers: usize) -> mdnet_core::Result<()> {
    let mut train_cfg = config.train.clone();
    if let Some(f) = args.folds {
        train_cfg.n_folds = f;
    }
    if let Some(m) = args.ensemble {
        train_cfg.n_ensemble = m;
    }
    if let Some(e) = args.epochs {
        train_cfg.n_epochs = e;
    }
    train_cfg.validate()?;
    std::fs::create_dir_all(&args.out)?;

    let samples: Vec<TrainSample<Scalar>> = load_training_set(
        &args.dataset,
        &config.preprocess,
        Some(&config.augment),
        workers,
    )?;

    let fold_sets: Vec<Vec<usize>> = if train_cfg.n_folds <= 1 {
        vec![(0..samples.len()).collect()]
    } else {
        kfold_split(samples.len(), train_cfg.n_folds, train_cfg.seed)?
            .into_iter()
            .map(|(train_idx, _)| train_idx)
            .collect()
    };

    for (f, idx) in fold_sets.iter().enumerate() {
        let fold_samples: Vec<TrainSample<Scalar>> = idx
            .iter()
            .map(|&i| TrainSample {
                input: samples[i].input.clone(),
                targets: samples[i].targets.clone(),
            })
            .collect();
        for m in 0..train_cfg.n_ensemble {
            let seed = train_cfg.seed + m as u64;
            let mut member_cfg = train_cfg.clone();
            member_cfg.seed = seed;
            let mut model = MdNet::<Scalar>::new(config.model.clone(), seed)?;
            let history = train_model(&mut model, &fold_samples, &member_cfg, &config.loss)?;
            let stem = format!("fold{f}_member{m}");
            model.save(args.out.join(format!("{stem}.ckpt")))?;
            history.write_csv(args.out.join(format!("{stem}_history.csv")))?;
            let last = history.epochs.last().expect("at least one epoch");
            log::info!(
                "{stem}: {} epochs, final loss {:.4}, dice {:?}",
                history.epochs.len(),
                last.mean_loss,
                last.dice
            );
        }
    }
    println!(
        "trained {} model(s) into {}",
        fold_sets.len() * train_cfg.n_ensemble,
        args.out.display()
    );
    Ok(())
}

fn prob_paths(dir: &Path, case: &str) -> [PathBuf; 3] {
    [
        dir.join(format!("{case}_prob_whole.nii.gz")),
        dir.join(format!("{case}_prob_core.nii.gz")),
        dir.join(format!("{case}_prob_enhance.nii.gz")),
    ]
}

fn save_probs(
    dir: &Path,
    case: &str,
    probs: &ProbabilityMapSet<Scalar>,
    spacing: [f64; 3],
) -> mdnet_core::Result<()> {
    for (region, path) in Region::ALL.iter().zip(prob_paths(dir, case)) {
        let vol = MultiModalVolume {
            data: probs.get(*region).clone().insert_axis(ndarray::Axis(0)),
            spacing,
            channel_names: vec![format!("prob_{}", region.name())],
        };
        save_scalar_volume(&vol, &path)?;
    }
    Ok(())
}

fn predict_cmd(
    dataset: &Path,
    models: &[MdNet<Scalar>],
    out: &Path,
    config: &AppConfig,
    workers: usize,
) -> mdnet_core::Result<()> {
    let cases = list_cases(dataset)?;
    std::fs::create_dir_all(out)?;
    let results = parallel_map(&cases, workers, |_, case| -> mdnet_core::Result<()> {
        let (vol, _) = load_case::<Scalar>(case)?;
        let (labels, probs) = segment_case(models, &vol, config)?;
        save_label_mask(&labels, &out.join(format!("{}_seg.nii.gz", case.name)))?;
        save_probs(out, &case.name, &probs, vol.spacing)
    });
    results.into_iter().collect::<mdnet_core::Result<()>>()?;
    println!("segmented {} cases into {}", cases.len(), out.display());
    Ok(())
}

fn postprocess_cmd(probs_dir: &Path, out: &Path, config: &AppConfig) -> mdnet_core::Result<()> {
    // Case names are recovered from the *_prob_whole.nii.gz files.
    let mut names: Vec<String> = std::fs::read_dir(probs_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_string_lossy()
                .strip_suffix("_prob_whole.nii.gz")
                .map(str::to_string)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no *_prob_whole.nii.gz files under {}",
            probs_dir.display()
        )));
    }
    std::fs::create_dir_all(out)?;
    for name in &names {
        let paths = prob_paths(probs_dir, name);
        let whole = load_scalar_volume::<Scalar>(&paths[0])?;
        let core = load_scalar_volume::<Scalar>(&paths[1])?;
        let enhancing = load_scalar_volume::<Scalar>(&paths[2])?;
        let spacing = whole.spacing;
        let take = |v: MultiModalVolume<Scalar>| v.data.index_axis_move(ndarray::Axis(0), 0);
        let probs = ProbabilityMapSet {
            whole: take(whole),
            core: take(core),
            enhancing: take(enhancing),
        };
        let labels = postprocess_probs(&probs, spacing, &config.postprocess)?;
        save_label_mask(&labels, &out.join(format!("{name}_seg.nii.gz")))?;
    }
    println!("postprocessed {} cases", names.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cmd(
    pred: &Path,
    dataset: &Path,
    unc: Option<&Path>,
    out: &Path,
    report: Option<&Path>,
    history: &[PathBuf],
    config: &AppConfig,
    workers: usize,
) -> mdnet_core::Result<()> {
    let cases = list_cases(dataset)?;
    let per_case = parallel_map(&cases, workers, |_, case: &CaseEntry| {
        let truth = load_label_mask(&case.dir.join("seg.nii.gz"))?;
        let pred_mask = load_label_mask(&pred.join(format!("{}_seg.nii.gz", case.name)))?;
        let unc_maps = match unc {
            Some(dir) => Some(load_uncertainty_maps(dir, &case.name)?),
            None => None,
        };
        evaluate_case(
            &case.name,
            &pred_mask,
            &truth,
            unc_maps.as_ref(),
            &config.metrics,
        )
    });
    let mut rows: Vec<CaseMetrics> = Vec::new();
    let mut curves: Vec<FiltrationCurve> = Vec::new();
    for r in per_case {
        let (case_rows, case_curves) = r?;
        rows.extend(case_rows);
        curves.extend(case_curves);
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_metrics_csv(out, &rows)?;
    println!("wrote {} metric rows to {}", rows.len(), out.display());

    if let Some(report_dir) = report {
        std::fs::create_dir_all(report_dir)?;
        if !curves.is_empty() {
            // Mean dice-vs-τ per region (curves come in region order).
            let mut series = Vec::new();
            for r in 0..Region::ALL.len() {
                let region_curves: Vec<&FiltrationCurve> =
                    curves.iter().skip(r).step_by(3).collect();
                let n = region_curves.len() as f64;
                let taus = &region_curves[0].thresholds;
                let points: Vec<(f64, f64)> = taus
                    .iter()
                    .enumerate()
                    .map(|(i, &tau)| {
                        let mean = region_curves.iter().map(|c| c.dice_at_tau[i]).sum::<f64>() / n;
                        (tau as f64, mean)
                    })
                    .collect();
                series.push(plot::Series { points });
            }
            plot::line_plot(&report_dir.join("filtration_curves.png"), &series)?;
        }
        if !history.is_empty() {
            let points: Vec<Vec<(f64, f64)>> = history
                .iter()
                .map(|h| read_history_loss(h))
                .collect::<mdnet_core::Result<_>>()?;
            let series: Vec<plot::Series> =
                points.into_iter().map(|points| plot::Series { points }).collect();
            plot::line_plot(&report_dir.join("loss_curves.png"), &series)?;
        }
        println!("wrote report plots to {}", report_dir.display());
    }
    Ok(())
}

/// Reads (epoch, loss) points from a training history CSV.
fn read_history_loss(path: &Path) -> mdnet_core::Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut points = Vec::new();
    for line in text.lines().skip(1) {
        let mut cols = line.split(',');
        let epoch: f64 = cols
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::MalformedFile(format!("{}: bad epoch", path.display())))?;
        let loss: f64 = cols
            .nth(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::MalformedFile(format!("{}: bad loss", path.display())))?;
        points.push((epoch, loss));
    }
    Ok(points)
}
