//! `vesselnet` — train, compress, and evaluate the patch-classification
//! segmentation model. One binary, one stage per subcommand; all stages
//! share the model file format and the `key=value` run configuration.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod data;

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vesselnet::compress::{
    conv_removal_fraction, history_csv, prune_retrain, quantize_retrain, sparsity_report, PruneStop,
};
use vesselnet::config::RunConfig;
use vesselnet::eval::{
    confusion, cross_validate, evaluate_on_images, metrics, roc_auc, segment_image, xval_csv,
    FoldEval,
};
use vesselnet::modelio::{complexity_report, load_model, save_model, ComplexityReport};
use vesselnet::network::{accuracy, train_epoch, train_rng, Network};
use vesselnet::pnm::{read_pnm, write_pgm};
use vesselnet::preprocess::{enhance, FundusImage, LabeledImage, Plane};
use vesselnet::synthetic::synthetic_images;
use vesselnet::{Error, Result};

use data::{load_images, load_task, TaskData};

#[derive(Parser)]
#[command(
    name = "vesselnet",
    version,
    about = "Low-complexity retinal vessel segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file (defaults apply for absent keys)
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = library default)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    /// Directory of image (`X.ppm`) / label (`X.ah.ppm`) pairs
    #[arg(long, value_name = "DIR", conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use the built-in synthetic line-patch task
    #[arg(long)]
    synthetic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a baseline model
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Output model path
        #[arg(long, value_name = "PATH", default_value = "model.tqns")]
        out: PathBuf,
    },
    /// Ternary-quantize the dense layers, retraining to recover accuracy
    Quantize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Input model
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Output model path
        #[arg(long, value_name = "PATH", default_value = "model.quant.tqns")]
        out: PathBuf,
    },
    /// Magnitude-prune the conv layers of a quantized model
    Prune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Input model (dense layers must be quantized)
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Output model path
        #[arg(long, value_name = "PATH", default_value = "model.pruned.tqns")]
        out: PathBuf,
    },
    /// Segment one image into probability and mask maps
    Segment {
        #[command(flatten)]
        common: Common,
        /// Model file
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Input image (PPM or PGM)
        image: PathBuf,
        /// Field-of-view mask (PGM; zero = outside)
        #[arg(long, value_name = "PATH")]
        fov: Option<PathBuf>,
        /// Output prefix for `<prefix>.prob.pgm` / `<prefix>.mask.pgm`
        #[arg(long, value_name = "PREFIX")]
        out: Option<String>,
    },
    /// Evaluate a model: SEN/SPE/ACC/DICE and AUC
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Model file
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
    /// k-fold cross-validation of the original/quantized/pruned variants
    Xval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Also write the fold table to this CSV file
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Layer table with weight counts, MACs, and storage
    Report {
        #[command(flatten)]
        common: Common,
        /// Model file (omitted: a fresh reference network)
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::PipelineOrder(_) => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train { common, data, out } => cmd_train(&common, &data, &out),
        Command::Quantize {
            common,
            data,
            model,
            out,
        } => cmd_quantize(&common, &data, &model, &out),
        Command::Prune {
            common,
            data,
            model,
            out,
        } => cmd_prune(&common, &data, &model, &out),
        Command::Segment {
            common,
            model,
            image,
            fov,
            out,
        } => cmd_segment(&common, &model, &image, fov.as_deref(), out),
        Command::Eval {
            common,
            data,
            model,
        } => cmd_eval(&common, &data, &model),
        Command::Xval { common, data, out } => cmd_xval(&common, &data, out.as_deref()),
        Command::Report { common, model } => cmd_report(&common, model.as_deref()),
    }
}

/// Loads the config, applies flag overrides, sizes the thread pool, and
/// echoes the effective settings as the log header.
fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    if cfg.threads > 0 {
        // Ignore the error when a global pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    print!("{}", cfg.echo());
    Ok(cfg)
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "undefined".to_string(),
    }
}

fn print_eval(eval: &FoldEval) {
    println!("sen={}", fmt_metric(eval.metrics.sen));
    println!("spe={}", fmt_metric(eval.metrics.spe));
    println!("acc={}", fmt_metric(eval.metrics.acc));
    println!("dice={}", fmt_metric(eval.metrics.dice));
    println!("auc={:.4}", eval.auc);
}

fn cmd_train(common: &Common, data: &DataArgs, out: &Path) -> Result<ExitCode> {
    let cfg = resolve_config(common)?;
    let task = load_task(&cfg, data.data.as_deref(), data.synthetic)?;
    let (train, val) = task.train_val(&cfg);
    println!("train_patches={} val_patches={}", train.len(), val.len());

    let mut net = Network::reference(cfg.seed);
    let mut rng = train_rng(cfg.seed.wrapping_add(1000));
    for epoch in 0..cfg.epochs {
        let loss = train_epoch(
            &mut net,
            &train,
            cfg.batch_size,
            cfg.learning_rate,
            &mut rng,
        )?;
        let acc = accuracy(&net, &val)?;
        println!("epoch={epoch} loss={loss:.6} val_accuracy={acc:.4}");
    }
    println!("val_accuracy={:.4}", accuracy(&net, &val)?);
    if let Some(test) = task.test_samples() {
        println!("test_accuracy={:.4}", accuracy(&net, &test)?);
    }
    let bytes = save_model(&net, out)?;
    println!("model={} bytes={bytes}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_quantize(common: &Common, data: &DataArgs, model: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = resolve_config(common)?;
    let task = load_task(&cfg, data.data.as_deref(), data.synthetic)?;
    let (train, val) = task.train_val(&cfg);
    let mut net = load_model(model)?;

    let outcome = quantize_retrain(&mut net, &train, &val, &cfg.schedule())?;
    print!("{}", history_csv(&outcome.history));
    println!("baseline_accuracy={:.4}", outcome.baseline_accuracy);
    println!("final_accuracy={:.4}", outcome.final_accuracy);
    println!(
        "accuracy_drop={:.4}",
        outcome.baseline_accuracy - outcome.final_accuracy
    );
    println!("tolerance_met={}", outcome.tolerance_met);
    if !outcome.tolerance_met {
        eprintln!(
            "warning: accuracy stayed more than {} below baseline after {} rounds; best round kept",
            cfg.tolerance, cfg.quant_rounds
        );
    }
    if let Some(test) = task.test_samples() {
        println!("test_accuracy={:.4}", accuracy(&net, &test)?);
    }
    let bytes = save_model(&net, out)?;
    println!("model={} bytes={bytes}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_prune(common: &Common, data: &DataArgs, model: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = resolve_config(common)?;
    let task = load_task(&cfg, data.data.as_deref(), data.synthetic)?;
    let (train, val) = task.train_val(&cfg);
    let mut net = load_model(model)?;

    let outcome = prune_retrain(&mut net, &train, &val, &cfg.schedule())?;
    print!("{}", history_csv(&outcome.history));
    println!("stop_reason={}", outcome.stop.describe());
    for row in sparsity_report(&net) {
        if row.kind == "conv" {
            println!(
                "conv{}: {} -> {} active (removal {:.4})",
                row.layer_index, row.original_count, row.active_count, row.removal_fraction
            );
        }
    }
    println!("conv_removal={:.4}", conv_removal_fraction(&net));
    println!("baseline_accuracy={:.4}", outcome.baseline_accuracy);
    println!("final_accuracy={:.4}", outcome.final_accuracy);
    println!(
        "accuracy_drop={:.4}",
        outcome.baseline_accuracy - outcome.final_accuracy
    );
    if cfg.prune_k == 0.0 {
        eprintln!("warning: prune_k=0 disables pruning; model written unchanged");
    }
    if let Some(test) = task.test_samples() {
        println!("test_accuracy={:.4}", accuracy(&net, &test)?);
    }
    let bytes = save_model(&net, out)?;
    println!("model={} bytes={bytes}", out.display());
    if matches!(outcome.stop, PruneStop::LayerEmptied) {
        eprintln!(
            "error: pruning would have emptied a conv layer; the round was rolled back \
             and the last good model written"
        );
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_segment(
    common: &Common,
    model: &Path,
    image: &Path,
    fov: Option<&Path>,
    out: Option<String>,
) -> Result<ExitCode> {
    let cfg = resolve_config(common)?;
    let net = load_model(model)?;
    let fundus = FundusImage::from_pnm(&read_pnm(image)?)?;
    let enhanced = enhance(&fundus, cfg.equalize_window)?;
    let fov_plane = match fov {
        Some(path) => Some(Plane::from_pnm(&read_pnm(path)?)?),
        None => None,
    };
    let seg = segment_image(&net, &enhanced, fov_plane.as_ref(), cfg.segment_threshold)?;

    let prefix = out.unwrap_or_else(|| image.with_extension("").to_string_lossy().into_owned());
    let prob_path = PathBuf::from(format!("{prefix}.prob.pgm"));
    let mask_path = PathBuf::from(format!("{prefix}.mask.pgm"));
    write_pgm(&prob_path, seg.width, seg.height, &seg.probability_bytes())?;
    write_pgm(&mask_path, seg.width, seg.height, &seg.mask_bytes())?;
    let marked = seg.mask.iter().filter(|&&m| m).count();
    println!("vessel_pixels={marked} of {}", seg.mask.len());
    println!("wrote {}", prob_path.display());
    println!("wrote {}", mask_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(common: &Common, data: &DataArgs, model: &Path) -> Result<ExitCode> {
    let cfg = resolve_config(common)?;
    let task = load_task(&cfg, data.data.as_deref(), data.synthetic)?;
    let net = load_model(model)?;

    match &task {
        TaskData::Synthetic { .. } => {
            let test = task.test_samples().expect("synthetic task has a test set");
            let mut scores = Vec::with_capacity(test.len());
            let mut labels = Vec::with_capacity(test.len());
            for (patch, label) in &test {
                scores.push(net.forward(patch)?[1]);
                labels.push(*label == 1);
            }
            let predictions: Vec<bool> =
                scores.iter().map(|&s| s >= cfg.segment_threshold).collect();
            let counts = confusion(&predictions, &labels)?;
            let (_, auc) = roc_auc(&scores, &labels)?;
            print_eval(&FoldEval {
                counts,
                metrics: metrics(&counts),
                auc,
            });
        }
        TaskData::Images { images, .. } => {
            let ids: Vec<usize> = (0..images.len()).collect();
            let (eval, _, _) = evaluate_on_images(&net, images, &ids, &cfg)?;
            print_eval(&eval);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_xval(common: &Common, data: &DataArgs, out: Option<&Path>) -> Result<ExitCode> {
    let cfg = resolve_config(common)?;
    let images: Vec<LabeledImage> = match (&data.data, data.synthetic) {
        (Some(dir), _) => load_images(&cfg, dir)?,
        (None, true) => {
            let generated = synthetic_images(cfg.synth_images, cfg.synth_image_size, cfg.seed)?;
            generated
                .into_iter()
                .map(|(name, img, labels)| {
                    LabeledImage::new(name, enhance(&img, cfg.equalize_window)?, labels, None)
                })
                .collect::<Result<_>>()?
        }
        (None, false) => {
            return Err(Error::Config(
                "either --data <DIR> or --synthetic is required".to_string(),
            ))
        }
    };
    println!("images={} folds={}", images.len(), cfg.folds);

    let report = cross_validate(&images, &cfg)?;
    let table = xval_csv(&report);
    print!("{table}");
    for fold in &report.folds {
        if let Some(err) = &fold.error {
            eprintln!("warning: fold {} failed: {err}", fold.fold);
        }
    }
    if let Some(path) = out {
        std::fs::write(path, &table).map_err(|e| Error::io(path, e))?;
        println!("wrote {}", path.display());
    }
    if report.failed_folds == cfg.folds {
        eprintln!("error: every fold failed");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn shape_label(shape: &[usize]) -> String {
    match shape {
        [h, w, c] => format!("{c}M \u{d7} {h}\u{d7}{w}N"),
        [n] => format!("{n}N"),
        other => format!("{other:?}"),
    }
}

fn print_report(report: &ComplexityReport) {
    println!("layer,kind,output,params,active,macs,storage_bytes");
    println!("input,input,{},0,0,0,0", shape_label(&report.input_shape));
    for layer in &report.layers {
        println!(
            "{},{},{},{},{},{},{}",
            layer.index,
            layer.kind,
            shape_label(&layer.output_shape),
            layer.param_count,
            layer.active_count,
            layer.macs,
            layer.storage_bytes
        );
    }
    println!(
        "total,,,{},{},{},{}",
        report.total_params, report.total_active, report.total_macs, report.storage_bytes
    );
    println!("total_macs={}", report.total_macs);
    println!("storage_bytes={}", report.storage_bytes);
    println!("original_storage_bytes={}", report.original_storage_bytes);
    println!(
        "storage_ratio={:.4}",
        report.storage_bytes as f64 / report.original_storage_bytes.max(1) as f64
    );
}

fn cmd_report(common: &Common, model: Option<&Path>) -> Result<ExitCode> {
    let cfg = resolve_config(common)?;
    let net = match model {
        Some(path) => load_model(path)?,
        None => Network::reference(cfg.seed),
    };
    print_report(&complexity_report(&net)?);
    Ok(ExitCode::SUCCESS)
}
