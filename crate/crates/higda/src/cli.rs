//! Command-line surface: dataset generation, training, GAL, evaluation,
//! saliency export, and embedding export.
//!
//! Exit codes: 0 success, 1 config error, 2 data error, 3 numerical failure.

use crate::config::{resolve_config, write_snapshot};
use crate::data::{
    generate_synthetic, load_image_dir, make_splits, write_png, Dataset, DatasetManifest,
    SampleRef, SsdaSplits,
};
use crate::error::{HigdaError, Result};
use crate::gal::{
    run_gal, write_episode_csv, write_pseudo_csv, GalDriver, LabeledPool, LabeledSample,
};
use crate::numerics::io::write_tensor;
use crate::numerics::tensor::Tensor;
use crate::train_eval::{
    check_model_compat, checkpoint_load, checkpoint_save, evaluate, write_metrics_csv, EvalMode,
    EvalReport, RunConfig, Trainer, TrainerGalDriver,
};
use clap::{Parser, Subcommand};
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "higda", version, about = "Hierarchical graph-of-nodes classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-path override, e.g. --set log.embed_dim=64 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory for all artifacts of this run.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads for internal parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Load source images from root/<class>/*.png instead of the synthetic set.
    #[arg(long, global = true)]
    source_dir: Option<PathBuf>,

    /// Load target images from root/<class>/*.png instead of the synthetic set.
    #[arg(long, global = true)]
    target_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the two-domain dataset, write splits manifest and optionally PNGs.
    GenData {
        /// Also materialize every image as out/{source,target}/<class>/<id>.png.
        #[arg(long)]
        materialize: bool,
    },
    /// Plain supervised (or +MME) training on the labeled pool, no episodes.
    Train,
    /// Full graph-active-learning training: pretrain plus pseudo-label episodes.
    Gal,
    /// Evaluate a checkpoint on the target test split in both graph modes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export per-node saliency maps and anchor edges for test images.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of target-test images to export.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Export pre-classifier embeddings per split in higda-tensor v1 format.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Entry point used by `main` and by tests. Returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own message; usage problems are config errors
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli.config.as_deref(), &cli.overrides)?;
    std::fs::create_dir_all(&cli.out)?;
    write_snapshot(&cfg, &cli.out.join("config.json"))?;
    match &cli.command {
        Command::GenData { materialize } => cmd_gen_data(cli, &cfg, *materialize),
        Command::Train => cmd_train(cli, &cfg),
        Command::Gal => cmd_gal(cli, &cfg),
        Command::Eval { checkpoint } => cmd_eval(cli, &cfg, checkpoint),
        Command::Saliency { checkpoint, count } => cmd_saliency(cli, &cfg, checkpoint, *count),
        Command::Embed { checkpoint } => cmd_embed(cli, &cfg, checkpoint),
    }
}

/// Datasets plus SSDA splits, from directories when given, synthetic otherwise.
fn load_data(cli: &Cli, cfg: &RunConfig) -> Result<(Dataset, Dataset, SsdaSplits)> {
    let (source, target) = match (&cli.source_dir, &cli.target_dir) {
        (Some(s), Some(t)) => {
            let source = load_image_dir(s, cfg.data.image_size)?;
            let target = load_image_dir(t, cfg.data.image_size)?;
            if source.classes != cfg.data.classes || target.classes != cfg.data.classes {
                return Err(HigdaError::Config(format!(
                    "directories provide {}/{} classes but data.classes = {}",
                    source.classes, target.classes, cfg.data.classes
                )));
            }
            (source, target)
        }
        (None, None) => generate_synthetic(&cfg.data)?,
        _ => {
            return Err(HigdaError::Config(
                "--source-dir and --target-dir must be given together".into(),
            ))
        }
    };
    let splits = make_splits(&source, &target, cfg.n_shot, cfg.seed)?;
    Ok((source, target, splits))
}

/// The labeled base pool D_l: every source sample plus the n-shot target samples.
fn base_pool(source: &Dataset, target: &Dataset, splits: &SsdaSplits) -> LabeledPool {
    let mut base: Vec<LabeledSample> = splits
        .source_labeled
        .iter()
        .map(|&i| LabeledSample { sample: SampleRef::source(i), label: source.labels[i] })
        .collect();
    base.extend(
        splits
            .target_labeled
            .iter()
            .map(|&i| LabeledSample { sample: SampleRef::target(i), label: target.labels[i] }),
    );
    LabeledPool::new(base)
}

fn eval_both(
    model: &crate::model::HigdaModel,
    target: &Dataset,
    test: &[usize],
    batch: usize,
) -> Result<(EvalReport, EvalReport)> {
    let graph = evaluate(model, target, test, EvalMode::BatchGraph, batch)?;
    let single = evaluate(model, target, test, EvalMode::Singleton, batch)?;
    Ok((graph, single))
}

fn report_eval(out: &Path, graph: &EvalReport, single: &EvalReport) -> Result<()> {
    write_metrics_csv(
        &out.join("metrics.csv"),
        &[("target_test.batch_graph", graph), ("target_test.singleton", single)],
    )?;
    println!(
        "target test accuracy: batch_graph {:.4}, singleton {:.4} (difference {:+.4})",
        graph.overall_accuracy,
        single.overall_accuracy,
        graph.overall_accuracy - single.overall_accuracy
    );
    Ok(())
}

fn cmd_gen_data(cli: &Cli, cfg: &RunConfig, materialize: bool) -> Result<()> {
    let (source, target, splits) = load_data(cli, cfg)?;
    let manifest = DatasetManifest::build(&cfg.data, &source, &target, &splits);
    manifest.write(&cli.out.join("manifest.json"))?;
    if materialize {
        for (name, set) in [("source", &source), ("target", &target)] {
            for i in 0..set.len() {
                let dir = cli.out.join(name).join(format!("class{:02}", set.labels[i]));
                std::fs::create_dir_all(&dir)?;
                write_png(&dir.join(format!("{}.png", set.ids[i].replace('/', "_"))), &set.images[i])?;
            }
        }
    }
    println!(
        "wrote manifest for {} source + {} target samples ({} labeled target, {} test)",
        source.len(),
        target.len(),
        splits.target_labeled.len(),
        splits.target_test.len()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let (source, target, splits) = load_data(cli, cfg)?;
    let pool = base_pool(&source, &target, &splits);
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.run_steps(&source, &target, &pool, &splits.target_unlabeled, cfg.train_steps)?;
    trainer.write_loss_csv(&cli.out.join("loss.csv"))?;
    let (graph, single) = eval_both(&trainer.model, &target, &splits.target_test, cfg.batch_size)?;
    report_eval(&cli.out, &graph, &single)?;
    checkpoint_save(&trainer, &cli.out.join("checkpoint"))?;
    Ok(())
}

fn cmd_gal(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let (source, target, splits) = load_data(cli, cfg)?;
    let mut pool = base_pool(&source, &target, &splits);
    let mut trainer = Trainer::new(cfg.clone())?;

    // Episode 0: pretraining on the base pool with one episode's budget.
    trainer.run_steps(
        &source,
        &target,
        &pool,
        &splits.target_unlabeled,
        cfg.gal.steps_per_episode,
    )?;
    let mut driver = TrainerGalDriver {
        trainer: &mut trainer,
        source: &source,
        target: &target,
        unlabeled: &splits.target_unlabeled,
        test: &splits.target_test,
    };
    let ep0 = crate::gal::EpisodeRecord {
        episode: 0,
        pseudo_count: 0,
        pseudo_accuracy: None,
        target_accuracy: driver.eval_target()?,
    };
    let mut records = vec![ep0];
    records.extend(run_gal(
        &mut driver,
        &target,
        &splits.target_unlabeled,
        &mut pool,
        &cfg.gal,
        cfg.batch_size,
    )?);
    for r in &records {
        println!(
            "episode {:>3}: pseudo {} (acc {}), target acc {:.4}",
            r.episode,
            r.pseudo_count,
            r.pseudo_accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
            r.target_accuracy
        );
    }
    write_episode_csv(&cli.out.join("episodes.csv"), &records)?;
    write_pseudo_csv(&cli.out.join("pseudo_labels.csv"), pool.pseudo(), &target)?;
    trainer.write_loss_csv(&cli.out.join("loss.csv"))?;
    let (graph, single) = eval_both(&trainer.model, &target, &splits.target_test, cfg.batch_size)?;
    report_eval(&cli.out, &graph, &single)?;
    checkpoint_save(&trainer, &cli.out.join("checkpoint"))?;
    Ok(())
}

fn cmd_eval(cli: &Cli, cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let trainer = checkpoint_load(checkpoint)?;
    check_model_compat(cfg, &trainer.cfg)?;
    let (_, target, splits) = load_data(cli, &trainer.cfg)?;
    let (graph, single) =
        eval_both(&trainer.model, &target, &splits.target_test, trainer.cfg.batch_size)?;
    report_eval(&cli.out, &graph, &single)?;
    Ok(())
}

fn cmd_saliency(cli: &Cli, cfg: &RunConfig, checkpoint: &Path, count: usize) -> Result<()> {
    let trainer = checkpoint_load(checkpoint)?;
    check_model_compat(cfg, &trainer.cfg)?;
    let (_, target, splits) = load_data(cli, &trainer.cfg)?;
    let dir = cli.out.join("saliency");
    std::fs::create_dir_all(&dir)?;
    for &idx in splits.target_test.iter().take(count) {
        let img = &target.images[idx];
        let probs = trainer.model.predict_probs(&[img])?;
        let row = probs.row(0);
        let mut pred = 0usize;
        for k in 1..trainer.model.classes {
            if row[k] > row[pred] {
                pred = k;
            }
        }
        let rep = trainer.model.node_saliency(img, pred)?;
        let id = target.ids[idx].replace('/', "_");
        rep.write_csv(&dir.join(format!("{id}.csv")))?;
        rep.write_anchor_json(&dir.join(format!("{id}.edges.json")))?;
    }
    println!("wrote saliency maps for {} images", count.min(splits.target_test.len()));
    Ok(())
}

fn cmd_embed(cli: &Cli, cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let trainer = checkpoint_load(checkpoint)?;
    check_model_compat(cfg, &trainer.cfg)?;
    let (source, target, splits) = load_data(cli, &trainer.cfg)?;
    let dir = cli.out.join("embed");
    std::fs::create_dir_all(&dir)?;
    let batch = trainer.cfg.batch_size;
    let splits_list: [(&str, &Dataset, Vec<usize>); 4] = [
        ("source_labeled", &source, splits.source_labeled.clone()),
        ("target_labeled", &target, splits.target_labeled.clone()),
        ("target_unlabeled", &target, splits.target_unlabeled.clone()),
        ("target_test", &target, splits.target_test.clone()),
    ];
    for (name, set, indices) in splits_list {
        if indices.is_empty() {
            continue;
        }
        let mut rows: Vec<f64> = Vec::new();
        let mut dim = 0usize;
        for chunk in indices.chunks(batch) {
            let imgs: Vec<&Tensor> = chunk.iter().map(|&i| &set.images[i]).collect();
            let fwd = trainer.model.forward_batch(&imgs)?;
            let pre = fwd.pre_classifier();
            dim = pre.shape()[1];
            rows.extend_from_slice(pre.data());
        }
        let mat = Tensor::from_vec(&[indices.len(), dim], rows)?;
        write_tensor(&dir.join(format!("{name}.ht1")), &mat)?;
        let mut f = std::fs::File::create(dir.join(format!("{name}.labels.csv")))?;
        writeln!(f, "sample_id,label")?;
        for &i in &indices {
            writeln!(f, "{},{}", set.ids[i], set.labels[i])?;
        }
    }
    println!("wrote embeddings to {}", dir.display());
    Ok(())
}
