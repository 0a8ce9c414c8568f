use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::warn;
use maevit::config::RunConfig;
use maevit::data::{load_cifar, synthetic, DatasetKind, ImageRecord, Split};
use maevit::model::{init_params, inspect_report, ModelParams, Stage};
use maevit::tensor::{Rng, StreamLabel, Tensor};
use maevit::train::{
    evaluate, finetune_run, gradcheck_suite, pretrain_run, reconstruct_dump, select, Checkpoint, FinetuneInit,
    RunOutcome,
};

use crate::{Command, DatasetArg, EvalArgs, GradcheckArgs, RunArgs, SplitArg, SynthArgs};

/// An error with its process exit code: 1 for usage, 2 for runtime.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

type Outcome = Result<(), Failure>;

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Pretrain(args) => pretrain(&args),
        Command::Finetune(args) => finetune(&args),
        Command::Eval(args) => eval(&args),
        Command::Reconstruct(args) => reconstruct(&args),
        Command::Inspect(args) => inspect(&args),
        Command::Gradcheck(args) => gradcheck(&args),
        Command::SynthData(args) => synth_data(&args),
    }
}

impl DatasetArg {
    fn kind(self) -> DatasetKind {
        match self {
            Self::C10 => DatasetKind::Cifar10,
            Self::C100 => DatasetKind::Cifar100,
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path)
        .with_context(|| format!("cannot use checkpoint {}", path.display()))
        .map_err(usage)
}

/// Layers file, flags and overrides over `base`, resolves, and prints the
/// result.
fn resolve(mut cfg: RunConfig, args: &RunArgs) -> Result<RunConfig, Failure> {
    if let Some(path) = &args.config {
        cfg.apply_file(path).map_err(usage)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(d) = args.dataset {
        cfg.set("dataset", d.kind().name()).map_err(usage)?;
    }
    if args.deterministic {
        cfg.deterministic = true;
    }
    for kv in &args.overrides {
        cfg.apply_override(kv).map_err(usage)?;
    }
    cfg.resolve().map_err(usage)?;
    println!("# resolved configuration");
    print!("{}", cfg.to_text());
    println!();
    Ok(cfg)
}

fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig, Failure> {
    ckpt.config().context("checkpoint carries an invalid configuration").map_err(usage)
}

fn data_dir(args: &RunArgs) -> Result<&Path, Failure> {
    args.data_dir
        .as_deref()
        .ok_or_else(|| usage(anyhow!("missing required flag --data-dir")))
}

fn load_split(dir: &Path, kind: DatasetKind, split: Split) -> Result<Vec<ImageRecord>, Failure> {
    load_cifar(dir, kind, split)
        .with_context(|| format!("cannot load the {} split", split.name()))
        .map_err(usage)
}

fn load_optional(dir: &Path, kind: DatasetKind, split: Split) -> Result<Vec<ImageRecord>, Failure> {
    match load_cifar(dir, kind, split) {
        Ok(records) => Ok(records),
        Err(maevit::data::DataError::MissingFiles { .. }) => {
            warn!("no {} split under {}; continuing without it", split.name(), dir.display());
            Ok(Vec::new())
        }
        Err(e) => Err(usage(e)),
    }
}

fn out_dir(args: &RunArgs, default: &str) -> PathBuf {
    args.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(default))
}

fn params_from(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<ModelParams<Tensor<f32>>, Failure> {
    let mut params = init_params(&cfg.model, ckpt.stage, &mut Rng::new(cfg.seed, StreamLabel::Init));
    ckpt.load_into(&mut params, |_| true).map_err(usage)?;
    Ok(params)
}

fn report(outcome: &RunOutcome) {
    println!(
        "completed {} epochs ({} steps)\ncheckpoint: {}\nmetrics: {}",
        outcome.epochs,
        outcome.global_step,
        outcome.paths.checkpoint().display(),
        outcome.paths.metrics().display()
    );
}

fn pretrain(args: &RunArgs) -> Outcome {
    if args.checkpoint.is_some() {
        return Err(usage(anyhow!("pretrain takes --resume, not --checkpoint")));
    }
    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let base = match &resume {
        Some(ckpt) => checkpoint_config(ckpt)?,
        None => RunConfig::defaults(Stage::Pretrain),
    };
    if base.stage != Stage::Pretrain {
        return Err(usage(anyhow!("--resume needs a pre-training checkpoint")));
    }
    let dir = data_dir(args)?;
    let cfg = resolve(base, args)?;
    let train = load_split(dir, cfg.dataset, Split::Train)?;
    let val = load_optional(dir, cfg.dataset, Split::Test)?;
    let out = out_dir(args, "pretrain");
    let outcome = pretrain_run(&cfg, &train, &val, &out, resume.as_ref()).map_err(runtime)?;
    report(&outcome);
    Ok(())
}

/// Fine-tuning defaults with the encoder architecture of a pre-trained
/// checkpoint.
fn inherit_architecture(ckpt: &Checkpoint) -> Result<RunConfig, Failure> {
    let source = checkpoint_config(ckpt)?;
    let mut cfg = RunConfig::defaults(Stage::Finetune);
    for key in ["embed_dim", "enc_depth", "heads", "mlp_ratio", "patch_side", "image_side"] {
        let value = source.get(key).expect("architecture keys exist");
        cfg.set(key, &value).map_err(usage)?;
    }
    Ok(cfg)
}

fn finetune(args: &RunArgs) -> Outcome {
    if args.resume.is_some() && args.checkpoint.is_some() {
        return Err(usage(anyhow!("use either --resume or --checkpoint, not both")));
    }
    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let pretrained = args.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let base = match (&resume, &pretrained) {
        (Some(ckpt), _) => {
            if ckpt.stage != Stage::Finetune {
                return Err(usage(anyhow!("--resume needs a fine-tuning checkpoint")));
            }
            checkpoint_config(ckpt)?
        }
        (None, Some(ckpt)) => inherit_architecture(ckpt)?,
        (None, None) => RunConfig::defaults(Stage::Finetune),
    };
    let dir = data_dir(args)?;
    let cfg = resolve(base, args)?;
    let train = load_split(dir, cfg.dataset, Split::Train)?;
    let val = load_optional(dir, cfg.dataset, Split::Test)?;
    let init = match (&resume, &pretrained) {
        (Some(ckpt), _) => FinetuneInit::Resume(ckpt),
        (None, Some(ckpt)) => FinetuneInit::Pretrained(ckpt),
        (None, None) => FinetuneInit::Fresh,
    };
    let out = out_dir(args, "finetune");
    let outcome = finetune_run(&cfg, &train, &val, &out, init).map_err(|e| match e {
        maevit::train::TrainError::Checkpoint(_) => usage(e),
        e => runtime(e),
    })?;
    report(&outcome);
    Ok(())
}

fn required_checkpoint(args: &RunArgs) -> Result<Checkpoint, Failure> {
    let path = args
        .checkpoint
        .as_deref()
        .ok_or_else(|| usage(anyhow!("missing required flag --checkpoint")))?;
    load_checkpoint(path)
}

fn eval(args: &EvalArgs) -> Outcome {
    let ckpt = required_checkpoint(&args.run)?;
    let dir = data_dir(&args.run)?;
    let cfg = resolve(checkpoint_config(&ckpt)?, &args.run)?;
    let params = params_from(&ckpt, &cfg)?;
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let records = load_split(dir, cfg.dataset, split)?;
    let subset = match split {
        Split::Train => cfg.train_subset,
        Split::Test => cfg.val_subset,
    };
    let r = evaluate(&params, &cfg, select(&records, subset)).map_err(runtime)?;
    println!("split: {}\nimages: {}\nloss: {}", split.name(), r.count, r.loss);
    if let Some(a) = r.accuracy {
        println!("top1_accuracy: {a}");
    }
    if let (Some(m), Some(v)) = (r.masked_mse, r.visible_mse) {
        println!("masked_mse: {m}\nvisible_mse: {v}");
    }
    Ok(())
}

fn reconstruct(args: &RunArgs) -> Outcome {
    let ckpt = required_checkpoint(args)?;
    if ckpt.stage != Stage::Pretrain {
        return Err(usage(anyhow!("reconstruction needs a pre-training checkpoint")));
    }
    let dir = data_dir(args)?;
    let cfg = resolve(checkpoint_config(&ckpt)?, args)?;
    let params = params_from(&ckpt, &cfg)?;
    let mut records = load_optional(dir, cfg.dataset, Split::Test)?;
    if records.is_empty() {
        records = load_split(dir, cfg.dataset, Split::Train)?;
    }
    let images = &records[..cfg.dump_images.min(records.len())];
    let out = out_dir(args, "reconstruct");
    let files = reconstruct_dump(&params, &cfg, images, cfg.seed, &out).map_err(runtime)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn inspect(args: &RunArgs) -> Outcome {
    let cfg = resolve(RunConfig::defaults(Stage::Finetune), args)?;
    print!("{}", inspect_report(&cfg.model));
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Outcome {
    let results = gradcheck_suite(args.seeds).map_err(runtime)?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{} {:<24} {:<7} max_rel_error {:.3e} (tolerance {:.0e}, worst seed {} of {})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.precision.name(),
            r.max_rel_error,
            r.precision.tolerance(),
            r.worst_seed,
            r.seeds
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(runtime(anyhow!("{failed} of {} gradient checks failed", results.len())));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

fn synth_data(args: &SynthArgs) -> Outcome {
    synthetic::write_fixture(&args.out_dir, args.dataset.kind(), args.train, args.test, args.seed).map_err(runtime)?;
    println!(
        "wrote {} train and {} test {} images to {}",
        args.train,
        args.test,
        args.dataset.kind().name(),
        args.out_dir.display()
    );
    Ok(())
}
