use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use crate::config::RunConfig;
use crate::data::{for_each_batch, make_epoch_batches, BatchMode, ImageRecord};
use crate::model::{
    bind, bind_frozen, classify_forward, init_params, mae_forward, Fwd, ModelParams, ParamInfo, Stage,
};
use crate::optim::{adamw_step, cross_entropy, layerwise_factors, lr_at, mae_loss, patch_mse, AdamHyper, OptState};
use crate::patch::{append_dummy, patchify, sample_mask, MaskPlan};
use crate::tensor::{Graph, Rng, StreamLabel, Tensor, Var};

use super::checkpoint::Checkpoint;
use super::metrics::{MetricsLog, MetricsRow, Split};
use super::reconstruct::reconstruct_dump;
use super::{io_err, TrainError};

/// Batch size for gradient-free passes.
pub const EVAL_BATCH: usize = 64;
/// Mask-stream key offset for validation masks, disjoint from step keys.
pub const VAL_MASK_KEY: u64 = 1 << 63;

/// Output layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub out_dir: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path) -> Self {
        Self {
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.out_dir.join("checkpoint.bin")
    }

    pub fn metrics(&self) -> PathBuf {
        self.out_dir.join("metrics.csv")
    }

    pub fn dumps(&self, epoch: u64) -> PathBuf {
        self.out_dir.join("reconstructions").join(format!("epoch-{epoch:05}"))
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub params: ModelParams<Tensor<f32>>,
    /// Completed epochs, counting any resumed ones.
    pub epochs: u64,
    pub global_step: u64,
    /// Rows written by this invocation.
    pub rows: Vec<MetricsRow>,
    pub paths: RunPaths,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    /// Top-1 accuracy, for models with a classification head.
    pub accuracy: Option<f64>,
    /// Masked and visible patch MSE, for models with a decoder.
    pub masked_mse: Option<f64>,
    pub visible_mse: Option<f64>,
    pub count: usize,
}

pub enum FinetuneInit<'a> {
    /// Freshly initialized encoder.
    Fresh,
    /// Encoder weights from a checkpoint of either stage; anything else is dropped.
    Pretrained(&'a Checkpoint),
    /// Continue an interrupted fine-tuning run.
    Resume(&'a Checkpoint),
}

/// The leading `n` records, or all of them when `n` is 0.
pub fn select(records: &[ImageRecord], n: usize) -> &[ImageRecord] {
    if n == 0 {
        records
    } else {
        &records[..n.min(records.len())]
    }
}

fn mask_rng(seed: u64, key: u64) -> Rng {
    Rng::new(seed, StreamLabel::Mask).fork(key)
}

fn dropout_rng(seed: u64, step: u64) -> Rng {
    Rng::new(seed, StreamLabel::Dropout).fork(step)
}

/// `[B, 3, S, S]` images -> (`[B, N, token_dim]` patches, `[B, N+1, token_dim]` with dummy).
fn tokens_of(images: &Tensor<f32>, cfg: &RunConfig) -> Result<(Tensor<f32>, Tensor<f32>), TrainError> {
    let tokens = patchify(images, cfg.model.patch_side)?;
    let seq = append_dummy(&tokens, cfg.model.n_patches())?;
    Ok((tokens, seq))
}

fn grads_of<'g>(g: &'g Graph<f32>, vars: &ModelParams<Var>) -> Vec<&'g [f32]> {
    vars.entries()
        .into_iter()
        .map(|(_, v)| g.grad(*v).expect("trainable parameter has a gradient"))
        .collect()
}

fn check_finite(loss: f64, epoch: u64, step: u64) -> Result<(), TrainError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite { loss, epoch, step })
    }
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Eval-mode loss and metrics over `records`. Pre-training models report the
/// reconstruction loss under fixed masks; classifiers report cross-entropy
/// and top-1 accuracy.
pub fn evaluate(
    params: &ModelParams<Tensor<f32>>,
    cfg: &RunConfig,
    records: &[ImageRecord],
) -> Result<EvalResult, TrainError> {
    let policy = cfg.policy();
    let batches = make_epoch_batches(records, EVAL_BATCH, BatchMode::Eval, &policy, cfg.seed, 0)?;
    let classify = params.head.is_some();
    if !classify && params.decoder.is_none() {
        return Err(TrainError::Invalid("model has neither a head nor a decoder".into()));
    }
    let (mut loss, mut masked, mut visible, mut correct, mut count) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for (i, batch) in batches.enumerate() {
        let b = batch.len();
        let (tokens, seq) = tokens_of(&batch.images, cfg)?;
        let mut g = Graph::<f32>::new();
        let vars = bind_frozen(&mut g, params);
        let mut fwd = Fwd::eval();
        if classify {
            let x = g.leaf(seq);
            let logits = classify_forward(&mut g, x, &vars, &cfg.model, &mut fwd)?;
            let l = cross_entropy(&mut g, logits, &batch.labels)?;
            loss += g.scalar(l) as f64 * b as f64;
            let c = cfg.model.n_classes;
            let values = g.value(logits);
            correct += (0..b).filter(|&s| argmax(&values[s * c..(s + 1) * c]) == batch.labels[s]).count();
        } else {
            let n = cfg.model.n_patches();
            let plan = sample_mask(b, n, cfg.model.mask_ratio, &mut mask_rng(cfg.seed, VAL_MASK_KEY + i as u64))?;
            let pred = mae_forward(&mut g, &seq, &plan, &vars, &cfg.model, &mut fwd)?;
            let pred = g.narrow(pred, 1, 0, n)?;
            let l = mae_loss(&mut g, pred, &tokens, &plan, cfg.model.alpha)?;
            loss += g.scalar(l) as f64 * b as f64;
            let (m, v) = patch_mse(g.value(pred), tokens.data(), &plan, cfg.model.token_dim());
            masked += m * b as f64;
            visible += v * b as f64;
        }
        count += b;
    }
    let per = |x: f64| x / count as f64;
    Ok(EvalResult {
        loss: per(loss),
        accuracy: classify.then(|| correct as f64 / count as f64),
        masked_mse: (!classify).then(|| per(masked)),
        visible_mse: (!classify).then(|| per(visible)),
        count,
    })
}

/// State shared by both training stages.
struct Session<'a> {
    cfg: &'a RunConfig,
    stage: Stage,
    params: ModelParams<Tensor<f32>>,
    opt: OptState<f32>,
    hyper: AdamHyper,
    epoch: u64,
    step: u64,
    steps_per_epoch: usize,
    log: MetricsLog,
    rows: Vec<MetricsRow>,
    paths: RunPaths,
}

impl<'a> Session<'a> {
    fn start(
        cfg: &'a RunConfig,
        stage: Stage,
        train: &[ImageRecord],
        out_dir: &Path,
        params: ModelParams<Tensor<f32>>,
        resume: Option<&Checkpoint>,
    ) -> Result<Self, TrainError> {
        if cfg.stage != stage {
            return Err(TrainError::Invalid(format!(
                "{} run given a {} configuration",
                stage.name(),
                cfg.stage.name()
            )));
        }
        cfg.validate()?;
        if train.is_empty() {
            return Err(TrainError::Invalid("training set is empty".into()));
        }
        fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let paths = RunPaths::new(out_dir);
        let steps_per_epoch = train.len().div_ceil(cfg.recipe.batch_size);
        let mut session = Self {
            cfg,
            stage,
            opt: OptState::new(&params),
            params,
            hyper: AdamHyper::from(&cfg.recipe),
            epoch: 0,
            step: 0,
            steps_per_epoch,
            log: MetricsLog::open(&paths.metrics(), resume.map(|c| c.epoch))?,
            rows: Vec::new(),
            paths,
        };
        if let Some(ckpt) = resume {
            session.restore(ckpt)?;
        }
        Ok(session)
    }

    fn restore(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        if ckpt.stage != self.stage {
            return Err(TrainError::Invalid(format!(
                "cannot resume a {} run from a {} checkpoint",
                self.stage.name(),
                ckpt.stage.name()
            )));
        }
        let expected = ckpt.epoch * self.steps_per_epoch as u64;
        if ckpt.global_step != expected {
            return Err(TrainError::Invalid(format!(
                "checkpoint is at step {} after {} epochs, but this data gives {} steps per epoch",
                ckpt.global_step, ckpt.epoch, self.steps_per_epoch
            )));
        }
        ckpt.load_into(&mut self.params, |_| true)?;
        self.opt = ckpt
            .opt_state(&self.params)?
            .ok_or_else(|| TrainError::Invalid("checkpoint has no optimizer state to resume".into()))?;
        self.epoch = ckpt.epoch;
        self.step = ckpt.global_step;
        info!("resumed at epoch {} (step {})", self.epoch, self.step);
        Ok(())
    }

    fn total_epochs(&self) -> u64 {
        self.cfg.recipe.total_epochs as u64
    }

    /// Last epoch this invocation runs.
    fn end_epoch(&self) -> u64 {
        match self.cfg.stop_after {
            0 => self.total_epochs(),
            n => (self.epoch + n as u64).min(self.total_epochs()),
        }
    }

    fn lr(&self) -> f64 {
        lr_at(self.step, self.steps_per_epoch, &self.cfg.recipe)
    }

    fn batch_mode(&self) -> BatchMode {
        if self.cfg.augment {
            BatchMode::TrainAugment
        } else {
            BatchMode::Eval
        }
    }

    fn save(&self) -> Result<(), TrainError> {
        let rng_states = vec![
            mask_rng(self.cfg.seed, self.step).state(),
            dropout_rng(self.cfg.seed, self.step).state(),
        ];
        let ckpt = Checkpoint::new(self.cfg, &self.params, Some(&self.opt), self.epoch, self.step, rng_states);
        ckpt.save(&self.paths.checkpoint())?;
        Ok(())
    }

    fn due(&self, every: usize) -> bool {
        self.epoch == self.total_epochs() || (every > 0 && self.epoch.is_multiple_of(every as u64))
    }

    fn record(&mut self, row: MetricsRow) -> Result<(), TrainError> {
        info!("{row}");
        self.log.append(&row)?;
        self.rows.push(row);
        Ok(())
    }

    fn seconds(&self, started: Instant) -> Option<f64> {
        (!self.cfg.deterministic).then(|| started.elapsed().as_secs_f64())
    }

    fn apply_grads(&mut self, g: &Graph<f32>, vars: &ModelParams<Var>, lr: f64, factors: &[f64]) -> Result<(), TrainError> {
        let grads = grads_of(g, vars);
        let scale = |info: &ParamInfo| info.group.map_or(1.0, |k| factors[k]);
        adamw_step(&mut self.params, &grads, &mut self.opt, lr, scale, &self.hyper)?;
        self.step += 1;
        Ok(())
    }

    fn finish(self) -> RunOutcome {
        RunOutcome {
            params: self.params,
            epochs: self.epoch,
            global_step: self.step,
            rows: self.rows,
            paths: self.paths,
        }
    }
}

/// Masked-autoencoder pre-training. Writes `metrics.csv`, `checkpoint.bin`
/// and triptych dumps under `out_dir`.
pub fn pretrain_run(
    cfg: &RunConfig,
    train: &[ImageRecord],
    val: &[ImageRecord],
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<RunOutcome, TrainError> {
    let train = select(train, cfg.train_subset);
    let val = select(val, cfg.val_subset);
    let params = init_params(&cfg.model, Stage::Pretrain, &mut Rng::new(cfg.seed, StreamLabel::Init));
    let mut s = Session::start(cfg, Stage::Pretrain, train, out_dir, params, resume)?;
    let factors = vec![1.0; s.params.group_count()];
    if resume.is_none() {
        s.save()?;
    }
    let policy = cfg.policy();
    let n = cfg.model.n_patches();
    let end = s.end_epoch();
    while s.epoch < end {
        let started = Instant::now();
        let epoch = s.epoch + 1;
        let batches = make_epoch_batches(train, cfg.recipe.batch_size, s.batch_mode(), &policy, cfg.seed, s.epoch)?;
        let (mut total, mut count, mut lr) = (0.0, 0usize, 0.0);
        for_each_batch(batches, !cfg.deterministic, |batch| -> Result<(), TrainError> {
            lr = s.lr();
            let b = batch.len();
            let (tokens, seq) = tokens_of(&batch.images, cfg)?;
            let plan: MaskPlan = sample_mask(b, n, cfg.model.mask_ratio, &mut mask_rng(cfg.seed, s.step))?;
            let mut g = Graph::<f32>::new();
            let vars = bind(&mut g, &s.params);
            let mut fwd = Fwd::train(dropout_rng(cfg.seed, s.step));
            let pred = mae_forward(&mut g, &seq, &plan, &vars, &cfg.model, &mut fwd)?;
            let loss = mae_loss(&mut g, pred, &tokens, &plan, cfg.model.alpha)?;
            let value = g.scalar(loss) as f64;
            check_finite(value, epoch, s.step)?;
            g.backward(loss)?;
            s.apply_grads(&g, &vars, lr, &factors)?;
            total += value * b as f64;
            count += b;
            Ok(())
        })?;
        s.epoch = epoch;
        let row = MetricsRow {
            epoch,
            split: Split::Train,
            loss: total / count as f64,
            accuracy: None,
            lr,
            seconds: s.seconds(started),
        };
        s.record(row)?;
        if !val.is_empty() && s.due(cfg.val_every) && cfg.val_every > 0 {
            let started = Instant::now();
            let r = evaluate(&s.params, cfg, val)?;
            let row = MetricsRow {
                epoch,
                split: Split::Val,
                loss: r.loss,
                accuracy: None,
                lr,
                seconds: s.seconds(started),
            };
            s.record(row)?;
        }
        if s.due(cfg.checkpoint_every) {
            s.save()?;
        }
        if cfg.dump_images > 0 && s.due(cfg.dump_every) {
            let source = if val.is_empty() { train } else { val };
            let images = &source[..cfg.dump_images.min(source.len())];
            reconstruct_dump(&s.params, cfg, images, cfg.seed, &s.paths.dumps(epoch))?;
        }
    }
    if !s.due(cfg.checkpoint_every) {
        s.save()?;
    }
    Ok(s.finish())
}

/// Fine-tuning of the encoder with a freshly initialized classification
/// head, logging train and validation accuracy per epoch.
pub fn finetune_run(
    cfg: &RunConfig,
    train: &[ImageRecord],
    val: &[ImageRecord],
    out_dir: &Path,
    init: FinetuneInit<'_>,
) -> Result<RunOutcome, TrainError> {
    let train = select(train, cfg.train_subset);
    let val = select(val, cfg.val_subset);
    let mut params = init_params(&cfg.model, Stage::Finetune, &mut Rng::new(cfg.seed, StreamLabel::Init));
    let resume = match init {
        FinetuneInit::Fresh => None,
        FinetuneInit::Pretrained(ckpt) => {
            let loaded = ckpt.load_into(&mut params, |name| name.starts_with("encoder."))?;
            info!("loaded {loaded} encoder tensors from a {} checkpoint", ckpt.stage.name());
            None
        }
        FinetuneInit::Resume(ckpt) => Some(ckpt),
    };
    let mut s = Session::start(cfg, Stage::Finetune, train, out_dir, params, resume)?;
    let factors = layerwise_factors(s.params.group_count(), cfg.recipe.layerwise_decay);
    if resume.is_none() {
        s.save()?;
    }
    let policy = cfg.policy();
    let c = cfg.model.n_classes;
    let end = s.end_epoch();
    while s.epoch < end {
        let started = Instant::now();
        let epoch = s.epoch + 1;
        let batches = make_epoch_batches(train, cfg.recipe.batch_size, s.batch_mode(), &policy, cfg.seed, s.epoch)?;
        let (mut total, mut correct, mut count, mut lr) = (0.0, 0usize, 0usize, 0.0);
        for_each_batch(batches, !cfg.deterministic, |batch| -> Result<(), TrainError> {
            lr = s.lr();
            let b = batch.len();
            let (_, seq) = tokens_of(&batch.images, cfg)?;
            let mut g = Graph::<f32>::new();
            let vars = bind(&mut g, &s.params);
            let mut fwd = Fwd::train(dropout_rng(cfg.seed, s.step));
            let x = g.leaf(seq);
            let logits = classify_forward(&mut g, x, &vars, &cfg.model, &mut fwd)?;
            let loss = cross_entropy(&mut g, logits, &batch.labels)?;
            let value = g.scalar(loss) as f64;
            check_finite(value, epoch, s.step)?;
            let values = g.value(logits);
            correct += (0..b).filter(|&i| argmax(&values[i * c..(i + 1) * c]) == batch.labels[i]).count();
            g.backward(loss)?;
            s.apply_grads(&g, &vars, lr, &factors)?;
            total += value * b as f64;
            count += b;
            Ok(())
        })?;
        s.epoch = epoch;
        let row = MetricsRow {
            epoch,
            split: Split::Train,
            loss: total / count as f64,
            accuracy: Some(correct as f64 / count as f64),
            lr,
            seconds: s.seconds(started),
        };
        s.record(row)?;
        if !val.is_empty() && cfg.val_every > 0 && s.due(cfg.val_every) {
            let started = Instant::now();
            let r = evaluate(&s.params, cfg, val)?;
            let row = MetricsRow {
                epoch,
                split: Split::Val,
                loss: r.loss,
                accuracy: r.accuracy,
                lr,
                seconds: s.seconds(started),
            };
            s.record(row)?;
        }
        if s.due(cfg.checkpoint_every) {
            s.save()?;
        }
    }
    if !s.due(cfg.checkpoint_every) {
        s.save()?;
    }
    Ok(s.finish())
}
