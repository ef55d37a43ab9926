//! Training loop with time-shift augmentation, plateau schedule and
//! best-validation checkpointing.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::{
    loss_adversarial, loss_perceptual, loss_rec, sequences_to_tensor, BnUpdates, Bound,
    Discriminator, DiscriminatorConfig, FilterNet, PerceptualNet,
};
use crate::clutter::time_shift_pair;
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Split};
use crate::rng::{derive_seed, stream};
use crate::sequence::Sequence;
use crate::tensor::{AdamState, Graph, LrPlateau, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Rec,
    RecAdv,
    RecPrc,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Rec => "rec",
            LossKind::RecAdv => "rec_adv",
            LossKind::RecPrc => "rec_prc",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rec" => Ok(LossKind::Rec),
            "rec_adv" => Ok(LossKind::RecAdv),
            "rec_prc" => Ok(LossKind::RecPrc),
            _ => Err(Error::Parameter(format!("unknown loss kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub lambda_prc: f64,
    pub epochs: usize,
    pub initial_lr: f64,
    pub batch_size: usize,
    pub shift_probability: f64,
    pub seed: u64,
    pub discriminator: DiscriminatorConfig,
}

impl TrainConfig {
    /// Defaults for a loss kind: λ_rec = 1, λ_adv = 0.01, λ_prc = 0.1 where used.
    pub fn new(loss_kind: LossKind) -> Self {
        let (lambda_adv, lambda_prc) = match loss_kind {
            LossKind::Rec => (0.0, 0.0),
            LossKind::RecAdv => (0.01, 0.0),
            LossKind::RecPrc => (0.0, 0.1),
        };
        Self {
            loss_kind,
            lambda_rec: 1.0,
            lambda_adv,
            lambda_prc,
            epochs: 20,
            initial_lr: 1e-4,
            batch_size: 2,
            shift_probability: 0.5,
            seed: 0,
            discriminator: DiscriminatorConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_rec, self.lambda_adv, self.lambda_prc];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Parameter(
                "loss weights must be finite and ≥ 0".into(),
            ));
        }
        let unused_adv = self.loss_kind != LossKind::RecAdv && self.lambda_adv != 0.0;
        let unused_prc = self.loss_kind != LossKind::RecPrc && self.lambda_prc != 0.0;
        if unused_adv || unused_prc {
            return Err(Error::Parameter(format!(
                "loss kind {} does not use the weights given",
                self.loss_kind
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.initial_lr > 0.0) {
            return Err(Error::Parameter(
                "initial learning rate must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.shift_probability) {
            return Err(Error::Parameter("shift probability outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Network input, clean target and clutter mask of one sequence.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub id: String,
    pub input: Sequence,
    pub target: Sequence,
    pub mask: Sequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.epoch, self.train_loss, self.val_loss, self.lr
        )
    }
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::from(EpochLog::CSV_HEADER);
    s.push('\n');
    for row in log {
        s.push_str(&row.csv_row());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// 1-based epoch of the lowest validation loss.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

struct Batch {
    input: Vec<Sequence>,
    target: Vec<Sequence>,
    mask: Vec<Sequence>,
}

fn shifted(pair: &TrainingPair, p: f64, seed: u64) -> Result<(Sequence, Sequence, Sequence)> {
    let (input, target, start) = time_shift_pair(&pair.input, &pair.target, p, seed)?;
    let f = pair.mask.frames();
    let order: Vec<usize> = (0..f).map(|j| (j + start - 1) % f).collect();
    Ok((input, target, pair.mask.with_frame_order(&order)?))
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    perceptual: Option<&'a PerceptualNet>,
    disc: Option<Discriminator>,
    adam: AdamState,
    disc_adam: AdamState,
}

impl Trainer<'_> {
    /// One optimisation step on a batch; returns the generator loss.
    fn step(&mut self, net: &mut FilterNet, batch: &Batch, lr: f64, seed: u64) -> Result<f64> {
        let cfg = self.cfg;
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &net.params, true)?;
        let x = g.input(sequences_to_tensor(&batch.input)?);
        let y = g.input(sequences_to_tensor(&batch.target)?);
        let fwd = net.forward_graph(&mut g, &bound, x, Mode::Train, seed)?;
        let rec = loss_rec(&mut g, fwd.output, y)?;
        let mut terms = vec![(rec, cfg.lambda_rec)];
        let mut disc_updates = BnUpdates::default();
        let mut mask_t = None;
        match cfg.loss_kind {
            LossKind::Rec => {}
            LossKind::RecAdv => {
                let d = self
                    .disc
                    .as_ref()
                    .ok_or_else(|| Error::Contract("missing discriminator".into()))?;
                let m = g.input(sequences_to_tensor(&batch.mask)?);
                mask_t = Some(g.value(m).clone());
                let d_bound = Bound::new(&mut g, &d.params, false)?;
                let adv = loss_adversarial(
                    &mut g,
                    fwd.output,
                    y,
                    m,
                    d,
                    &d_bound,
                    Mode::Train,
                    &mut disc_updates,
                )?;
                terms.push((adv.generator, cfg.lambda_adv));
            }
            LossKind::RecPrc => {
                let p = self
                    .perceptual
                    .ok_or_else(|| Error::Contract("missing perceptual network".into()))?;
                let p_bound = p.bind(&mut g)?;
                let prc = loss_perceptual(&mut g, fwd.output, y, p, &p_bound)?;
                terms.push((prc, cfg.lambda_prc));
            }
        }
        let total = g.combine(&terms)?;
        let loss = g.scalar(total);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss became {loss}")));
        }
        g.backward(total)?;
        let grads = bound.grads(&g, &net.params)?;
        let pred = g.value(fwd.output).clone();
        let updates = fwd.updates;
        drop(g);
        self.adam.step(&mut net.params, &grads, lr)?;
        updates.apply(&mut net.params)?;

        if let (Some(d), Some(mask)) = (self.disc.as_mut(), mask_t) {
            let mut g = Graph::new();
            let d_bound = Bound::new(&mut g, &d.params, true)?;
            let p = g.input(pred);
            let t = g.input(sequences_to_tensor(&batch.target)?);
            let m = g.input(mask);
            let mut upd = BnUpdates::default();
            let adv = loss_adversarial(&mut g, p, t, m, d, &d_bound, Mode::Train, &mut upd)?;
            g.backward(adv.discriminator)?;
            let grads = d_bound.grads(&g, &d.params)?;
            drop(g);
            self.disc_adam.step(&mut d.params, &grads, lr)?;
            upd.apply(&mut d.params)?;
        }
        Ok(loss)
    }

    /// Evaluation-mode loss over a split without the adversarial term.
    fn validation_loss(&self, net: &FilterNet, pairs: &[TrainingPair]) -> Result<f64> {
        let cfg = self.cfg;
        let mut total = 0.0;
        for pair in pairs {
            let mut g = Graph::new();
            let bound = Bound::new(&mut g, &net.params, false)?;
            let x = g.input(sequences_to_tensor(std::slice::from_ref(&pair.input))?);
            let y = g.input(sequences_to_tensor(std::slice::from_ref(&pair.target))?);
            let fwd = net.forward_graph(&mut g, &bound, x, Mode::Eval, 0)?;
            let rec = loss_rec(&mut g, fwd.output, y)?;
            let mut v = cfg.lambda_rec * g.scalar(rec);
            if let (LossKind::RecPrc, Some(p)) = (cfg.loss_kind, self.perceptual) {
                let p_bound = p.bind(&mut g)?;
                let prc = loss_perceptual(&mut g, fwd.output, y, p, &p_bound)?;
                v += cfg.lambda_prc * g.scalar(prc);
            }
            total += v;
        }
        Ok(total / pairs.len() as f64)
    }
}

/// Trains `net` in place and leaves it holding the best-validation weights.
/// `on_epoch` observes every log record as it is produced.
pub fn train_pairs(
    net: &mut FilterNet,
    train: &[TrainingPair],
    val: &[TrainingPair],
    cfg: &TrainConfig,
    perceptual: Option<&PerceptualNet>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract(
            "training and validation splits must be non-empty".into(),
        ));
    }
    if cfg.loss_kind == LossKind::RecPrc && perceptual.is_none() {
        return Err(Error::Contract("rec_prc needs a perceptual network".into()));
    }
    let disc = match cfg.loss_kind {
        LossKind::RecAdv => Some(Discriminator::new(&DiscriminatorConfig {
            temporal_kernels: net.config.temporal_kernels,
            ..cfg.discriminator.clone()
        })?),
        _ => None,
    };
    let mut trainer = Trainer {
        cfg,
        perceptual,
        disc,
        adam: AdamState::new(),
        disc_adam: AdamState::new(),
    };
    let mut sched = LrPlateau::new(cfg.initial_lr);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, crate::tensor::ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, "epoch", epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(derive_seed(epoch_seed, "order", 0)));
        let lr = sched.current_lr;
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch = Batch {
                input: Vec::new(),
                target: Vec::new(),
                mask: Vec::new(),
            };
            for &i in chunk {
                let seed = derive_seed(epoch_seed, "shift", i as u64);
                let (x, y, m) = shifted(&train[i], cfg.shift_probability, seed)?;
                batch.input.push(x);
                batch.target.push(y);
                batch.mask.push(m);
            }
            sum += trainer.step(net, &batch, lr, derive_seed(epoch_seed, "step", bi as u64))?;
            batches += 1;
        }
        let val_loss = trainer.validation_loss(net, val)?;
        let row = EpochLog {
            epoch,
            train_loss: sum / batches as f64,
            val_loss,
            lr,
        };
        on_epoch(&row);
        log.push(row);
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, net.params.clone()));
        }
        sched.update(val_loss);
    }
    let (best_epoch, best_val_loss, params) =
        best.ok_or_else(|| Error::Contract("no epochs run".into()))?;
    net.params = params;
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_loss,
    })
}

/// Loads every record of a split as training pairs.
pub fn load_pairs(manifest: &DatasetManifest, split: Split) -> Result<Vec<TrainingPair>> {
    manifest
        .split(split)
        .map(|r| {
            let l = manifest.load(r)?;
            Ok(TrainingPair {
                id: l.record.id,
                input: l.cluttered,
                target: l.clean,
                mask: l.mask,
            })
        })
        .collect()
}

/// Trains on the manifest's `train` split, validating on its `val` split.
pub fn train(
    net: &mut FilterNet,
    dataset: &DatasetManifest,
    cfg: &TrainConfig,
    perceptual: Option<&PerceptualNet>,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let tr = load_pairs(dataset, Split::Train)?;
    let va = load_pairs(dataset, Split::Validation)?;
    train_pairs(net, &tr, &va, cfg, perceptual, on_epoch)
}

/// Pre-trains the perceptual network to reconstruct clean sequences.
pub fn pretrain_perceptual(
    mut net: FilterNet,
    train: &[TrainingPair],
    val: &[TrainingPair],
    cfg: &TrainConfig,
) -> Result<(PerceptualNet, TrainOutcome)> {
    let clean = |pairs: &[TrainingPair]| -> Vec<TrainingPair> {
        pairs
            .iter()
            .map(|p| TrainingPair {
                id: p.id.clone(),
                input: p.target.clone(),
                target: p.target.clone(),
                mask: p.mask.clone(),
            })
            .collect()
    };
    let rec_cfg = TrainConfig {
        loss_kind: LossKind::Rec,
        lambda_adv: 0.0,
        lambda_prc: 0.0,
        ..cfg.clone()
    };
    let outcome = train_pairs(&mut net, &clean(train), &clean(val), &rec_cfg, None, |_| {})?;
    Ok((PerceptualNet::from_net(net)?, outcome))
}
