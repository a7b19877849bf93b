//! The training loop and its CSV logs.

use std::fmt::Write as _;

use crate::config::TrainConfig;
use crate::data::{augment_dataset, one_hot, sample_patch, PatchSpec, Sample};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamGrads};
use crate::inference::{decode_labels, predict_volume};
use crate::kernels::ce_dice_forward;
use crate::metrics::{dice, BinaryMask};
use crate::nn::{Network, ParamStore, PatchPredictor};
use crate::optim::SgdState;
use crate::rng::Rng;
use crate::tensor::Tensor4;

/// RNG stream ids derived from the config seed.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_PATCHES: u64 = 1;
/// Augmentation uses `seed + AUGMENT_SEED_OFFSET` as its own seed so its
/// per-volume streams never collide with the ones above.
pub const AUGMENT_SEED_OFFSET: u64 = 0x5eed_a116;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    /// Largest backbone activation, in elements.
    pub peak_activation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValRecord {
    pub iteration: u64,
    pub loss: f64,
    /// Mean Dice over validation volumes, per foreground class.
    pub dice: Vec<f64>,
}

impl ValRecord {
    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub train: Vec<TrainRecord>,
    pub val: Vec<ValRecord>,
}

impl RunLog {
    pub fn train_csv(&self) -> String {
        let mut out = String::from("iteration,lr,loss,peak_activation\n");
        for r in &self.train {
            let _ = writeln!(out, "{},{},{},{}", r.iteration, r.lr, r.loss, r.peak_activation);
        }
        out
    }

    pub fn val_csv(&self, classes: usize) -> String {
        let mut out = String::from("iteration,val_loss");
        for c in 1..classes {
            let _ = write!(out, ",dice_{c}");
        }
        out.push('\n');
        for r in &self.val {
            let _ = write!(out, "{},{}", r.iteration, r.loss);
            for d in &r.dice {
                let _ = write!(out, ",{d}");
            }
            out.push('\n');
        }
        out
    }
}

/// Borrowed network and parameters used as a patch predictor.
pub struct Predictor<'a> {
    pub net: &'a Network,
    pub params: &'a ParamStore,
    pub patch: [usize; 3],
}

impl PatchPredictor for Predictor<'_> {
    fn patch_extent(&self) -> [usize; 3] {
        self.patch
    }

    fn classes(&self) -> usize {
        self.net.spec.classes
    }

    fn predict(&self, patch: &Tensor4) -> Result<Tensor4> {
        let mut g = Graph::new();
        let out = self.net.forward(&mut g, self.params, patch)?;
        Ok(g.value(out.probs).clone())
    }
}

/// Stitched whole-volume predictions on `val`: mean combined loss and mean
/// per-class Dice of the decoded labels.
pub fn validate(predictor: &dyn PatchPredictor, cfg: &TrainConfig, val: &[Sample], iteration: u64) -> Result<ValRecord> {
    let k = predictor.classes();
    let mut loss = 0.0;
    let mut dices = vec![0.0; k - 1];
    for s in val {
        let probs = predict_volume(predictor, &s.image.tensor, cfg.validation_stride())?;
        let target = one_hot(&s.labels.tensor, k)?;
        loss += ce_dice_forward(&probs, &target, cfg.loss_weights())?.total;
        let pred = decode_labels(&probs)?;
        for (c, d) in dices.iter_mut().enumerate() {
            let a = BinaryMask::from_labels(&pred, s.labels.spacing, c + 1)?;
            let b = BinaryMask::from_labels(&s.labels.tensor, s.labels.spacing, c + 1)?;
            *d += dice(&a, &b)?;
        }
    }
    let n = val.len().max(1) as f64;
    Ok(ValRecord { iteration, loss: loss / n, dice: dices.into_iter().map(|d| d / n).collect() })
}

pub struct TrainOutcome {
    pub net: Network,
    pub params: ParamStore,
    pub log: RunLog,
}

fn accumulate(sum: &mut Option<ParamGrads>, g: ParamGrads) -> Result<()> {
    match sum {
        None => *sum = Some(g),
        Some(acc) => {
            for (name, t) in g.entries {
                match acc.entries.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, a)) => a.add_assign(&t)?,
                    None => acc.entries.push((name, t)),
                }
            }
        }
    }
    Ok(())
}

/// Trains on `train` (augmented per the config) and validates on `val`
/// every `val_every` iterations and after the last one. `on_val` sees each
/// validation record as it is produced.
pub fn train(
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    on_val: &mut dyn FnMut(&ValRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for s in train.iter().chain(val) {
        if s.image.shape().c != cfg.in_channels {
            return Err(Error::Data(format!(
                "volume has {} channels, config expects {}",
                s.image.shape().c,
                cfg.in_channels
            )));
        }
        if s.labels.class_count() as usize > cfg.classes {
            return Err(Error::Data(format!(
                "labels have {} classes, config expects {}",
                s.labels.class_count(),
                cfg.classes
            )));
        }
    }
    let net = Network::build(&cfg.backbone())?;
    let mut params = net.init_params(cfg.init, &mut Rng::stream(cfg.seed, STREAM_INIT))?;
    let data = augment_dataset(train, cfg.augment_count, &cfg.elastic(), cfg.seed.wrapping_add(AUGMENT_SEED_OFFSET))?;
    let schedule = cfg.schedule()?;
    let weights = cfg.loss_weights();
    let patch_spec = PatchSpec { extent: cfg.patch, normalize: true };
    let mut rng = Rng::stream(cfg.seed, STREAM_PATCHES);
    let mut sgd = SgdState::new(cfg.momentum, cfg.weight_decay);
    let mut log = RunLog::default();

    for iteration in 1..=cfg.iterations {
        let lr = schedule.lr_at(iteration - 1);
        let mut grads = None;
        let mut loss = 0.0;
        let mut peak = 0;
        for _ in 0..cfg.batch_size {
            let sample = &data[rng.below(data.len())];
            let (img, lab) = sample_patch(sample, &patch_spec, &mut rng)?;
            let mut g = Graph::new();
            let out = net.forward(&mut g, &params, &img)?;
            let l = g.ce_dice_loss(out.probs, one_hot(&lab, cfg.classes)?, weights)?;
            let value = g.value(l).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at iteration {iteration}")));
            }
            loss += value;
            peak = peak.max(out.stats.peak());
            accumulate(&mut grads, g.backward(l)?)?;
        }
        let mut grads = grads.expect("batch_size >= 1");
        if cfg.batch_size > 1 {
            let inv = 1.0 / cfg.batch_size as f64;
            for (_, t) in &mut grads.entries {
                *t = t.scale(inv);
            }
        }
        sgd.step(&mut params, &grads, lr)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at iteration {iteration}")),
                other => other,
            })?;
        log.train.push(TrainRecord { iteration, lr, loss: loss / cfg.batch_size as f64, peak_activation: peak });

        if !val.is_empty() && (iteration % cfg.val_every == 0 || iteration == cfg.iterations) {
            let predictor = Predictor { net: &net, params: &params, patch: cfg.patch };
            let rec = validate(&predictor, cfg, val, iteration)?;
            if !rec.loss.is_finite() {
                return Err(Error::NonFinite(format!("validation loss at iteration {iteration}")));
            }
            on_val(&rec);
            let stop = cfg.stop_dice > 0.0 && rec.mean_dice() >= cfg.stop_dice;
            log.val.push(rec);
            if stop {
                break;
            }
        }
    }
    Ok(TrainOutcome { net, params, log })
}
