use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use crate::compute::{Graph, NormMode, ParamStore};
use crate::data::HsiCube;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, DualBranchModel, ModelConfig};
use crate::patching::{extract_patches, random_mask, stack, MaskSpec, PatchSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of patches held out for model selection.
    pub val_fraction: f64,
    /// Patch extraction stride.
    pub stride: usize,
    /// Seeds the split, batch order and masking.
    pub seed: u64,
    /// Set from the `mask` section of a run configuration.
    #[serde(skip)]
    pub mask: MaskSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 1e-4,
            epochs: 100,
            batch_size: 32,
            val_fraction: 0.1,
            stride: 8,
            seed: 0,
            mask: MaskSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, patch: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("train.val_fraction", "must lie in [0, 1)"));
        }
        if self.stride == 0 {
            return Err(Error::config("train.stride", "must be positive"));
        }
        self.mask.validate(patch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// `epoch,train_loss,val_loss` rows; a missing validation loss is left
    /// empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for r in &self.epochs {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, val);
        }
        out
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .filter(|r| r.val_loss.is_some())
            .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).expect("finite losses"))
    }
}

struct Split {
    train: Vec<usize>,
    val: Vec<usize>,
}

fn split(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Result<Split> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("training needs at least 2 patches, cube yields {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n_val == 0 {
        return Err(Error::InvalidInput(format!(
            "validation fraction {fraction} of {n} patches leaves an empty validation split"
        )));
    }
    let n_val = n_val.min(n - 1);
    let val = idx.split_off(n - n_val);
    Ok(Split { train: idx, val })
}

/// Mean squared reconstruction error over the selected patches, eval mode.
fn val_loss(model: &DualBranchModel, store: &ParamStore<f32>, patches: &PatchSet, idx: &[usize], batch: usize) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for chunk in idx.chunks(batch) {
        let x = patches.batch(chunk);
        let y = model.reconstruct(store, x.clone())?;
        sum += y
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &b)| f64::from(a - b).powi(2))
            .sum::<f64>();
        count += x.len();
    }
    Ok(sum / count as f64)
}

/// Trains a fresh model on patches of `cube`.
///
/// Each epoch shuffles the training patches, masks them, reconstructs and
/// minimizes the MSE against the unmasked originals, then scores the
/// validation patches unmasked. The returned checkpoint holds the weights of
/// the epoch with the lowest validation loss (the last epoch when no
/// patches are held out; the initialization when `epochs == 0`).
pub fn fit(cube: &HsiCube, model_config: &ModelConfig, train: &TrainConfig) -> Result<(Checkpoint, History)> {
    fit_with(cube, model_config, train, |r| {
        log::info!(
            "epoch {} train {:.6} val {}",
            r.epoch,
            r.train_loss,
            r.val_loss.map_or("-".into(), |v| format!("{v:.6}"))
        )
    })
}

/// [`fit`] with a callback invoked after every epoch.
pub fn fit_with(
    cube: &HsiCube,
    model_config: &ModelConfig,
    train: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, History)> {
    let config = model_config.resolve_bands(cube.bands)?;
    train.validate(config.patch)?;
    let (model, mut store) = DualBranchModel::init::<f32>(config.clone())?;
    let patches = extract_patches(cube, config.patch, config.patch, train.stride)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let Split { train: mut train_idx, val: val_idx } = split(patches.len(), train.val_fraction, &mut rng)?;
    let mut opt = AdamState::new(&store, AdamConfig::new(train.lr, train.weight_decay));
    let mut history = History::default();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let dims = [config.patch, config.patch, config.bands];

    for epoch in 1..=train.epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in train_idx.chunks(train.batch_size) {
            let mut masked = Vec::with_capacity(chunk.len());
            for &i in chunk {
                masked.push(random_mask(&patches.patches[i], &train.mask, &mut rng)?.0);
            }
            let input = stack(masked.iter(), dims);
            let target = patches.batch(chunk);
            let mut g = Graph::new();
            let x = g.input(input);
            let out = model.forward(&mut g, &store, x, NormMode::Train)?;
            let loss = g.mse(out.output, &target)?;
            let lv = f64::from(g.value(loss).data()[0]);
            if !lv.is_finite() {
                return Err(Error::Numeric {
                    step: epoch,
                    reason: "training loss is not finite".into(),
                });
            }
            store.zero_grads();
            g.backward_into(loss, &mut store)?;
            opt.step(&mut store)?;
            DualBranchModel::apply_bn_updates(&mut store, &out.bn_updates)?;
            loss_sum += lv * chunk.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            val_loss: if val_idx.is_empty() {
                None
            } else {
                Some(val_loss(&model, &store, &patches, &val_idx, train.batch_size)?)
            },
        };
        on_epoch(&record);
        history.epochs.push(record);
        match record.val_loss {
            Some(v) if best.as_ref().is_none_or(|(b, _, _)| v < *b) => best = Some((v, epoch, store.clone())),
            _ => {}
        }
    }

    let (val, epoch, store) = match best {
        Some((v, e, s)) => (Some(v), e, s),
        None => (None, train.epochs, store),
    };
    let mut store = store;
    store.zero_grads();
    Ok((
        Checkpoint {
            model,
            store,
            seed: train.seed,
            epoch,
            val_loss: val,
        },
        history,
    ))
}
