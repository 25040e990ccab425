//! Segmentation loss, Adam, plateau schedule with early stopping, and the
//! epoch loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, Metrics, Summary};
use crate::model::Model;
use crate::nn::Ctx;
use crate::params::{Buffers, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};
use crate::Mode;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { bce: 1.0, dice: 1.0 }
    }
}

/// `w_bce·BCE(pred, gt) + w_dice·(1 − softDice(pred, gt))`.
pub fn loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, w: LossWeights) -> Result<Tensor<T>> {
    let b = ops::scale(&ops::bce(pred, gt)?, T::from_f64(w.bce));
    let dice_gap = ops::sub(&Tensor::full(&[1], T::ONE)?, &ops::soft_dice(pred, gt)?)?;
    ops::add(&b, &ops::scale(&dice_gap, T::from_f64(w.dice)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, one pair per parameter entry in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Number of steps taken.
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![T::ZERO; t.numel()]).collect();
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One bias-corrected update. Every parameter must carry a gradient;
    /// updated values are installed as fresh leaves, so gradients are
    /// cleared.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} entries, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        let grads = params
            .iter()
            .map(|(_, name, t)| {
                t.grad()
                    .ok_or_else(|| Error::Usage(format!("parameter `{}` has no gradient", name)))
            })
            .collect::<Result<Vec<_>>>()?;
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - libm::pow(beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(beta2, self.t as f64);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (nb1, nb2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let cur = params.get(id);
            let mut next = Vec::with_capacity(cur.numel());
            for (((&x, &g), mi), vi) in cur.data().iter().zip(&grads[k]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + nb1 * g;
                *vi = b2 * *vi + nb2 * g * g;
                let mhat = mi.to_f64() / c1;
                let vhat = vi.to_f64() / c2;
                next.push(T::from_f64(x.to_f64() - lr * mhat / (libm::sqrt(vhat) + eps)));
            }
            let shape = cur.shape().to_vec();
            params.set(id, &Tensor::param(&shape, next)?)?;
        }
        Ok(())
    }
}

/// What a schedule observation changed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScheduleEvent {
    pub improved: bool,
    pub reduced: bool,
    pub stop: bool,
}

/// Reduce-on-plateau learning rate with an independent early-stop counter.
/// Improvement means strictly greater than the best value so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub lr0: f64,
    pub factor: f64,
    pub patience: usize,
    pub stop_patience: usize,
    pub best: Option<f64>,
    /// Non-improving epochs since the best or the last reduction.
    pub plateau_count: usize,
    /// Non-improving epochs since the best.
    pub epochs_since_best: usize,
    pub reductions: u32,
}

impl Plateau {
    pub fn new(lr0: f64, factor: f64, patience: usize, stop_patience: usize) -> Self {
        Plateau {
            lr0,
            factor,
            patience,
            stop_patience,
            best: None,
            plateau_count: 0,
            epochs_since_best: 0,
            reductions: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr0 * libm::pow(self.factor, self.reductions as f64)
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_best >= self.stop_patience
    }

    pub fn observe(&mut self, metric: f64) -> ScheduleEvent {
        let mut ev = ScheduleEvent::default();
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.plateau_count = 0;
            self.epochs_since_best = 0;
            ev.improved = true;
        } else {
            self.plateau_count += 1;
            self.epochs_since_best += 1;
            if self.plateau_count >= self.patience {
                self.reductions += 1;
                self.plateau_count = 0;
                ev.reduced = true;
            }
        }
        ev.stop = self.should_stop();
        ev
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps; the run ends after the epoch in
    /// which it is reached.
    pub max_steps: Option<usize>,
    /// Stop once the mean validation Dice reaches this value.
    pub target_val_dice: Option<f64>,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    /// Replace each training sample by one random grid variant per epoch.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            max_epochs: 100,
            max_steps: None,
            target_val_dice: None,
            plateau_patience: 7,
            plateau_factor: 0.75,
            early_stop_patience: 10,
            batch_size: 8,
            loss_weights: LossWeights::default(),
            augment: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("train.lr0", format!("must be positive, got {}", self.lr0)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config(
                "train.plateau_factor",
                format!("must lie in (0, 1), got {}", self.plateau_factor),
            ));
        }
        for (field, v) in [
            ("train.plateau_patience", self.plateau_patience),
            ("train.early_stop_patience", self.early_stop_patience),
            ("train.batch_size", self.batch_size),
            ("train.max_epochs", self.max_epochs),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be ≥ 1"));
            }
        }
        if self.loss_weights.bce < 0.0 || self.loss_weights.dice < 0.0 {
            return Err(Error::config("train.loss_weights", "weights must be nonnegative"));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub val: Metrics,
    pub improved: bool,
}

/// Resumable optimizer and schedule state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Scalar> {
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub schedule: Plateau,
    pub adam: Adam<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn lr(&self) -> f64 {
        self.schedule.lr()
    }
}

pub struct TrainOutcome<T: Scalar> {
    /// Parameters and statistics of the best validation epoch.
    pub params: ParamStore<T>,
    pub buffers: Buffers<T>,
    pub best_val_dice: f64,
    pub history: Vec<EpochRecord>,
    /// State after the last epoch, with the last-epoch parameters.
    pub state: TrainState<T>,
    pub last_params: ParamStore<T>,
    pub last_buffers: Buffers<T>,
}

/// Forward of `samples` in evaluation mode, in batches, returning the
/// N×1×H×W probabilities of each batch.
pub fn predict<T: Scalar>(
    model: &Model,
    params: &ParamStore<T>,
    buffers: &Buffers<T>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<Tensor<T>>> {
    let frozen = params.frozen();
    let mut bufs = buffers.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    samples
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let (x, _) = data::batch::<T>(&refs)?;
            model.forward(&frozen, &mut Ctx::new(Mode::Eval, &mut rng, &mut bufs), &x)
        })
        .collect()
}

/// Per-image metrics of evaluation-mode predictions.
pub fn evaluate<T: Scalar>(
    model: &Model,
    params: &ParamStore<T>,
    buffers: &Buffers<T>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<(alloc::string::String, Metrics)>> {
    let preds = predict(model, params, buffers, samples, batch_size)?;
    let mut rows = Vec::with_capacity(samples.len());
    for (chunk, pred) in samples.chunks(batch_size.max(1)).zip(&preds) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (_, gt) = data::batch::<T>(&refs)?;
        rows.extend(metrics::evaluate(pred, &gt, &data::ids(chunk))?);
    }
    Ok(rows)
}

/// Epoch-loop driver owning the parameters being trained.
pub struct Trainer<'m, T: Scalar> {
    pub model: &'m Model,
    pub config: TrainConfig,
    pub params: ParamStore<T>,
    pub buffers: Buffers<T>,
    pub state: TrainState<T>,
    pub history: Vec<EpochRecord>,
    best: Option<(f64, ParamStore<T>, Buffers<T>)>,
}

impl<'m, T: Scalar> Trainer<'m, T> {
    pub fn new(model: &'m Model, params: ParamStore<T>, buffers: Buffers<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = TrainState {
            epoch: 0,
            step: 0,
            schedule: Plateau::new(
                config.lr0,
                config.plateau_factor,
                config.plateau_patience,
                config.early_stop_patience,
            ),
            adam: Adam::new(&params, AdamConfig::default()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        Ok(Trainer {
            model,
            config,
            params,
            buffers,
            state,
            history: Vec::new(),
            best: None,
        })
    }

    /// Continues from saved state; the current parameters count as the best
    /// so far.
    pub fn resume(&mut self, state: TrainState<T>) -> Result<()> {
        if state.adam.m.len() != self.params.len() {
            return Err(Error::State(format!(
                "state has {} moment entries for {} parameters",
                state.adam.m.len(),
                self.params.len()
            )));
        }
        if let Some(b) = state.schedule.best {
            self.best = Some((b, self.params.clone(), self.buffers.clone()));
        }
        self.state = state;
        Ok(())
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.config.max_epochs
            || self.state.schedule.should_stop()
            || self.config.max_steps.is_some_and(|s| self.state.step >= s)
            || self
                .config
                .target_val_dice
                .is_some_and(|t| self.state.schedule.best.is_some_and(|b| b >= t))
    }

    /// One pass over `train` followed by validation on `val`.
    pub fn epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochRecord> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Usage("training and validation sets must be nonempty".into()));
        }
        let epoch = self.state.epoch + 1;
        let lr = self.state.lr();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.state.rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(self.config.batch_size) {
            let owned: Vec<Sample> = if self.config.augment {
                idx.iter()
                    .map(|&i| data::augment_random(&train[i], &mut self.state.rng))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let refs: Vec<&Sample> = if self.config.augment {
                owned.iter().collect()
            } else {
                idx.iter().map(|&i| &train[i]).collect()
            };
            let (x, y) = data::batch::<T>(&refs)?;
            let pred = self.model.forward(
                &self.params,
                &mut Ctx::new(Mode::Train, &mut self.state.rng, &mut self.buffers),
                &x,
            )?;
            let l = loss(&pred, &y, self.config.loss_weights)?;
            let lv = l.item()?.to_f64();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: self.state.step + 1,
                    loss: lv,
                });
            }
            l.backward()?;
            self.state.adam.step(&mut self.params, lr)?;
            self.state.step += 1;
            total += lv;
            batches += 1;
        }
        let rows = evaluate(self.model, &self.params, &self.buffers, val, self.config.batch_size)?;
        let val_summary = Summary::of(rows.iter().map(|(_, m)| m))?;
        let ev = self.state.schedule.observe(val_summary.mean.d);
        if ev.improved {
            self.best = Some((val_summary.mean.d, self.params.clone(), self.buffers.clone()));
        }
        self.state.epoch = epoch;
        let rec = EpochRecord {
            epoch,
            loss: total / batches as f64,
            lr,
            val: val_summary.mean,
            improved: ev.improved,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Runs epochs until the epoch or step budget is spent or early
    /// stopping fires; `on_epoch` sees each record as it is produced.
    pub fn run(
        mut self,
        train: &[Sample],
        val: &[Sample],
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainOutcome<T>> {
        while !self.finished() {
            let rec = self.epoch(train, val)?;
            on_epoch(&rec);
        }
        let (best_val_dice, params, buffers) = match self.best.take() {
            Some(b) => b,
            None => return Err(Error::State("no epoch was run".into())),
        };
        Ok(TrainOutcome {
            params,
            buffers,
            best_val_dice,
            history: self.history,
            state: self.state,
            last_params: self.params,
            last_buffers: self.buffers,
        })
    }
}

/// Trains from freshly built parameters.
pub fn train<T: Scalar>(
    model: &Model,
    params: ParamStore<T>,
    buffers: Buffers<T>,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    Trainer::new(model, params, buffers, config.clone())?.run(train, val, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::GradCheck;

    #[test]
    fn loss_closed_forms() {
        let gt = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        let half = Tensor::<f64>::full(&[1, 1, 2, 2], 0.5).unwrap();
        let bce_only = loss(&half, &gt, LossWeights { bce: 1.0, dice: 0.0 }).unwrap();
        assert!((bce_only.item().unwrap() - core::f64::consts::LN_2).abs() < 1e-12);
        let perfect = loss(&gt, &gt, LossWeights::default()).unwrap().item().unwrap();
        assert!((0.0..1e-6).contains(&perfect), "{}", perfect);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let p = Tensor::<f64>::from_f64(&[2, 1, 2, 2], &[0.2, 0.7, 0.4, 0.9, 0.5, 0.1, 0.6, 0.3]).unwrap();
        let gt = Tensor::<f64>::from_f64(&[2, 1, 2, 2], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let r = GradCheck::new()
            .input("pred", &p)
            .run(|v| loss(&v[0], &gt, LossWeights::default()))
            .unwrap();
        assert!(r.max_rel_error() <= 1e-7, "{:?}", r.worst());
    }

    fn store(values: &[&[f64]]) -> ParamStore<f64> {
        let mut p = ParamStore::new(0);
        for (i, v) in values.iter().enumerate() {
            p.insert(format!("p{}", i), &Tensor::param(&[v.len()], v.to_vec()).unwrap())
                .unwrap();
        }
        p
    }

    fn set_grads(p: &ParamStore<f64>, grads: &[&[f64]]) {
        for ((_, _, t), g) in p.iter().zip(grads) {
            let w = Tensor::from_f64(t.shape(), g).unwrap();
            ops::sum(&ops::mul(t, &w).unwrap()).backward().unwrap();
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = store(&[&[1.0, -2.0, 0.5], &[3.0, 3.0]]);
        let mut adam = Adam::new(&p, AdamConfig::default());
        set_grads(&p, &[&[0.3, -4.0, 0.0], &[2.0, 2.0]]);
        adam.step(&mut p, 0.01).unwrap();
        let a = p.by_name("p0").unwrap().data().to_vec();
        assert!((a[0] - 0.99).abs() < 1e-9 && (a[1] + 1.99).abs() < 1e-9);
        assert_eq!(a[2], 0.5);
        let b = p.by_name("p1").unwrap().data();
        assert_eq!(b[0], b[1]);
        assert!(p.iter().all(|(_, _, t)| !t.has_grad()));
    }

    #[test]
    fn adam_requires_gradients() {
        let mut p = store(&[&[1.0]]);
        let mut adam = Adam::new(&p, AdamConfig::default());
        assert!(matches!(adam.step(&mut p, 0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn plateau_reduces_after_seven_and_stops_after_ten() {
        let mut s = Plateau::new(0.001, 0.75, 7, 10);
        assert!(s.observe(0.5).improved);
        let mut reduced_at = None;
        for epoch in 2..=11 {
            let ev = s.observe(0.5);
            if ev.reduced && reduced_at.is_none() {
                reduced_at = Some(epoch);
            }
            assert_eq!(ev.stop, epoch == 11);
        }
        assert_eq!(reduced_at, Some(8));
        assert_eq!(s.reductions, 1);
        assert_eq!(s.lr(), 0.001 * 0.75);
        let mut s = Plateau::new(0.001, 0.75, 7, 10);
        for k in 0..30 {
            assert!(!s.observe(k as f64).stop);
        }
        assert_eq!(s.lr(), 0.001);
    }
}
