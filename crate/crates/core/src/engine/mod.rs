//! Training, inference and checkpoints.

mod checkpoint;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{
    check_config, decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
    CHECKPOINT_MAGIC,
};
pub use optim::{adam_step, sgd_step, AdamState, Optimizer};

use crate::data::{grid_positions, stitch, DatasetSplit, Mask, SamplePair};
use crate::error::{Error, Result};
use crate::metrics::{binarize, confusion, Evaluation, Scores};
use crate::model::ModelState;
use crate::objective::{balance_beta, LossConfig, DEFAULT_EPSILON};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Evaluate on the test split every this many steps; 0 disables.
    pub eval_every: usize,
    /// Class weight; `None` derives it from the training labels.
    pub beta: Option<f64>,
    pub epsilon: f64,
    /// Reduce per-sample gradients in a fixed order so runs are bit-reproducible.
    pub deterministic: bool,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            seed: 0,
            eval_every: 0,
            beta: None,
            epsilon: DEFAULT_EPSILON,
            deterministic: true,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("train.steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(
                "train.learning_rate",
                format!("{} must be finite and non-negative", self.learning_rate),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(
                "train.threshold",
                format!("{} not in (0, 1)", self.threshold),
            ));
        }
        Ok(())
    }

    pub fn loss_config(&self, train: &[SamplePair]) -> Result<LossConfig> {
        let beta = match self.beta {
            Some(b) => b,
            None => balance_beta(train)?,
        };
        let cfg = LossConfig {
            beta,
            epsilon: self.epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub step: usize,
    /// Mean loss of the step's mini-batch, before the update.
    pub loss: f64,
    pub eval: Option<Scores>,
}

pub const LOG_CSV_HEADER: &str = "step,loss,recall,f1,precision,accuracy";

impl TrainLogEntry {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        match &self.eval {
            Some(s) => format!(
                "{},{:.8},{},{},{},{:.6}",
                self.step,
                self.loss,
                opt(s.recall),
                opt(s.f1),
                opt(s.precision),
                s.accuracy
            ),
            None => format!("{},{:.8},,,,", self.step, self.loss),
        }
    }
}

fn check_geometry<T: Float>(model: &ModelState<T>, pair: &SamplePair) -> Result<()> {
    let cfg = model.config();
    let (h, w) = pair.spatial();
    if pair.channels() != cfg.input_channels {
        return Err(Error::sample(
            &pair.id,
            format!(
                "{} channels but the model expects {}",
                pair.channels(),
                cfg.input_channels
            ),
        ));
    }
    cfg.check_spatial(h, w)
        .map_err(|e| Error::sample(&pair.id, e.to_string()))
}

/// Forward pass that reports a non-finite output as [`Error::NonFinite`] (step 0; the caller fills it in).
fn forward_checked<T: Float>(model: &ModelState<T>, pair: &SamplePair) -> Result<Tensor<T>> {
    let out = model.forward(&pair.t1.cast::<T>(), &pair.t2.cast::<T>())?;
    if !out.all_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("network output for sample `{}` is not finite", pair.id),
        });
    }
    Ok(out)
}

/// Loss and per-parameter gradient for one pair.
pub fn sample_gradients<T: Float>(
    model: &ModelState<T>,
    pair: &SamplePair,
    loss: &LossConfig,
) -> Result<(f64, Vec<Vec<T>>)> {
    let out = forward_checked(model, pair)?;
    let l = loss.total(&pair.label.to_tensor::<T>(), &out)?;
    let grads = l.gradients()?;
    let g = model.parameters().iter().map(|p| grads.get_or_zeros(p)).collect();
    Ok((l.item()?.as_f64(), g))
}

/// Mean loss and mean gradient over `batch`.
///
/// Per-sample work runs in parallel. With `ordered` the gradients are summed
/// in batch order; otherwise each sample's backward pass adds into the
/// parameters' shared grad slots as it finishes.
pub fn batch_gradients<T: Float>(
    model: &ModelState<T>,
    batch: &[&SamplePair],
    loss: &LossConfig,
    ordered: bool,
) -> Result<(f64, Vec<Vec<T>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "empty"));
    }
    let scale = T::of(1.0 / batch.len() as f64);
    if ordered {
        let per: Vec<(f64, Vec<Vec<T>>)> = batch
            .par_iter()
            .map(|p| sample_gradients(model, p, loss))
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        let mut acc: Vec<Vec<T>> = model.parameters().iter().map(|p| vec![T::zero(); p.len()]).collect();
        for (l, g) in per {
            total += l;
            for (a, g) in acc.iter_mut().zip(g) {
                a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
            }
        }
        acc.iter_mut().flatten().for_each(|a| *a *= scale);
        Ok((total / batch.len() as f64, acc))
    } else {
        model.parameters().iter().for_each(Tensor::zero_grad);
        let losses: Vec<f64> = batch
            .par_iter()
            .map(|p| {
                let out = forward_checked(model, p)?;
                let l = loss.total(&p.label.to_tensor::<T>(), &out)?;
                l.backward()?;
                Ok(l.item()?.as_f64())
            })
            .collect::<Result<_>>()?;
        let grads = model
            .parameters()
            .iter()
            .map(|p| {
                let mut g = p.grad().unwrap_or_else(|| vec![T::zero(); p.len()]);
                g.iter_mut().for_each(|v| *v *= scale);
                g
            })
            .collect();
        model.parameters().iter().for_each(Tensor::zero_grad);
        Ok((losses.iter().sum::<f64>() / batch.len() as f64, grads))
    }
}

/// Endless sequence of mini-batches: each epoch is a permutation keyed by `(seed, epoch)`.
struct Batcher {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut b = Batcher {
            n,
            batch: batch.min(n),
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch > self.n {
            self.epoch += 1;
            self.shuffle();
        }
        let start = self.cursor;
        self.cursor += self.batch;
        &self.order[start..self.cursor]
    }
}

/// Trained model plus the per-step log.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Float> {
    pub model: ModelState<T>,
    pub log: Vec<TrainLogEntry>,
    pub loss: LossConfig,
}

pub fn train<T: Float>(model: ModelState<T>, data: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_with(model, data, cfg, |_| {})
}

/// [`train`] with a callback invoked on every log entry as it is produced.
pub fn train_with<T: Float>(
    mut model: ModelState<T>,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    mut on_entry: impl FnMut(&TrainLogEntry),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("training split", "contains no pairs"));
    }
    for pair in data.train.iter().chain(&data.test) {
        check_geometry(&model, pair)?;
    }
    let loss = cfg.loss_config(&data.train)?;
    let mut values: Vec<Vec<T>> = model.parameters().iter().map(Tensor::to_vec).collect();
    let mut adam = AdamState::new(values.iter().map(Vec::len));
    let mut batcher = Batcher::new(data.train.len(), cfg.batch_size, cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let batch: Vec<&SamplePair> = batcher.next_batch().iter().map(|&i| &data.train[i]).collect();
        let (batch_loss, grads) = batch_gradients(&model, &batch, &loss, cfg.deterministic).map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite { step, detail },
            e => e,
        })?;
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("batch loss is {batch_loss}"),
            });
        }
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                step,
                detail: format!("gradient of `{}` is not finite", model.specs()[i].name),
            });
        }
        match cfg.optimizer {
            Optimizer::Adam { beta1, beta2, eps } => {
                adam_step(&mut values, &grads, &mut adam, cfg.learning_rate, beta1, beta2, eps)?
            }
            Optimizer::Sgd => sgd_step(&mut values, &grads, cfg.learning_rate)?,
        }
        model.set_parameters(values.clone())?;

        let eval_now = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps);
        let eval = if eval_now && !data.test.is_empty() {
            Some(evaluate(&model, &data.test, cfg.threshold)?.scores()?)
        } else {
            None
        };
        let entry = TrainLogEntry {
            step,
            loss: batch_loss,
            eval,
        };
        on_entry(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log, loss })
}

/// Probability map and thresholded change mask for one pair.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `[1 x H x W]`
    pub probabilities: Tensor<f32>,
    pub mask: Mask,
}

fn tile_extent(total: usize, nominal: usize, multiple: usize) -> usize {
    // largest admissible tile not exceeding the nominal size or the image
    let cap = nominal.min(total);
    cap - cap % multiple
}

/// Probability map for a pair of `[C x H x W]` images.
///
/// Images whose sides exceed the model's nominal input size, or are not
/// divisible by its pooling factor, are cut into nominal-size tiles on an
/// overlap-free grid (plus a flush tile at each far border); tile outputs are
/// stitched back.
pub fn predict<T: Float>(model: &ModelState<T>, t1: &Tensor<f32>, t2: &Tensor<f32>) -> Result<Tensor<f32>> {
    if t1.shape() != t2.shape() {
        return Err(Error::shape(
            "infer",
            format!("t1 {:?} vs t2 {:?}", t1.shape(), t2.shape()),
        ));
    }
    let (h, w) = match *t1.shape() {
        [_, h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                "infer",
                format!("expected [C x H x W], got {:?}", t1.shape()),
            ))
        }
    };
    let cfg = model.config();
    let m = cfg.size_multiple();
    let fits = h <= cfg.input_size.0 && w <= cfg.input_size.1 && cfg.check_spatial(h, w).is_ok();
    if fits {
        return Ok(model.forward(&t1.cast::<T>(), &t2.cast::<T>())?.cast::<f32>());
    }
    let (th, tw) = (tile_extent(h, cfg.input_size.0, m), tile_extent(w, cfg.input_size.1, m));
    if th == 0 || tw == 0 {
        return Err(Error::shape(
            "infer",
            format!("{h}x{w} image is smaller than one {m}x{m} pooling cell"),
        ));
    }
    let ys = grid_positions(h, th, th)?;
    let xs = grid_positions(w, tw, tw)?;
    let cells: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    let tiles: Vec<(usize, usize, Tensor<f32>)> = cells
        .par_iter()
        .map(|&(y, x)| {
            let a = crate::data::crop(t1, y, x, th, tw)?;
            let b = crate::data::crop(t2, y, x, th, tw)?;
            Ok((y, x, model.forward(&a.cast::<T>(), &b.cast::<T>())?.cast::<f32>()))
        })
        .collect::<Result<_>>()?;
    stitch(&tiles, h, w)
}

pub fn infer<T: Float>(
    model: &ModelState<T>,
    t1: &Tensor<f32>,
    t2: &Tensor<f32>,
    threshold: f64,
) -> Result<Prediction> {
    let probabilities = predict(model, t1, t2)?;
    let mask = binarize(&probabilities, threshold)?;
    Ok(Prediction { probabilities, mask })
}

/// Per-pair confusion counts over `pairs`.
pub fn evaluate<T: Float>(model: &ModelState<T>, pairs: &[SamplePair], threshold: f64) -> Result<Evaluation> {
    let counts: Vec<_> = pairs
        .par_iter()
        .map(|p| {
            let pred = infer(model, &p.t1, &p.t2, threshold)?;
            Ok((p.id.clone(), confusion(&pred.mask, &p.label)?))
        })
        .collect::<Result<_>>()?;
    let mut ev = Evaluation::default();
    for (id, c) in counts {
        ev.push(id, c);
    }
    Ok(ev)
}
