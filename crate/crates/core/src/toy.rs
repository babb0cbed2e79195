//! Synthetic task that can only be solved by looking across RoIs.
//!
//! Each scene holds `N` RoIs. RoI `i` has a hidden class drawn uniformly from
//! `C` classes and a random nonce. Its features carry a noisy one-hot of the
//! class, the nonce on a dedicated channel, and pure-noise filler channels.
//! The label of RoI `i` is 1 iff some other RoI in the scene shares its
//! class. A single RoI's features say nothing about the other RoIs, so a
//! per-RoI classifier cannot beat the constant-prediction rate. With the
//! non-local block, RoI `i` can attend to same-class RoIs and compare the
//! mixed nonce with its own. Attention to itself alone returns its own
//! nonce, while attention shared with another RoI returns a blend.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{record_block, BlockParamIds, Tape, ValueId};
use crate::block::{init_params, nlroi_forward, BlockDims, NlRoiParams};
use crate::error::{ConfigError, Error, Result};
use crate::tensor::{conv1x1, global_avg_pool, relu, Real, Tensor};

/// Hyper-parameters of a toy run. `Default` is the reference configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub scenes_per_epoch: usize,
    pub epochs: usize,
    /// RoIs per scene.
    pub rois: usize,
    /// Size of the latent class vocabulary.
    pub classes: usize,
    pub d: usize,
    pub d_f: usize,
    pub d_g: usize,
    pub h: usize,
    pub w: usize,
    /// Standard deviation of the Gaussian feature noise.
    pub noise: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Hidden width of the per-RoI classifier head.
    pub hidden: usize,
    /// Size of the held-out evaluation set.
    pub eval_scenes: usize,
}

pub const MIN_EVAL_SCENES: usize = 1000;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scenes_per_epoch: 2000,
            epochs: 40,
            rois: 6,
            classes: 8,
            d: 12,
            d_f: 6,
            d_g: 6,
            h: 3,
            w: 3,
            noise: 0.1,
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 0.0001,
            seed: 0,
            hidden: 16,
            eval_scenes: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let range = |key: &'static str, msg: String| Err(ConfigError::Range { key, msg });
        let positive = [
            ("scenes_per_epoch", self.scenes_per_epoch),
            ("epochs", self.epochs),
            ("d", self.d),
            ("d_f", self.d_f),
            ("d_g", self.d_g),
            ("h", self.h),
            ("w", self.w),
            ("hidden", self.hidden),
        ];
        for (key, v) in positive {
            if v == 0 {
                return range(key, "must be at least 1".into());
            }
        }
        if self.rois < 2 {
            return range("rois", format!("must be at least 2, got {}", self.rois));
        }
        if self.classes < 2 {
            return range("classes", format!("must be at least 2, got {}", self.classes));
        }
        if self.d < self.classes + 1 {
            return range(
                "d",
                format!("needs room for {} class channels plus the nonce channel", self.classes),
            );
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return range("noise", format!("must be a finite value >= 0, got {}", self.noise));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return range("lr", format!("must be a finite value >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return range("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return range("weight_decay", format!("must be a finite value >= 0, got {}", self.weight_decay));
        }
        if self.eval_scenes < MIN_EVAL_SCENES {
            return range(
                "eval_scenes",
                format!("must be at least {MIN_EVAL_SCENES}, got {}", self.eval_scenes),
            );
        }
        Ok(())
    }

    pub fn block_dims(&self) -> Result<BlockDims> {
        BlockDims::new(self.d, self.d_f, self.d_g)
    }

    /// Channel index carrying the nonce.
    pub fn nonce_channel(&self) -> usize {
        self.classes
    }
}

/// One synthetic training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T> {
    /// `(N, D, H, W)` RoI features.
    pub features: Tensor<T>,
    pub labels: Vec<bool>,
    /// Hidden from the model; kept for diagnostics.
    pub latent_classes: Vec<usize>,
    pub nonces: Vec<f64>,
}

/// `labels[i]` is true iff another RoI has the same class as RoI `i`.
pub fn labels_for(classes: &[usize]) -> Vec<bool> {
    classes
        .iter()
        .enumerate()
        .map(|(i, c)| classes.iter().enumerate().any(|(j, o)| j != i && o == c))
        .collect()
}

pub fn gen_scene<T: Real>(config: &TrainConfig, seed: u64) -> Result<Scene<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<usize> = (0..config.rois).map(|_| rng.random_range(0..config.classes)).collect();
    scene_from_rng(config, classes, &mut rng)
}

/// Like [`gen_scene`] but with the latent classes fixed by the caller.
pub fn gen_scene_with_classes<T: Real>(config: &TrainConfig, classes: &[usize], seed: u64) -> Result<Scene<T>> {
    config.validate()?;
    if classes.len() != config.rois || classes.iter().any(|&c| c >= config.classes) {
        return Err(Error::invalid(
            "gen_scene",
            format!("classes {classes:?} do not fit {} RoIs x {} classes", config.rois, config.classes),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scene_from_rng(config, classes.to_vec(), &mut rng)
}

fn scene_from_rng<T: Real>(config: &TrainConfig, classes: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<Scene<T>> {
    let mut nonces: Vec<f64> = Vec::with_capacity(config.rois);
    while nonces.len() < config.rois {
        let v = rng.random_range(-1.0..1.0);
        if !nonces.contains(&v) {
            nonces.push(v);
        }
    }
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::invalid("gen_scene", e.to_string()))?;
    let plane = config.h * config.w;
    let mut data = Vec::with_capacity(config.rois * config.d * plane);
    for (class, nonce) in classes.iter().zip(&nonces) {
        for ch in 0..config.d {
            for _ in 0..plane {
                let v = if ch == config.nonce_channel() {
                    *nonce
                } else {
                    let base = if ch == *class { 1.0 } else { 0.0 };
                    base + noise.sample(rng)
                };
                data.push(T::from_f64_lossy(v));
            }
        }
    }
    Ok(Scene {
        features: Tensor::new([config.rois, config.d, config.h, config.w], data)?,
        labels: labels_for(&classes),
        latent_classes: classes,
        nonces,
    })
}

/// Probability that a given RoI has a positive label:
/// `1 - ((C - 1) / C)^(N - 1)`.
pub fn positive_label_rate(rois: usize, classes: usize) -> f64 {
    1.0 - ((classes as f64 - 1.0) / classes as f64).powi(rois as i32 - 1)
}

/// Accuracy of the best constant predictor.
pub fn constant_prediction_rate(rois: usize, classes: usize) -> f64 {
    let p = positive_label_rate(rois, classes);
    p.max(1.0 - p)
}

/// Two-layer per-RoI classifier: `out_w . relu(hidden_w . v + hidden_b) + out_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub hidden_w: Tensor<T>,
    pub hidden_b: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

impl<T: Real> Head<T> {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn init(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b1 = 1.0 / (input as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        Self {
            hidden_w: Tensor::uniform([hidden, input], -b1, b1, &mut rng),
            hidden_b: Tensor::zeros([hidden]),
            out_w: Tensor::uniform([1, hidden], -b2, b2, &mut rng),
            out_b: Tensor::zeros([1]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.hidden_w.shape()[1]
    }

    /// One logit per row of `pooled` (shape `(N, input)`).
    pub fn forward(&self, pooled: &Tensor<T>) -> Result<Vec<T>> {
        let n = pooled.shape()[0];
        if pooled.shape() != [n, self.input_width()] {
            return Err(Error::invalid(
                "head",
                format!("features have shape {:?}, head expects width {}", pooled.shape(), self.input_width()),
            ));
        }
        let v = pooled.reshape([n, self.input_width(), 1, 1])?;
        let hidden = relu(&conv1x1(&v, &self.hidden_w, Some(&self.hidden_b))?);
        Ok(conv1x1(&hidden, &self.out_w, Some(&self.out_b))?.into_data())
    }

    fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.hidden_w, &self.hidden_b, &self.out_w, &self.out_b]
    }
}

/// Block (absent for the baseline) plus head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub block: Option<NlRoiParams<T>>,
    pub head: Head<T>,
}

impl<T: Real> Model<T> {
    pub fn init(config: &TrainConfig, with_block: bool) -> Result<Self> {
        let dims = config.block_dims()?;
        let block = with_block.then(|| init_params(dims, derive_seed(config.seed, 0, Stream::Block)));
        let width = if with_block { dims.out_channels() } else { config.d };
        let head = Head::init(width, config.hidden, derive_seed(config.seed, 0, Stream::Head));
        Ok(Self { block, head })
    }

    /// Block tensors (if any) followed by head tensors.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.block.iter().flat_map(|p| p.tensors()).collect();
        out.extend(self.head.tensors());
        out
    }

    /// Inverse of [`Model::tensors`], keeping this model's layout.
    pub fn with_tensors(&self, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let expected = self.tensors().len();
        if tensors.len() != expected {
            return Err(Error::invalid("model", format!("expected {expected} tensors, got {}", tensors.len())));
        }
        let mut it = tensors.into_iter();
        let block = match &self.block {
            Some(p) => {
                let ts: [Tensor<T>; 6] = std::array::from_fn(|_| it.next().expect("length checked"));
                Some(NlRoiParams::from_tensors(p.dims(), ts)?)
            }
            None => None,
        };
        let [hidden_w, hidden_b, out_w, out_b] = std::array::from_fn(|_| it.next().expect("length checked"));
        let head = Head {
            hidden_w,
            hidden_b,
            out_w,
            out_b,
        };
        for (new, old) in head.tensors().iter().zip(self.head.tensors()) {
            if new.shape() != old.shape() {
                return Err(Error::shape("model", new.shape(), old.shape()));
            }
        }
        Ok(Self { block, head })
    }
}

/// Per-RoI logits: the head applied to the spatially pooled (augmented)
/// features.
pub fn forward_model<T: Real>(scene: &Scene<T>, block: Option<&NlRoiParams<T>>, head: &Head<T>) -> Result<Vec<T>> {
    let features = match block {
        Some(p) => nlroi_forward(&scene.features, p)?.augmented,
        None => scene.features.clone(),
    };
    head.forward(&global_avg_pool(&features)?)
}

/// Mean binary cross-entropy over RoIs and its gradient with respect to the
/// logits, using the stable form `max(z, 0) - z y + ln(1 + e^-|z|)`.
pub fn bce_with_logits<T: Real>(logits: &[T], labels: &[bool]) -> (f64, Vec<T>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let z = z.to_f64_lossless();
        let y = if y { 1.0 } else { 0.0 };
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let sigmoid = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        };
        grad.push(T::from_f64_lossy((sigmoid - y) / n));
    }
    (loss / n, grad)
}

/// Momentum SGD with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Velocity buffers, created lazily on the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Tensor<T>>,
}

/// `v <- momentum * v + (grad + weight_decay * theta)`, `theta <- theta - lr * v`.
pub fn sgd_step<T: Real>(
    params: &[&Tensor<T>],
    grads: &[Tensor<T>],
    hyper: &Sgd,
    state: &mut SgdState<T>,
) -> Result<Vec<Tensor<T>>> {
    if params.len() != grads.len() {
        return Err(Error::invalid(
            "sgd_step",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::invalid("sgd_step", "optimizer state does not match parameters"));
    }
    let lr = T::from_f64_lossy(hyper.lr);
    let mu = T::from_f64_lossy(hyper.momentum);
    let wd = T::from_f64_lossy(hyper.weight_decay);
    let mut updated = Vec::with_capacity(params.len());
    for ((theta, g), v) in params.iter().zip(grads).zip(state.velocity.iter_mut()) {
        if theta.shape() != g.shape() || theta.shape() != v.shape() {
            return Err(Error::shape("sgd_step", theta.shape(), g.shape()));
        }
        let step = g.zip_map(theta, |gi, ti| gi + wd * ti)?;
        *v = v.zip_map(&step, |vi, si| mu * vi + si)?;
        updated.push(theta.zip_map(v, |ti, vi| ti - lr * vi)?);
    }
    Ok(updated)
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Block,
    Head,
    Train,
    Eval,
}

/// Deterministic seed for the `index`-th item of a stream. Training scenes
/// always get even seeds and held-out scenes odd ones, so the two sets are
/// disjoint.
fn derive_seed(base: u64, index: u64, stream: Stream) -> u64 {
    let tag: u64 = match stream {
        Stream::Block => 1,
        Stream::Head => 2,
        Stream::Train => 3,
        Stream::Eval => 4,
    };
    let mixed = splitmix64(splitmix64(base ^ tag.wrapping_mul(0xd6e8_feb8_6659_fd93)).wrapping_add(index));
    match stream {
        Stream::Train => mixed & !1,
        Stream::Eval => mixed | 1,
        _ => mixed,
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn train_scene_seed(config: &TrainConfig, index: u64) -> u64 {
    derive_seed(config.seed, index, Stream::Train)
}

pub fn eval_scene_seed(config: &TrainConfig, index: u64) -> u64 {
    derive_seed(config.seed, index, Stream::Eval)
}

/// One line of training metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's scenes.
    pub loss: f64,
    /// Held-out accuracy after the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    /// The loss became non-finite at the given epoch and scene.
    Diverged { epoch: usize, scene: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub records: Vec<EpochRecord>,
    pub final_accuracy: f64,
    pub status: RunStatus,
}

#[derive(Debug, Clone)]
pub struct TrainResult<T> {
    pub metrics: TrainMetrics,
    pub initial: Model<T>,
    pub model: Model<T>,
}

/// Records the model on a tape and returns the logits handle (shape `(N, 1)`).
fn record_model<T: Real>(
    tape: &mut Tape<T>,
    features: &Tensor<T>,
    model: &Model<T>,
) -> Result<(ValueId, Vec<ValueId>)> {
    let x = tape.leaf(features.clone());
    let mut ids = Vec::new();
    let feats = match &model.block {
        Some(p) => {
            let param_ids = BlockParamIds::record(tape, p);
            ids.extend(param_ids.ids);
            record_block(tape, x, &param_ids)?.augmented
        }
        None => x,
    };
    let head_ids = model.head.tensors().map(|t| tape.leaf(t.clone()));
    ids.extend(head_ids);
    let [hw, hb, ow, ob] = head_ids;
    let n = features.shape()[0];
    let pooled = tape.global_avg_pool(feats)?;
    let v = tape.reshape(pooled, &[n, model.head.input_width(), 1, 1])?;
    let hidden = tape.conv1x1(v, hw, Some(hb))?;
    let hidden = tape.relu(hidden);
    let logits = tape.conv1x1(hidden, ow, Some(ob))?;
    let logits = tape.reshape(logits, &[n, 1])?;
    Ok((logits, ids))
}

/// Loss and gradients for every model tensor on one scene.
pub fn scene_gradients<T: Real>(scene: &Scene<T>, model: &Model<T>) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let (logits, ids) = record_model(&mut tape, &scene.features, model)?;
    let (loss, dlogits) = bce_with_logits(tape.value(logits).data(), &scene.labels);
    let seed = Tensor::new([dlogits.len(), 1], dlogits)?;
    let adj = tape.backward(&[(logits, seed)])?;
    Ok((loss, ids.into_iter().map(|id| adj.get(&tape, id)).collect()))
}

/// Fraction of held-out RoIs classified correctly (logit > 0 predicts a
/// positive label). Scenes are split across `threads` workers; the count is
/// an integer sum, so the result does not depend on the thread count.
pub fn evaluate<T: Real>(config: &TrainConfig, model: &Model<T>, threads: usize) -> Result<f64> {
    let threads = threads.max(1);
    let total = config.eval_scenes;
    let chunk = total.div_ceil(threads);
    let count_range = |lo: usize, hi: usize| -> Result<usize> {
        let mut correct = 0;
        for k in lo..hi {
            let scene = gen_scene::<T>(config, eval_scene_seed(config, k as u64))?;
            let logits = forward_model(&scene, model.block.as_ref(), &model.head)?;
            correct += logits
                .iter()
                .zip(&scene.labels)
                .filter(|(z, &y)| (**z > T::zero()) == y)
                .count();
        }
        Ok(correct)
    };
    let correct: usize = if threads == 1 {
        count_range(0, total)?
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let (lo, hi) = ((t * chunk).min(total), ((t + 1) * chunk).min(total));
                    s.spawn(move || count_range(lo, hi))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .sum::<Result<usize>>()
        })?
    };
    Ok(correct as f64 / (total * config.rois) as f64)
}

/// Trains the block (when `with_block`) and head with one SGD step per
/// scene, evaluating on the held-out set after every epoch.
pub fn train<T: Real>(config: &TrainConfig, with_block: bool) -> Result<TrainResult<T>> {
    train_with_progress(config, with_block, |_| {})
}

pub fn train_with_progress<T: Real>(
    config: &TrainConfig,
    with_block: bool,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainResult<T>> {
    config.validate()?;
    let initial = Model::<T>::init(config, with_block)?;
    let hyper = Sgd {
        lr: config.lr,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let mut model = initial.clone();
    let mut state = SgdState::default();
    let mut records = Vec::with_capacity(config.epochs);
    let mut status = RunStatus::Completed;
    'epochs: for epoch in 0..config.epochs {
        let mut total = 0.0;
        for k in 0..config.scenes_per_epoch {
            let index = (epoch * config.scenes_per_epoch + k) as u64;
            let scene = gen_scene::<T>(config, train_scene_seed(config, index))?;
            let (loss, grads) = scene_gradients(&scene, &model)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                status = RunStatus::Diverged { epoch, scene: k };
                break 'epochs;
            }
            total += loss;
            let updated = sgd_step(&model.tensors(), &grads, &hyper, &mut state)?;
            model = model.with_tensors(updated)?;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: total / config.scenes_per_epoch as f64,
            accuracy: evaluate(config, &model, 1)?,
        };
        on_epoch(&record);
        records.push(record);
    }
    let final_accuracy = match (&status, records.last()) {
        (RunStatus::Completed, Some(r)) => r.accuracy,
        _ => f64::NAN,
    };
    Ok(TrainResult {
        metrics: TrainMetrics {
            records,
            final_accuracy,
            status,
        },
        initial,
        model,
    })
}
