//! Adam, the mini-batch training loop and checkpoint files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::fusion::DEFAULT_MARGIN;
use crate::kv::KvDoc;
use crate::model::{Model, ModelConfig, MODEL_KEYS};
use crate::numerics::{finite_diff_grad, ParamStore, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: AdamConfig,
) -> Result<()> {
    for (name, value) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
        if g.shape() != value.shape() {
            return Err(Error::Contract(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                value.shape()
            )));
        }
        for moments in [&state.first, &state.second] {
            if let Some(m) = moments.get(name) {
                if m.len() != value.numel() {
                    return Err(Error::Contract(format!("optimizer state for `{name}` has the wrong size")));
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, value) in params.iter_mut() {
        let g = grads[name].data();
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.len()]);
        let data = value.data_mut();
        for k in 0..g.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            data[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Learning-rate multiplier applied from `decay_epoch` on.
    pub lr_decay: f64,
    /// Zero-based epoch where the decay starts; `None` disables it.
    pub decay_epoch: Option<usize>,
    pub margin: f64,
    /// Shuffling seed.
    pub seed: u64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Folds used for validation recall.
    pub val_folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 20,
            lr: 2e-4,
            lr_decay: 0.1,
            decay_epoch: Some(10),
            margin: DEFAULT_MARGIN,
            seed: 0,
            max_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            val_folds: 1,
        }
    }
}

impl TrainConfig {
    /// 20 epochs, decay at epoch 10.
    pub fn mscoco() -> Self {
        Self::default()
    }

    /// 40 epochs, decay at epoch 30.
    pub fn flickr30k() -> Self {
        TrainConfig {
            epochs: 40,
            decay_epoch: Some(30),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.lr_decay > 0.0) || !(self.margin >= 0.0) {
            return Err(Error::Config("lr, lr_decay and margin must be non-negative".into()));
        }
        if let Some(e) = self.decay_epoch {
            if e > self.epochs {
                return Err(Error::Config(format!(
                    "decay_epoch {e} is past the last epoch ({})",
                    self.epochs
                )));
            }
        }
        if self.val_folds == 0 {
            return Err(Error::Config("val_folds must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay_epoch {
            Some(d) if epoch >= d => self.lr * self.lr_decay,
            _ => self.lr,
        }
    }

    fn adam(&self, epoch: usize) -> AdamConfig {
        AdamConfig {
            lr: self.lr_at(epoch),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_loss: f64,
    pub val_rsum: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot with the best validation rsum, or the final one without
    /// validation data.
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub history: Vec<EpochRecord>,
    /// `(step, loss)` for every optimizer step.
    pub loss_curve: Vec<(usize, f64)>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|h| h.mean_loss)
    }

    pub fn loss_csv(&self) -> String {
        loss_csv(&self.loss_curve)
    }
}

pub fn loss_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("step,loss\n");
    for (step, loss) in curve {
        out.push_str(&format!("{step},{loss}\n"));
    }
    out
}

/// Trains `model` in place on every (image, caption) pair of `dataset`.
pub fn train(
    model: Model,
    dataset: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.num_captions() < 2 {
        return Err(Error::Input("training needs at least two image-caption pairs".into()));
    }
    let mut model = model;
    let mut pairs: Vec<(usize, usize)> = dataset
        .bundles
        .iter()
        .enumerate()
        .flat_map(|(i, b)| (0..b.captions.len()).map(move |c| (i, c)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new();
    let mut history = Vec::with_capacity(config.epochs);
    let mut loss_curve = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0usize;

    'epochs: for epoch in 0..config.epochs {
        pairs.shuffle(&mut rng);
        let adam = config.adam(epoch);
        let mut losses = Vec::new();
        for chunk in pairs.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            if chunk.len() < 2 {
                continue;
            }
            let images: Vec<&Tensor> = chunk.iter().map(|&(i, _)| &dataset.bundles[i].regions).collect();
            let caps: Vec<&[u32]> = chunk
                .iter()
                .map(|&(i, c)| dataset.bundles[i].captions[c].as_slice())
                .collect();
            let mut tape = Tape::new();
            let loss = model.batch_loss(&mut tape, &images, &caps, config.margin)?;
            let value = tape.value(loss).item()?;
            let grads = tape.backward(loss, &model.params)?;
            drop(tape);
            adam_step(&mut model.params, &grads, &mut state, adam)?;
            loss_curve.push((step, value));
            losses.push(value);
            step += 1;
        }
        if losses.is_empty() {
            break 'epochs;
        }
        let val_rsum = match val {
            Some(v) => Some(evaluate(&model, v, config.val_folds)?.rsum()),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            lr: adam.lr,
            steps: losses.len(),
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_rsum,
        };
        on_epoch(&record);
        history.push(record);
        if let Some(r) = val_rsum {
            if best.as_ref().is_none_or(|(b, _, _)| r > *b) {
                best = Some((r, epoch, model.params.clone()));
            }
        }
    }

    let last_epoch = history.last().map_or(0, |h| h.epoch);
    let (best_model, best_epoch) = match best {
        Some((_, epoch, params)) => (
            Model {
                config: model.config.clone(),
                params,
            },
            epoch,
        ),
        None => (model.clone(), last_epoch),
    };
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        last: model,
        history,
        loss_curve,
    })
}

/// Convenience wrapper: train then evaluate on `test`.
pub fn train_and_evaluate(
    model_config: ModelConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    folds: usize,
) -> Result<(TrainOutcome, EvalReport)> {
    let outcome = train(Model::new(model_config)?, train_set, None, config, |_| {})?;
    let report = evaluate(&outcome.best, test_set, folds)?;
    Ok((outcome, report))
}

/// Analytic gradients of the batch ranking loss.
pub fn loss_gradients(
    model: &Model,
    images: &[&Tensor],
    captions: &[&[u32]],
    margin: f64,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let loss = model.batch_loss(&mut tape, images, captions, margin)?;
    let value = tape.value(loss).item()?;
    Ok((value, tape.backward(loss, &model.params)?))
}

/// Central-difference gradients of the same loss, from forward passes only.
pub fn numeric_loss_gradients(
    model: &Model,
    images: &[&Tensor],
    captions: &[&[u32]],
    margin: f64,
    epsilon: f64,
) -> Result<BTreeMap<String, Tensor>> {
    let f = |p: &ParamStore| -> Result<f64> {
        let probe = Model {
            config: model.config.clone(),
            params: p.clone(),
        };
        let mut tape = Tape::no_grad();
        let loss = probe.batch_loss(&mut tape, images, captions, margin)?;
        tape.value(loss).item()
    };
    finite_diff_grad(f, &model.params, epsilon)
}

const CKPT_TAG: &str = "tshsr-checkpoint";
const CKPT_BLOB: &str = "params.bin";

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".into()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok().filter(|&d| d > 0)).collect()
}

/// Writes the model configuration and every parameter into directory `path`.
/// Values are stored as little-endian `f64` so a reload is exact.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut doc = KvDoc::new();
    doc.push("format", CKPT_TAG);
    doc.push("version", "1");
    model.config.write_kv(&mut doc, "model.");
    doc.push("params", model.params.len().to_string());
    let mut blob = Vec::with_capacity(model.params.num_scalars() * 8);
    let mut offset = 0usize;
    for (name, value) in model.params.iter() {
        doc.push(format!("param.{name}"), format!("{} {offset}", shape_str(value.shape())));
        for x in value.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        offset += value.numel();
    }
    doc.push(format!("{CKPT_BLOB}.bytes"), blob.len().to_string());
    doc.push(format!("{CKPT_BLOB}.crc32"), format!("{:08x}", crc32fast::hash(&blob)));
    fs::create_dir_all(path)?;
    fs::write(path.join(CKPT_BLOB), &blob)?;
    fs::write(path.join(crate::data::MANIFEST), doc.to_string())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path.join(crate::data::MANIFEST))?;
    let doc = KvDoc::parse(&text).map_err(|e| Error::load("manifest", e.to_string()))?;
    if doc.require("format")? != CKPT_TAG {
        return Err(Error::load("format", format!("expected `{CKPT_TAG}`")));
    }
    let mut config = ModelConfig::default();
    for key in MODEL_KEYS {
        let full = format!("model.{key}");
        let value = doc.require(&full)?;
        config
            .set(key, value)
            .map_err(|e| Error::load(&full, e.to_string()))?;
    }
    let count: usize = doc.require_parsed("params")?;
    let bytes: u64 = doc.require_parsed(&format!("{CKPT_BLOB}.bytes"))?;
    let crc_key = format!("{CKPT_BLOB}.crc32");
    let crc = u32::from_str_radix(doc.require(&crc_key)?, 16)
        .map_err(|_| Error::load(&crc_key, "not a hexadecimal checksum"))?;
    let blob_path = path.join(CKPT_BLOB);
    if fs::metadata(&blob_path)?.len() != bytes || bytes % 8 != 0 {
        return Err(Error::load(CKPT_BLOB, "blob size disagrees with the manifest"));
    }
    let blob = fs::read(&blob_path)?;
    if crc32fast::hash(&blob) != crc {
        return Err(Error::load(CKPT_BLOB, "checksum mismatch"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut params = ParamStore::new();
    for (key, value) in doc.iter() {
        let Some(name) = key.strip_prefix("param.") else { continue };
        let (shape, offset) = value
            .split_once(' ')
            .and_then(|(s, o)| Some((parse_shape(s)?, o.parse::<usize>().ok()?)))
            .ok_or_else(|| Error::load(key, format!("malformed entry `{value}`")))?;
        let numel: usize = shape.iter().product();
        let end = offset
            .checked_add(numel)
            .filter(|&e| e <= values.len())
            .ok_or_else(|| Error::load(key, "extends past the end of the blob"))?;
        let t = Tensor::new(shape, values[offset..end].to_vec()).map_err(|e| Error::load(key, e.to_string()))?;
        params.insert(name, t).map_err(|e| Error::load(key, e.to_string()))?;
    }
    if params.len() != count {
        return Err(Error::load("params", format!("{count} declared, {} found", params.len())));
    }
    Model::with_params(config, params).map_err(|e| Error::load("params", e.to_string()))
}
