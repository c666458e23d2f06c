//! Run configuration shared by the command-line tool: model, training,
//! synthetic-data and path settings in one `key: value` document.
//!
//! Keys are grouped by prefix: `model.*` (see [`ModelConfig`]), `train.*`
//! (see [`TrainConfig`]), `synth.*` (see [`SyntheticSpec`]) and a handful of
//! unprefixed run keys (`dataset`, `val_dataset`, `checkpoint`, `out`,
//! `out_csv`, `loss_csv`, `folds`).

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::kv::{parse_num, KvDoc};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub dataset: Option<PathBuf>,
    pub val_dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_csv: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    pub folds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SyntheticSpec::default(),
            dataset: None,
            val_dataset: None,
            checkpoint: None,
            out: None,
            out_csv: None,
            loss_csv: None,
            folds: 1,
        }
    }
}

fn opt_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    /// Applies one setting. Unknown keys are a config error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if let Some(k) = key.strip_prefix("model.") {
            if self.model.set(k, value)? {
                return Ok(());
            }
        } else if let Some(k) = key.strip_prefix("train.") {
            let t = &mut self.train;
            match k {
                "batch_size" => t.batch_size = parse_num(key, value)?,
                "epochs" => t.epochs = parse_num(key, value)?,
                "lr" => t.lr = parse_num(key, value)?,
                "lr_decay" => t.lr_decay = parse_num(key, value)?,
                "decay_epoch" => t.decay_epoch = opt_num(key, value)?,
                "margin" => t.margin = parse_num(key, value)?,
                "seed" => t.seed = parse_num(key, value)?,
                "max_steps" => t.max_steps = opt_num(key, value)?,
                "beta1" => t.beta1 = parse_num(key, value)?,
                "beta2" => t.beta2 = parse_num(key, value)?,
                "eps" => t.eps = parse_num(key, value)?,
                "val_folds" => t.val_folds = parse_num(key, value)?,
                _ => return Err(unknown(key)),
            }
            return Ok(());
        } else if let Some(k) = key.strip_prefix("synth.") {
            let s = &mut self.synth;
            match k {
                "pairs" => s.n_pairs = parse_num(key, value)?,
                "k" => s.k = parse_num(key, value)?,
                "d_raw" => s.d_raw = parse_num(key, value)?,
                "len" => s.len = parse_num(key, value)?,
                "vocab_size" => s.vocab_size = parse_num(key, value)?,
                "seed" => s.seed = parse_num(key, value)?,
                "signal_strength" => s.signal_strength = parse_num(key, value)?,
                "captions_per_image" => s.captions_per_image = parse_num(key, value)?,
                "region_scale" => s.region_scale = parse_num(key, value)?,
                _ => return Err(unknown(key)),
            }
            return Ok(());
        } else {
            match key {
                "dataset" => self.dataset = opt_path(value),
                "val_dataset" => self.val_dataset = opt_path(value),
                "checkpoint" => self.checkpoint = opt_path(value),
                "out" => self.out = opt_path(value),
                "out_csv" => self.out_csv = opt_path(value),
                "loss_csv" => self.loss_csv = opt_path(value),
                "folds" => self.folds = parse_num(key, value)?,
                _ => return Err(unknown(key)),
            }
            return Ok(());
        }
        Err(unknown(key))
    }

    /// Applies every entry of `doc` in order.
    pub fn merge(&mut self, doc: &KvDoc) -> Result<()> {
        for (k, v) in doc.iter() {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        cfg.merge(&KvDoc::parse(&text)?)?;
        Ok(cfg)
    }

    /// Every setting, in a form [`RunConfig::merge`] reads back unchanged.
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        self.model.write_kv(&mut doc, "model.");
        let t = &self.train;
        doc.push("train.batch_size", t.batch_size.to_string());
        doc.push("train.epochs", t.epochs.to_string());
        doc.push("train.lr", format!("{:?}", t.lr));
        doc.push("train.lr_decay", format!("{:?}", t.lr_decay));
        doc.push("train.decay_epoch", show_opt(&t.decay_epoch));
        doc.push("train.margin", format!("{:?}", t.margin));
        doc.push("train.seed", t.seed.to_string());
        doc.push("train.max_steps", show_opt(&t.max_steps));
        doc.push("train.beta1", format!("{:?}", t.beta1));
        doc.push("train.beta2", format!("{:?}", t.beta2));
        doc.push("train.eps", format!("{:?}", t.eps));
        doc.push("train.val_folds", t.val_folds.to_string());
        let s = &self.synth;
        doc.push("synth.pairs", s.n_pairs.to_string());
        doc.push("synth.k", s.k.to_string());
        doc.push("synth.d_raw", s.d_raw.to_string());
        doc.push("synth.len", s.len.to_string());
        doc.push("synth.vocab_size", s.vocab_size.to_string());
        doc.push("synth.seed", s.seed.to_string());
        doc.push("synth.signal_strength", format!("{:?}", s.signal_strength));
        doc.push("synth.captions_per_image", s.captions_per_image.to_string());
        doc.push("synth.region_scale", format!("{:?}", s.region_scale));
        doc.push("dataset", show_path(&self.dataset));
        doc.push("val_dataset", show_path(&self.val_dataset));
        doc.push("checkpoint", show_path(&self.checkpoint));
        doc.push("out", show_path(&self.out));
        doc.push("out_csv", show_path(&self.out_csv));
        doc.push("loss_csv", show_path(&self.loss_csv));
        doc.push("folds", self.folds.to_string());
        doc
    }
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown configuration key `{key}`"))
}
