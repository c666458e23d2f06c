//! The full two-stream matcher: configuration, parameters and forward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{local_similarities, PairFeatures, SimWeights, SIM_GLOBAL, SIM_I2T, SIM_SHARED, SIM_T2I};
use crate::encoders::{self, ImageLocalFeatures, TextLocalFeatures};
use crate::error::{Error, Result};
pub use crate::fusion::StreamMode;
use crate::fusion::{self, PairScore};
use crate::hsr::{self, HsrLayer, ReasonOptions, SimilarityNodeSet, Stream};
use crate::kv::KvDoc;
use crate::numerics::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Width of the raw region features.
    pub raw_dim: usize,
    /// Word embedding width.
    pub embed_dim: usize,
    /// Joint feature width `d`.
    pub dim: usize,
    /// Similarity vector width `m`.
    pub sim_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Attention temperature.
    pub lambda: f64,
    /// Number of reasoning layers; 0 reads out the initial global node.
    pub layers: usize,
    pub hierarchical: bool,
    pub row_softmax: bool,
    pub stream: StreamMode,
    /// One similarity matrix for the global and both local similarities.
    pub share_sim_weights: bool,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            raw_dim: 2048,
            embed_dim: 300,
            dim: 1024,
            sim_dim: 256,
            vocab_size: 10_000,
            max_len: 64,
            lambda: 9.0,
            layers: 3,
            hierarchical: true,
            row_softmax: false,
            stream: StreamMode::Both,
            share_sim_weights: false,
            seed: 0,
        }
    }
}

pub(crate) const MODEL_KEYS: [&str; 13] = [
    "raw_dim",
    "embed_dim",
    "dim",
    "sim_dim",
    "vocab_size",
    "max_len",
    "lambda",
    "layers",
    "hierarchical",
    "row_softmax",
    "stream",
    "share_sim_weights",
    "seed",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("raw_dim", self.raw_dim),
            ("embed_dim", self.embed_dim),
            ("dim", self.dim),
            ("sim_dim", self.sim_dim),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn sim_weights(&self) -> SimWeights {
        if self.share_sim_weights {
            SimWeights::SHARED
        } else {
            SimWeights::SEPARATE
        }
    }

    pub fn reason_options(&self) -> ReasonOptions {
        ReasonOptions {
            hierarchical: self.hierarchical,
            row_softmax: self.row_softmax,
        }
    }

    /// Applies one `key: value` setting; returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::kv::{parse_bool, parse_num};
        match key {
            "raw_dim" => self.raw_dim = parse_num(key, value)?,
            "embed_dim" => self.embed_dim = parse_num(key, value)?,
            "dim" => self.dim = parse_num(key, value)?,
            "sim_dim" => self.sim_dim = parse_num(key, value)?,
            "vocab_size" => self.vocab_size = parse_num(key, value)?,
            "max_len" => self.max_len = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "layers" => self.layers = parse_num(key, value)?,
            "hierarchical" => self.hierarchical = parse_bool(key, value)?,
            "row_softmax" => self.row_softmax = parse_bool(key, value)?,
            "stream" => self.stream = value.parse()?,
            "share_sim_weights" => self.share_sim_weights = parse_bool(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn write_kv(&self, doc: &mut KvDoc, prefix: &str) {
        let mut put = |k: &str, v: String| doc.push(format!("{prefix}{k}"), v);
        put("raw_dim", self.raw_dim.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("dim", self.dim.to_string());
        put("sim_dim", self.sim_dim.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("max_len", self.max_len.to_string());
        put("lambda", format!("{:?}", self.lambda));
        put("layers", self.layers.to_string());
        put("hierarchical", self.hierarchical.to_string());
        put("row_softmax", self.row_softmax.to_string());
        put("stream", self.stream.to_string());
        put("share_sim_weights", self.share_sim_weights.to_string());
        put("seed", self.seed.to_string());
    }
}

/// Encoded image: projected regions plus their global feature.
#[derive(Clone, Debug)]
pub struct ImageEncoding {
    pub local: Tensor,
    pub global: Tensor,
}

#[derive(Clone, Debug)]
pub struct TextEncoding {
    pub local: Tensor,
    pub global: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters: uniform `±1/sqrt(fan_in)` matrices, zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let (d, m) = (config.dim, config.sim_dim);
        encoders::init_params(
            &mut params,
            &mut rng,
            config.raw_dim,
            config.embed_dim,
            d,
            config.vocab_size,
        )?;
        let sim_names: Vec<&str> = if config.share_sim_weights {
            vec![SIM_SHARED]
        } else {
            let mut names = vec![SIM_GLOBAL];
            if config.stream.uses_i2t() {
                names.push(SIM_I2T);
            }
            if config.stream.uses_t2i() {
                names.push(SIM_T2I);
            }
            names
        };
        for name in sim_names {
            params.insert_uniform(name, &[m, d], d, &mut rng)?;
        }
        if config.stream.uses_i2t() {
            for l in 0..config.layers {
                HsrLayer::init_params(&mut params, &mut rng, l, m)?;
            }
        }
        fusion::init_head(&mut params, &mut rng, m)?;
        Ok(Model { config, params })
    }

    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Model::new(config.clone())?;
        for (name, value) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != value.shape() {
                return Err(Error::Dimension(format!(
                    "parameter `{name}` has shape {:?}, the configuration needs {:?}",
                    got.shape(),
                    value.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            let extra = params.names().find(|n| !reference.params.contains(n)).unwrap_or("?");
            return Err(Error::Contract(format!("unexpected parameter `{extra}`")));
        }
        Ok(Model { config, params })
    }

    /// Binds every parameter so later truncation of the tape keeps them.
    pub fn bind_all(&self, tape: &mut Tape) -> Result<()> {
        for name in self.params.names() {
            tape.param(&self.params, name)?;
        }
        Ok(())
    }

    pub fn encode_image(&self, tape: &mut Tape, raw: &Tensor) -> Result<ImageLocalFeatures> {
        encoders::project_image(tape, &self.params, raw)
    }

    pub fn encode_text(&self, tape: &mut Tape, tokens: &[u32]) -> Result<TextLocalFeatures> {
        encoders::encode_text(tape, &self.params, tokens, self.config.max_len)
    }

    /// Fused representation and score for one encoded pair.
    pub fn pair_forward(&self, tape: &mut Tape, pair: &PairFeatures) -> Result<PairScore> {
        let cfg = &self.config;
        let mode = cfg.stream;
        let local = local_similarities(
            tape,
            &self.params,
            pair,
            cfg.lambda,
            cfg.sim_weights(),
            mode.uses_i2t(),
            mode.uses_t2i(),
        )?;
        let s_g = local.s_g.s;

        let i2t = match local.s_i2t {
            Some(rows) if cfg.layers == 0 => {
                let nodes = SimilarityNodeSet::assemble(tape, rows, s_g, Stream::I2t)?;
                let idx = nodes.global_index(tape);
                Some(tape.row(nodes.nodes, idx)?)
            }
            Some(rows) => {
                let nodes = SimilarityNodeSet::assemble(tape, rows, s_g, Stream::I2t)?;
                Some(hsr::reason(tape, &self.params, &nodes, cfg.layers, cfg.reason_options())?.s)
            }
            None => None,
        };
        let t2i = match local.s_t2i {
            Some(rows) => {
                let nodes = SimilarityNodeSet::assemble(tape, rows, s_g, Stream::T2i)?;
                Some(fusion::pool_t2i(tape, &nodes)?)
            }
            None => None,
        };
        let s_star = match (i2t, t2i) {
            (Some(a), Some(b)) => fusion::fuse(tape, a, b, StreamMode::Both)?,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!("every stream mode uses at least one stream"),
        };
        let score = fusion::score(tape, &self.params, s_star)?;
        Ok(PairScore { score, s_star })
    }

    /// Scores every image against every caption of a mini-batch and
    /// returns the `[B×B]` grid node.
    pub fn score_grid(&self, tape: &mut Tape, images: &[&Tensor], captions: &[&[u32]]) -> Result<Var> {
        let imgs = images
            .iter()
            .map(|raw| self.encode_image(tape, raw))
            .collect::<Result<Vec<_>>>()?;
        let txts = captions
            .iter()
            .map(|c| self.encode_text(tape, c))
            .collect::<Result<Vec<_>>>()?;
        let img_globals = imgs
            .iter()
            .map(|i| encoders::global_feature(tape, i.v).map(|g| g.vec))
            .collect::<Result<Vec<_>>>()?;
        let txt_globals = txts
            .iter()
            .map(|t| encoders::global_feature(tape, t.t).map(|g| g.vec))
            .collect::<Result<Vec<_>>>()?;
        let mut cells = Vec::with_capacity(imgs.len() * txts.len());
        for (image, &image_global) in imgs.iter().zip(&img_globals) {
            for (text, &text_global) in txts.iter().zip(&txt_globals) {
                let pair = PairFeatures {
                    image: *image,
                    image_global,
                    text: *text,
                    text_global,
                };
                cells.push(self.pair_forward(tape, &pair)?.score);
            }
        }
        tape.stack(&cells, vec![imgs.len(), txts.len()])
    }

    /// Summed bidirectional ranking loss over a mini-batch of matched pairs.
    pub fn batch_loss(&self, tape: &mut Tape, images: &[&Tensor], captions: &[&[u32]], margin: f64) -> Result<Var> {
        if images.len() != captions.len() {
            return Err(Error::Contract(format!(
                "{} images but {} captions in the batch",
                images.len(),
                captions.len()
            )));
        }
        let grid = self.score_grid(tape, images, captions)?;
        fusion::ranking_loss(tape, grid, margin)
    }

    pub fn precompute_image(&self, raw: &Tensor) -> Result<ImageEncoding> {
        let mut tape = Tape::no_grad();
        let v = self.encode_image(&mut tape, raw)?;
        let g = encoders::global_feature(&mut tape, v.v)?;
        Ok(ImageEncoding {
            local: tape.value(v.v).clone(),
            global: tape.value(g.vec).clone(),
        })
    }

    pub fn precompute_text(&self, tokens: &[u32]) -> Result<TextEncoding> {
        let mut tape = Tape::no_grad();
        let t = self.encode_text(&mut tape, tokens)?;
        let g = encoders::global_feature(&mut tape, t.t)?;
        Ok(TextEncoding {
            local: tape.value(t.t).clone(),
            global: tape.value(g.vec).clone(),
        })
    }

    /// Score of a single image against a single caption.
    pub fn score_pair(&self, raw: &Tensor, tokens: &[u32]) -> Result<f64> {
        let img = self.precompute_image(raw)?;
        let txt = self.precompute_text(tokens)?;
        let mut tape = Tape::no_grad();
        self.score_encoded(&mut tape, &img, &txt)
    }

    fn score_encoded(&self, tape: &mut Tape, img: &ImageEncoding, txt: &TextEncoding) -> Result<f64> {
        let (regions, dim) = img.local.dims2()?;
        let (len, _) = txt.local.dims2()?;
        let pair = PairFeatures {
            image: ImageLocalFeatures {
                v: tape.constant(img.local.clone()),
                regions,
                dim,
            },
            image_global: tape.constant(img.global.clone()),
            text: TextLocalFeatures {
                t: tape.constant(txt.local.clone()),
                len,
                dim,
            },
            text_global: tape.constant(txt.global.clone()),
        };
        let out = self.pair_forward(tape, &pair)?;
        tape.value(out.score).item()
    }

    /// Full `[images × captions]` score matrix. Rows are computed in
    /// parallel; each row is independent, so the result does not depend on
    /// the thread count.
    pub fn score_matrix(&self, images: &[Tensor], captions: &[Vec<u32>]) -> Result<Tensor> {
        if images.is_empty() || captions.is_empty() {
            return Err(Error::Contract("score matrix needs images and captions".into()));
        }
        let imgs = images
            .par_iter()
            .map(|raw| self.precompute_image(raw))
            .collect::<Result<Vec<_>>>()?;
        let txts = captions
            .par_iter()
            .map(|c| self.precompute_text(c))
            .collect::<Result<Vec<_>>>()?;
        let rows = imgs
            .par_iter()
            .map(|img| {
                let mut tape = Tape::no_grad();
                self.bind_all(&mut tape)?;
                let mark = tape.len();
                let mut row = Vec::with_capacity(txts.len());
                for txt in &txts {
                    row.push(self.score_encoded(&mut tape, img, txt)?);
                    tape.truncate(mark);
                }
                Ok(row)
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Tensor::matrix(images.len(), captions.len(), rows.concat())
    }
}
