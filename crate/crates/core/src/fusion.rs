//! Text-to-image pooling, two-stream fusion, the scalar head and the
//! bidirectional hardest-negative ranking loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hsr::{SimilarityNodeSet, Stream};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StreamMode {
    #[default]
    Both,
    I2tOnly,
    T2iOnly,
}

impl StreamMode {
    pub fn uses_i2t(self) -> bool {
        self != StreamMode::T2iOnly
    }

    pub fn uses_t2i(self) -> bool {
        self != StreamMode::I2tOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StreamMode::Both => "both",
            StreamMode::I2tOnly => "i2t",
            StreamMode::T2iOnly => "t2i",
        }
    }
}

impl std::str::FromStr for StreamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(StreamMode::Both),
            "i2t" | "i2t_only" | "i2t-only" => Ok(StreamMode::I2tOnly),
            "t2i" | "t2i_only" | "t2i-only" => Ok(StreamMode::T2iOnly),
            other => Err(Error::Config(format!(
                "unknown stream mode `{other}` (expected both, i2t or t2i)"
            ))),
        }
    }
}

impl std::fmt::Display for StreamMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A scored pair: the fused representation and its scalar score.
#[derive(Clone, Copy, Debug)]
pub struct PairScore {
    pub score: Var,
    pub s_star: Var,
}

/// Mean over every node (local and global) of a text-to-image node set.
pub fn pool_t2i(tape: &mut Tape, nodes: &SimilarityNodeSet) -> Result<Var> {
    if nodes.stream != Stream::T2i {
        return Err(Error::Contract("pool_t2i needs a text-to-image node set".into()));
    }
    tape.mean(nodes.nodes, Some(0))
}

/// Combines the two stream representations. Single-stream modes return one
/// input untouched.
pub fn fuse(tape: &mut Tape, s_i2t: Var, s_t2i: Var, mode: StreamMode) -> Result<Var> {
    match mode {
        StreamMode::Both => tape.add(s_i2t, s_t2i),
        StreamMode::I2tOnly => Ok(s_i2t),
        StreamMode::T2iOnly => Ok(s_t2i),
    }
}

pub fn init_head<R: Rng>(params: &mut ParamStore, rng: &mut R, m: usize) -> Result<()> {
    params.insert_uniform(HEAD_WEIGHT, &[m], m, rng)?;
    params.insert(HEAD_BIAS, Tensor::scalar(0.0))
}

/// `w_headᵀ·s + b_head`.
pub fn score(tape: &mut Tape, params: &ParamStore, s_star: Var) -> Result<Var> {
    let w = tape.param(params, HEAD_WEIGHT)?;
    let b = tape.param(params, HEAD_BIAS)?;
    if tape.shape(w) != tape.shape(s_star) {
        return Err(Error::Dimension(format!(
            "head weight {:?} does not match fused vector {:?}",
            tape.shape(w),
            tape.shape(s_star)
        )));
    }
    let prod = tape.mul(w, s_star)?;
    let dot = tape.sum(prod, None)?;
    tape.add(dot, b)
}

/// Score grid for a mini-batch: `scores[p][q]` is image `p` against text
/// `q`, matched pairs on the diagonal.
#[derive(Clone, Debug)]
pub struct LossBatch {
    pub scores: Tensor,
    pub margin: f64,
}

/// The loss value together with its (sub)gradient with respect to every
/// entry of the score grid.
#[derive(Clone, Debug)]
pub struct RankingLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Index of the largest entry among `candidates` excluding `skip`; ties go
/// to the lowest index.
fn hardest(candidates: impl Iterator<Item = (usize, f64)>, skip: usize) -> (usize, f64) {
    candidates
        .filter(|&(i, _)| i != skip)
        .fold((usize::MAX, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
}

impl LossBatch {
    pub fn new(scores: Tensor, margin: f64) -> Result<Self> {
        let (r, c) = scores.dims2()?;
        if r != c {
            return Err(Error::Dimension(format!("score grid must be square, got {r}x{c}")));
        }
        if r < 2 {
            return Err(Error::Config("the ranking loss needs a batch of at least 2".into()));
        }
        if !(margin >= 0.0) {
            return Err(Error::Config(format!("margin must be non-negative, got {margin}")));
        }
        Ok(LossBatch { scores, margin })
    }

    pub fn size(&self) -> usize {
        self.scores.shape()[0]
    }

    /// Summed hinge loss over the batch with the hardest negative text and
    /// image for each matched pair.
    pub fn evaluate(&self) -> RankingLoss {
        let b = self.size();
        let s = &self.scores;
        let mut value = 0.0;
        let mut grad = vec![0.0; b * b];
        for k in 0..b {
            let pos = s.at(k, k);
            let (tq, tneg) = hardest((0..b).map(|q| (q, s.at(k, q))), k);
            let (vp, vneg) = hardest((0..b).map(|p| (p, s.at(p, k))), k);
            let hinge_t = self.margin - pos + tneg;
            if hinge_t > 0.0 {
                value += hinge_t;
                grad[k * b + k] -= 1.0;
                grad[k * b + tq] += 1.0;
            }
            let hinge_v = self.margin - pos + vneg;
            if hinge_v > 0.0 {
                value += hinge_v;
                grad[k * b + k] -= 1.0;
                grad[vp * b + k] += 1.0;
            }
        }
        RankingLoss { value, grad }
    }
}

pub fn bidirectional_ranking_loss(batch: &LossBatch) -> f64 {
    batch.evaluate().value
}

/// The ranking loss as a node on the tape over a `[B×B]` score grid.
pub fn ranking_loss(tape: &mut Tape, grid: Var, margin: f64) -> Result<Var> {
    let batch = LossBatch::new(tape.value(grid).clone(), margin)?;
    let RankingLoss { value, grad } = batch.evaluate();
    tape.linearized(grid, value, grad)
}
