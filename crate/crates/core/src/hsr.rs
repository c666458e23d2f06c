//! Hierarchical similarity reasoning over a graph of similarity vectors.
//!
//! Nodes are the rows of an `[N×m]` matrix `S`. Each layer builds pairwise
//! affinities `R = (S·W_p)(S·W_q)ᵀ`, gates them with a sigmoid of a 3×3
//! convolution over `R`, and updates `S ← (R′·S·W_g)·W_r + S`. All weights act
//! on node vectors from the right (row-vector convention).

use rand::Rng;

use crate::attention::SimilarityVector;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    I2t,
    T2i,
}

/// Local similarity rows followed by the global similarity as the last row.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityNodeSet {
    pub nodes: Var,
    pub stream: Stream,
}

impl SimilarityNodeSet {
    /// Concatenates `locals: [n×m]` with the global vector `[m]` as row `n`.
    pub fn assemble(tape: &mut Tape, locals: Var, global: Var, stream: Stream) -> Result<Self> {
        let (_, m) = tape.value(locals).dims2()?;
        if tape.shape(global) != [m] {
            return Err(Error::Dimension(format!(
                "global node {:?} does not match local nodes {:?}",
                tape.shape(global),
                tape.shape(locals)
            )));
        }
        let nodes = tape.concat_rows(&[locals, global])?;
        Ok(SimilarityNodeSet { nodes, stream })
    }

    pub fn len(&self, tape: &Tape) -> usize {
        tape.shape(self.nodes)[0]
    }

    /// Index of the global node.
    pub fn global_index(&self, tape: &Tape) -> usize {
        self.len(tape) - 1
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RelationMatrix {
    pub r: Var,
    pub gated: bool,
}

/// The bound parameters of one reasoning layer.
#[derive(Clone, Copy, Debug)]
pub struct HsrLayer {
    pub w_p: Var,
    pub w_q: Var,
    pub w_r: Var,
    pub w_g: Var,
    pub kernel: Var,
    pub bias: Var,
}

pub fn layer_param(layer: usize, part: &str) -> String {
    format!("hsr.{layer}.{part}")
}

const SQUARE_PARTS: [&str; 4] = ["w_p", "w_q", "w_r", "w_g"];

impl HsrLayer {
    pub fn init_params<R: Rng>(params: &mut ParamStore, rng: &mut R, layer: usize, m: usize) -> Result<()> {
        for part in SQUARE_PARTS {
            params.insert_uniform(&layer_param(layer, part), &[m, m], m, rng)?;
        }
        params.insert_uniform(&layer_param(layer, "gate_kernel"), &[3, 3], 9, rng)?;
        params.insert(layer_param(layer, "gate_bias"), Tensor::scalar(0.0))?;
        Ok(())
    }

    pub fn bind(tape: &mut Tape, params: &ParamStore, layer: usize) -> Result<Self> {
        let mut p = |part: &str| tape.param(params, &layer_param(layer, part));
        Ok(HsrLayer {
            w_p: p("w_p")?,
            w_q: p("w_q")?,
            w_r: p("w_r")?,
            w_g: p("w_g")?,
            kernel: p("gate_kernel")?,
            bias: p("gate_bias")?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReasonOptions {
    /// Gate the relation matrix with the convolutional context gate.
    pub hierarchical: bool,
    /// Softmax-normalise each row of the relation matrix before the update.
    pub row_softmax: bool,
}

impl Default for ReasonOptions {
    fn default() -> Self {
        ReasonOptions {
            hierarchical: true,
            row_softmax: false,
        }
    }
}

/// `R_pq = (S_p·W_p)·(S_q·W_q)` for every ordered node pair.
pub fn relation_matrix(tape: &mut Tape, s: &SimilarityNodeSet, layer: &HsrLayer) -> Result<RelationMatrix> {
    let p = tape.matmul(s.nodes, layer.w_p)?;
    let q = tape.matmul(s.nodes, layer.w_q)?;
    let qt = tape.transpose(q)?;
    let r = tape.matmul(p, qt)?;
    Ok(RelationMatrix { r, gated: false })
}

/// `R′ = R ⊙ sigmoid(conv3x3(R))`.
pub fn gate_relations(tape: &mut Tape, r: &RelationMatrix, layer: &HsrLayer) -> Result<RelationMatrix> {
    if r.gated {
        return Err(Error::Contract("relation matrix is already gated".into()));
    }
    let ctx = tape.conv2d_3x3(r.r, layer.kernel, layer.bias)?;
    let gate = tape.sigmoid(ctx);
    let gated = tape.mul(r.r, gate)?;
    Ok(RelationMatrix { r: gated, gated: true })
}

/// One reasoning layer; the output has the input's shape.
pub fn reason_step(
    tape: &mut Tape,
    s: &SimilarityNodeSet,
    layer: &HsrLayer,
    opts: ReasonOptions,
) -> Result<SimilarityNodeSet> {
    let r = relation_matrix(tape, s, layer)?;
    let r = if opts.hierarchical {
        gate_relations(tape, &r, layer)?
    } else {
        r
    };
    let rel = if opts.row_softmax {
        tape.softmax_rows(r.r)?
    } else {
        r.r
    };
    let msg = tape.matmul(rel, s.nodes)?;
    let msg = tape.matmul(msg, layer.w_g)?;
    let upd = tape.matmul(msg, layer.w_r)?;
    let nodes = tape.add(upd, s.nodes)?;
    Ok(SimilarityNodeSet {
        nodes,
        stream: s.stream,
    })
}

/// Runs `layers` reasoning steps, each with its own parameters, and reads
/// out the global node of the last layer.
pub fn reason(
    tape: &mut Tape,
    params: &ParamStore,
    s: &SimilarityNodeSet,
    layers: usize,
    opts: ReasonOptions,
) -> Result<SimilarityVector> {
    if layers < 1 {
        return Err(Error::Config("reasoning needs at least one layer".into()));
    }
    let mut cur = *s;
    for l in 0..layers {
        let layer = HsrLayer::bind(tape, params, l)?;
        cur = reason_step(tape, &cur, &layer, opts)?;
    }
    let idx = cur.global_index(tape);
    Ok(SimilarityVector {
        s: tape.row(cur.nodes, idx)?,
    })
}
