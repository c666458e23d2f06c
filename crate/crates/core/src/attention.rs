//! Vector-valued similarity and bidirectional cross attention.

use crate::encoders::{global_feature, ImageLocalFeatures, TextLocalFeatures};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Distances below this are treated as zero and give the zero similarity.
pub const ZERO_DISTANCE: f64 = 1e-12;

/// Norms below this count as zero when normalising cosines.
const ZERO_NORM: f64 = 1e-300;

pub const SIM_GLOBAL: &str = "sim.global";
pub const SIM_I2T: &str = "sim.i2t";
pub const SIM_T2I: &str = "sim.t2i";
pub const SIM_SHARED: &str = "sim.shared";

/// Which parameter each of the three similarity uses reads from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimWeights {
    pub global: &'static str,
    pub i2t: &'static str,
    pub t2i: &'static str,
}

impl SimWeights {
    pub const SEPARATE: SimWeights = SimWeights {
        global: SIM_GLOBAL,
        i2t: SIM_I2T,
        t2i: SIM_T2I,
    };
    pub const SHARED: SimWeights = SimWeights {
        global: SIM_SHARED,
        i2t: SIM_SHARED,
        t2i: SIM_SHARED,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Regions attend to each word; weights normalised over regions.
    I2t,
    /// Words attend to each region; weights normalised over words.
    T2i,
}

/// Attention weights laid out `[K×L]` (regions × words) for both directions.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub weights: Var,
    pub direction: Direction,
}

/// An `m`-dimensional similarity vector.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityVector {
    pub s: Var,
}

/// `W·|x−y|² / ‖x−y‖₂` for a pair of `[d]` vectors and `W: [m×d]`.
pub fn sim_vec(tape: &mut Tape, x: Var, y: Var, w: Var) -> Result<SimilarityVector> {
    let d = match tape.shape(x) {
        &[d] => d,
        other => return Err(Error::Dimension(format!("sim_vec expects vectors, got {other:?}"))),
    };
    if tape.shape(y) != [d] {
        return Err(Error::Dimension(format!(
            "sim_vec operands differ: {:?} vs {:?}",
            tape.shape(x),
            tape.shape(y)
        )));
    }
    let xr = tape.reshape(x, vec![1, d])?;
    let yr = tape.reshape(y, vec![1, d])?;
    let rows = sim_vec_rows(tape, xr, yr, w)?;
    let s = tape.row(rows, 0)?;
    Ok(SimilarityVector { s })
}

/// Row-wise [`sim_vec`]: `[n×d]` and `[n×d]` to `[n×m]`. Rows whose distance
/// is below [`ZERO_DISTANCE`] come out as exact zeros.
pub fn sim_vec_rows(tape: &mut Tape, x: Var, y: Var, w: Var) -> Result<Var> {
    let (n, d) = tape.value(x).dims2()?;
    if tape.shape(y) != [n, d] {
        return Err(Error::Dimension(format!(
            "sim_vec operands differ: {:?} vs {:?}",
            tape.shape(x),
            tape.shape(y)
        )));
    }
    let (_, wd) = tape.value(w).dims2()?;
    if wd != d {
        return Err(Error::Dimension(format!(
            "similarity weight is {:?} but features have {d} columns",
            tape.shape(w)
        )));
    }
    let diff = tape.sub(x, y)?;
    let sq = tape.square(diff);
    let wt = tape.transpose(w)?;
    let num = tape.matmul(sq, wt)?;
    let dist = tape.l2norm(diff, Some(1))?;

    let guarded: Vec<bool> = tape.value(dist).data().iter().map(|&v| v < ZERO_DISTANCE).collect();
    let num_t = tape.transpose(num)?;
    let scaled = if guarded.iter().any(|&g| g) {
        let bump = Tensor::vector(guarded.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect())?;
        let safe = tape.add_const(dist, &bump)?;
        let mask = tape.constant(Tensor::vector(
            guarded.iter().map(|&g| if g { 0.0 } else { 1.0 }).collect(),
        )?);
        let q = tape.div(num_t, safe)?;
        tape.mul(q, mask)?
    } else {
        tape.div(num_t, dist)?
    };
    tape.transpose(scaled)
}

/// Replaces (near-)zero entries of a norm vector by one so dividing by it
/// leaves the corresponding all-zero rows at zero.
fn safe_norm(tape: &mut Tape, norm: Var) -> Result<Var> {
    let bump: Vec<f64> = tape
        .value(norm)
        .data()
        .iter()
        .map(|&v| if v < ZERO_NORM { 1.0 } else { 0.0 })
        .collect();
    if bump.iter().all(|&b| b == 0.0) {
        return Ok(norm);
    }
    tape.add_const(norm, &Tensor::vector(bump)?)
}

/// Divides row `i` of `a` by `v[i]`.
fn div_rows(tape: &mut Tape, a: Var, v: Var) -> Result<Var> {
    let at = tape.transpose(a)?;
    let q = tape.div(at, v)?;
    tape.transpose(q)
}

/// `cos(v_i, t_j)` as a `[K×L]` matrix; zero vectors give cosine 0.
pub fn cosine_matrix(tape: &mut Tape, v: Var, t: Var) -> Result<Var> {
    let (_, dv) = tape.value(v).dims2()?;
    let (_, dt) = tape.value(t).dims2()?;
    if dv != dt {
        return Err(Error::Dimension(format!(
            "region features {:?} and word features {:?} differ in width",
            tape.shape(v),
            tape.shape(t)
        )));
    }
    let nv = tape.l2norm(v, Some(1))?;
    let nv = safe_norm(tape, nv)?;
    let nt = tape.l2norm(t, Some(1))?;
    let nt = safe_norm(tape, nt)?;
    let tt = tape.transpose(t)?;
    let dots = tape.matmul(v, tt)?;
    let by_word = tape.div(dots, nt)?;
    div_rows(tape, by_word, nv)
}

/// Temperature-scaled cross attention between regions `v: [K×d]` and words
/// `t: [L×d]`.
///
/// Clamped cosines are l2-normalised over words and soft-maxed over regions
/// for [`Direction::I2t`], and the other way round for [`Direction::T2i`].
pub fn cross_attention(
    tape: &mut Tape,
    v: Var,
    t: Var,
    lambda: f64,
    direction: Direction,
) -> Result<AttentionWeights> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {lambda}")));
    }
    let cos = cosine_matrix(tape, v, t)?;
    let clamped = tape.relu(cos);
    let weights = match direction {
        Direction::I2t => {
            let norm = tape.l2norm(clamped, Some(1))?;
            let norm = safe_norm(tape, norm)?;
            let normed = div_rows(tape, clamped, norm)?;
            let logits = tape.scale(normed, lambda);
            tape.softmax_cols(logits)?
        }
        Direction::T2i => {
            let norm = tape.l2norm(clamped, Some(0))?;
            let norm = safe_norm(tape, norm)?;
            let normed = tape.div(clamped, norm)?;
            let logits = tape.scale(normed, lambda);
            tape.softmax_rows(logits)?
        }
    };
    Ok(AttentionWeights { weights, direction })
}

/// `I2t`: attended visual feature per word, `[L×d]`.
/// `T2i`: attended textual feature per region, `[K×d]`.
pub fn attended_features(tape: &mut Tape, weights: &AttentionWeights, v: Var, t: Var) -> Result<Var> {
    let (k, l) = tape.value(weights.weights).dims2()?;
    let (kv, _) = tape.value(v).dims2()?;
    let (lt, _) = tape.value(t).dims2()?;
    if k != kv || l != lt {
        return Err(Error::Dimension(format!(
            "attention weights {:?} do not match {kv} regions and {lt} words",
            tape.shape(weights.weights)
        )));
    }
    match weights.direction {
        Direction::I2t => {
            let wt = tape.transpose(weights.weights)?;
            tape.matmul(wt, v)
        }
        Direction::T2i => tape.matmul(weights.weights, t),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LocalSimilarities {
    /// Global similarity `[m]`.
    pub s_g: SimilarityVector,
    /// One row per word, `[L×m]`.
    pub s_i2t: Option<Var>,
    /// One row per region, `[K×m]`.
    pub s_t2i: Option<Var>,
}

/// Features needed by [`local_similarities`] for one image and one caption.
#[derive(Clone, Copy, Debug)]
pub struct PairFeatures {
    pub image: ImageLocalFeatures,
    pub image_global: Var,
    pub text: TextLocalFeatures,
    pub text_global: Var,
}

impl PairFeatures {
    pub fn new(tape: &mut Tape, image: ImageLocalFeatures, text: TextLocalFeatures) -> Result<Self> {
        let image_global = global_feature(tape, image.v)?.vec;
        let text_global = global_feature(tape, text.t)?.vec;
        Ok(PairFeatures {
            image,
            image_global,
            text,
            text_global,
        })
    }
}

/// Global, image-to-text and text-to-image similarities for one pair.
/// Streams that are not requested are skipped.
pub fn local_similarities(
    tape: &mut Tape,
    params: &ParamStore,
    pair: &PairFeatures,
    lambda: f64,
    names: SimWeights,
    want_i2t: bool,
    want_t2i: bool,
) -> Result<LocalSimilarities> {
    let (v, t) = (pair.image.v, pair.text.t);
    let wg = tape.param(params, names.global)?;
    let s_g = sim_vec(tape, pair.image_global, pair.text_global, wg)?;

    let s_i2t = if want_i2t {
        let w = tape.param(params, names.i2t)?;
        let att = cross_attention(tape, v, t, lambda, Direction::I2t)?;
        let attended = attended_features(tape, &att, v, t)?;
        Some(sim_vec_rows(tape, attended, t, w)?)
    } else {
        None
    };
    let s_t2i = if want_t2i {
        let w = tape.param(params, names.t2i)?;
        let att = cross_attention(tape, v, t, lambda, Direction::T2i)?;
        let attended = attended_features(tape, &att, v, t)?;
        Some(sim_vec_rows(tape, v, attended, w)?)
    } else {
        None
    };
    Ok(LocalSimilarities { s_g, s_i2t, s_t2i })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn sim_of(x: &[f64], y: &[f64], w: &Tensor) -> Vec<f64> {
        let mut t = Tape::no_grad();
        let xv = t.constant(Tensor::vector(x.to_vec()).unwrap());
        let yv = t.constant(Tensor::vector(y.to_vec()).unwrap());
        let wv = t.constant(w.clone());
        let s = sim_vec(&mut t, xv, yv, wv).unwrap();
        t.value(s.s).data().to_vec()
    }

    #[test]
    fn sim_vec_examples() {
        let w = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        assert_eq!(sim_of(&[1.0, 0.0], &[0.0, 0.0], &w), vec![1.0]);
        assert_eq!(sim_of(&[0.3, -0.7], &[0.3, -0.7], &w), vec![0.0]);
    }

    #[test]
    fn sim_vec_is_symmetric_and_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let w = rand_matrix(&mut rng, 4, 6);
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = sim_of(&x, &y, &w);
            assert_eq!(a, sim_of(&y, &x, &w));
            let c = rng.gen_range(0.1..5.0);
            let cx: Vec<f64> = x.iter().map(|v| c * v).collect();
            let cy: Vec<f64> = y.iter().map(|v| c * v).collect();
            for (s, base) in sim_of(&cx, &cy, &w).iter().zip(&a) {
                assert!((s - c * base).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sim_vec_shape_errors() {
        let mut t = Tape::no_grad();
        let x = t.constant(Tensor::zeros(&[3]).unwrap());
        let y = t.constant(Tensor::zeros(&[4]).unwrap());
        let w = t.constant(Tensor::zeros(&[2, 3]).unwrap());
        assert!(sim_vec(&mut t, x, y, w).is_err());
        let w4 = t.constant(Tensor::zeros(&[2, 4]).unwrap());
        assert!(sim_vec(&mut t, y, y, w).is_err());
        assert!(sim_vec(&mut t, y, y, w4).is_ok());
    }

    fn weights_of(v: &Tensor, t: &Tensor, lambda: f64, dir: Direction) -> Tensor {
        let mut tape = Tape::no_grad();
        let (vv, tv) = (tape.constant(v.clone()), tape.constant(t.clone()));
        let a = cross_attention(&mut tape, vv, tv, lambda, dir).unwrap();
        tape.value(a.weights).clone()
    }

    #[test]
    fn single_region_gets_all_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let v = rand_matrix(&mut rng, 1, 5);
        let t = rand_matrix(&mut rng, 4, 5);
        let w = weights_of(&v, &t, 9.0, Direction::I2t);
        assert_eq!(w.data(), &[1.0; 4]);
    }

    #[test]
    fn orthogonal_features_give_uniform_weights() {
        let v = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0], vec![1.0, 1.0, 0.0, 0.0]]).unwrap();
        let t = Tensor::from_rows(&[vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, -3.0]]).unwrap();
        let w = weights_of(&v, &t, 9.0, Direction::I2t);
        assert!(w.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let w = weights_of(&v, &t, 9.0, Direction::T2i);
        assert!(w.data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn zero_vectors_have_zero_cosine() {
        let v = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let t = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let mut tape = Tape::no_grad();
        let (vv, tv) = (tape.constant(v), tape.constant(t));
        let c = cosine_matrix(&mut tape, vv, tv).unwrap();
        assert_eq!(tape.value(c).at(0, 0), 0.0);
        assert!((tape.value(c).at(1, 0) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_positive_temperature() {
        let v = Tensor::ones(&[2, 2]).unwrap();
        let mut tape = Tape::no_grad();
        let vv = tape.constant(v);
        assert!(matches!(
            cross_attention(&mut tape, vv, vv, 0.0, Direction::I2t),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attended_features_select_and_average() {
        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 9.0]]).unwrap();
        let t = Tensor::from_rows(&[vec![-1.0, 0.5], vec![2.0, 2.0]]).unwrap();
        let mut tape = Tape::no_grad();
        let (vv, tv) = (tape.constant(v.clone()), tape.constant(t.clone()));

        // one-hot over regions: word 0 → region 2, word 1 → region 0
        let onehot = tape.constant(
            Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap(),
        );
        let a = AttentionWeights { weights: onehot, direction: Direction::I2t };
        let out = attended_features(&mut tape, &a, vv, tv).unwrap();
        assert_eq!(tape.value(out).row(0), v.row(2));
        assert_eq!(tape.value(out).row(1), v.row(0));

        let uniform = tape.constant(Tensor::full(&[3, 2], 0.5).unwrap());
        let b = AttentionWeights { weights: uniform, direction: Direction::T2i };
        let out = attended_features(&mut tape, &b, vv, tv).unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(out).row(i), &[0.5, 1.25]);
        }

        let wrong = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let c = AttentionWeights { weights: wrong, direction: Direction::I2t };
        assert!(attended_features(&mut tape, &c, vv, tv).is_err());
    }

    /// Eqs. for both attention directions written as plain loops.
    fn loop_attention(v: &Tensor, t: &Tensor, lambda: f64, dir: Direction) -> Vec<Vec<f64>> {
        let (k, d) = v.dims2().unwrap();
        let l = t.dims2().unwrap().0;
        let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut c = vec![vec![0.0; l]; k];
        for i in 0..k {
            for j in 0..l {
                let dot: f64 = (0..d).map(|q| v.at(i, q) * t.at(j, q)).sum();
                c[i][j] = (dot / (norm(v.row(i)) * norm(t.row(j)))).max(0.0);
            }
        }
        let mut w = vec![vec![0.0; l]; k];
        match dir {
            Direction::I2t => {
                let mut cbar = c.clone();
                for i in 0..k {
                    let n = c[i].iter().map(|x| x * x).sum::<f64>().sqrt();
                    for j in 0..l {
                        cbar[i][j] = c[i][j] / n;
                    }
                }
                for j in 0..l {
                    let z: f64 = (0..k).map(|i| (lambda * cbar[i][j]).exp()).sum();
                    for i in 0..k {
                        w[i][j] = (lambda * cbar[i][j]).exp() / z;
                    }
                }
            }
            Direction::T2i => {
                let mut cbar = c.clone();
                for j in 0..l {
                    let n = (0..k).map(|i| c[i][j] * c[i][j]).sum::<f64>().sqrt();
                    for i in 0..k {
                        cbar[i][j] = c[i][j] / n;
                    }
                }
                for i in 0..k {
                    let z: f64 = (0..l).map(|j| (lambda * cbar[i][j]).exp()).sum();
                    for j in 0..l {
                        w[i][j] = (lambda * cbar[i][j]).exp() / z;
                    }
                }
            }
        }
        w
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        // positive features keep every clamped cosine away from zero norms
        let v = rand_matrix(&mut rng, 3, 5).map(|x| x.abs() + 0.05);
        let t = rand_matrix(&mut rng, 4, 5).map(|x| x.abs() + 0.05);
        for dir in [Direction::I2t, Direction::T2i] {
            let got = weights_of(&v, &t, 9.0, dir);
            let expect = loop_attention(&v, &t, 9.0, dir);
            for i in 0..3 {
                for j in 0..4 {
                    assert!((got.at(i, j) - expect[i][j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_distance_rows_for_collapsed_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = Tensor::from_rows(&[row.clone()]).unwrap();
        let t = Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let mut p = ParamStore::new();
        for name in [SIM_GLOBAL, SIM_I2T, SIM_T2I] {
            p.insert(name, rand_matrix(&mut rng, 3, 4)).unwrap();
        }
        let mut tape = Tape::no_grad();
        let image = ImageLocalFeatures { v: tape.constant(v), regions: 1, dim: 4 };
        let text = TextLocalFeatures { t: tape.constant(t), len: 3, dim: 4 };
        let pair = PairFeatures::new(&mut tape, image, text).unwrap();
        let out = local_similarities(&mut tape, &p, &pair, 9.0, SimWeights::SEPARATE, true, true).unwrap();
        assert!(tape.value(out.s_i2t.unwrap()).data().iter().all(|&x| x == 0.0));
        assert_eq!(tape.shape(out.s_i2t.unwrap()), &[3, 3]);
        assert_eq!(tape.shape(out.s_t2i.unwrap()), &[1, 3]);
        assert_eq!(tape.shape(out.s_g.s), &[3]);
    }
}
