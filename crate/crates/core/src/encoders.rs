//! Region projection, bidirectional GRU text encoder and mean-gated global
//! features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub const IMG_WEIGHT: &str = "img.weight";
pub const IMG_BIAS: &str = "img.bias";
pub const WORD_EMBED: &str = "txt.embed";

/// Projected region features `V`, one row per region.
#[derive(Clone, Copy, Debug)]
pub struct ImageLocalFeatures {
    pub v: Var,
    pub regions: usize,
    pub dim: usize,
}

/// Word features `T`, one row per token.
#[derive(Clone, Copy, Debug)]
pub struct TextLocalFeatures {
    pub t: Var,
    pub len: usize,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GlobalFeature {
    pub vec: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GruDirection {
    Forward,
    Backward,
}

impl GruDirection {
    fn prefix(self) -> &'static str {
        match self {
            GruDirection::Forward => "txt.fwd",
            GruDirection::Backward => "txt.bwd",
        }
    }
}

const GRU_INPUT: [&str; 3] = ["w_z", "w_r", "w_h"];
const GRU_RECURRENT: [&str; 3] = ["u_z", "u_r", "u_h"];
const GRU_BIAS: [&str; 3] = ["b_z", "b_r", "b_h"];

/// Name of one GRU tensor, e.g. `gru_param(Forward, "u_r")` is `txt.fwd.u_r`.
pub fn gru_param(dir: GruDirection, part: &str) -> String {
    format!("{}.{part}", dir.prefix())
}

/// Adds every encoder parameter to `params`.
pub fn init_params<R: Rng>(
    params: &mut ParamStore,
    rng: &mut R,
    raw_dim: usize,
    embed_dim: usize,
    dim: usize,
    vocab_size: usize,
) -> Result<()> {
    params.insert_uniform(IMG_WEIGHT, &[raw_dim, dim], raw_dim, rng)?;
    params.insert_zeros(IMG_BIAS, &[dim])?;
    params.insert_uniform(WORD_EMBED, &[vocab_size, embed_dim], embed_dim, rng)?;
    for dir in [GruDirection::Forward, GruDirection::Backward] {
        for part in GRU_INPUT {
            params.insert_uniform(&gru_param(dir, part), &[embed_dim, dim], embed_dim, rng)?;
        }
        for part in GRU_RECURRENT {
            params.insert_uniform(&gru_param(dir, part), &[dim, dim], dim, rng)?;
        }
        for part in GRU_BIAS {
            params.insert_zeros(&gru_param(dir, part), &[dim])?;
        }
    }
    Ok(())
}

/// `V = raw · W_img + b_img`.
pub fn project_image(tape: &mut Tape, params: &ParamStore, raw: &Tensor) -> Result<ImageLocalFeatures> {
    let (regions, raw_dim) = raw.dims2()?;
    let w = tape.param(params, IMG_WEIGHT)?;
    let (expected, dim) = tape.value(w).dims2()?;
    if raw_dim != expected {
        return Err(Error::Dimension(format!(
            "region features have {raw_dim} columns, the projection expects {expected}"
        )));
    }
    let b = tape.param(params, IMG_BIAS)?;
    let x = tape.constant(raw.clone());
    let xw = tape.matmul(x, w)?;
    let v = tape.add(xw, b)?;
    Ok(ImageLocalFeatures { v, regions, dim })
}

struct GruCell {
    input: [Var; 3],
    recurrent: [Var; 3],
    bias: [Var; 3],
}

impl GruCell {
    fn bind(tape: &mut Tape, params: &ParamStore, dir: GruDirection) -> Result<Self> {
        let mut bind = |parts: [&str; 3]| -> Result<[Var; 3]> {
            Ok([
                tape.param(params, &gru_param(dir, parts[0]))?,
                tape.param(params, &gru_param(dir, parts[1]))?,
                tape.param(params, &gru_param(dir, parts[2]))?,
            ])
        };
        Ok(GruCell {
            input: bind(GRU_INPUT)?,
            recurrent: bind(GRU_RECURRENT)?,
            bias: bind(GRU_BIAS)?,
        })
    }

    /// Hidden states `[1×d]` for the rows of `x` visited in `order`.
    /// Returned in visiting order.
    fn run(&self, tape: &mut Tape, x: Var, order: &[usize], dim: usize) -> Result<Vec<Var>> {
        // input projections for all tokens at once, biases folded in
        let mut proj = [x; 3];
        for g in 0..3 {
            let xw = tape.matmul(x, self.input[g])?;
            proj[g] = tape.add(xw, self.bias[g])?;
        }
        let mut h = tape.constant(Tensor::zeros(&[1, dim])?);
        let mut states = Vec::with_capacity(order.len());
        for &j in order {
            let xz = tape.rows(proj[0], j, 1)?;
            let xr = tape.rows(proj[1], j, 1)?;
            let xh = tape.rows(proj[2], j, 1)?;

            let hz = tape.matmul(h, self.recurrent[0])?;
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z);

            let hr = tape.matmul(h, self.recurrent[1])?;
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r);

            let rh = tape.mul(r, h)?;
            let rhu = tape.matmul(rh, self.recurrent[2])?;
            let cand = tape.add(xh, rhu)?;
            let cand = tape.tanh(cand);

            // h' = (1 - z) ⊙ h + z ⊙ candidate
            let keep = tape.one_minus(z)?;
            let kept = tape.mul(keep, h)?;
            let fresh = tape.mul(z, cand)?;
            h = tape.add(kept, fresh)?;
            states.push(h);
        }
        Ok(states)
    }
}

/// Embeds tokens and runs a bidirectional GRU; `t_j` is the average of the
/// two directions' hidden states at position `j`.
pub fn encode_text(
    tape: &mut Tape,
    params: &ParamStore,
    tokens: &[u32],
    max_len: usize,
) -> Result<TextLocalFeatures> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > max_len {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds the maximum length {max_len}",
            tokens.len()
        )));
    }
    let table = tape.param(params, WORD_EMBED)?;
    let vocab = tape.shape(table)[0];
    if let Some(bad) = tokens.iter().find(|&&id| id as usize >= vocab) {
        return Err(Error::Input(format!(
            "token id {bad} is outside the vocabulary of {vocab}"
        )));
    }
    let ids: Vec<usize> = tokens.iter().map(|&id| id as usize).collect();
    let x = tape.gather_rows(table, &ids)?;

    let fwd = GruCell::bind(tape, params, GruDirection::Forward)?;
    let bwd = GruCell::bind(tape, params, GruDirection::Backward)?;
    let dim = tape.shape(fwd.recurrent[0])[0];
    let len = tokens.len();

    let forward_order: Vec<usize> = (0..len).collect();
    let backward_order: Vec<usize> = (0..len).rev().collect();
    let hf = fwd.run(tape, x, &forward_order, dim)?;
    let mut hb = bwd.run(tape, x, &backward_order, dim)?;
    hb.reverse();

    let hf = tape.concat_rows(&hf)?;
    let hb = tape.concat_rows(&hb)?;
    let sum = tape.add(hf, hb)?;
    let t = tape.scale(sum, 0.5);
    Ok(TextLocalFeatures { t, len, dim })
}

/// Mean-gated global feature: each row is multiplied elementwise by the
/// column mean, then the gated rows are averaged into one vector.
pub fn global_feature(tape: &mut Tape, x: Var) -> Result<GlobalFeature> {
    tape.value(x).dims2()?;
    let q = tape.mean(x, Some(0))?;
    let gated = tape.mul(x, q)?;
    let vec = tape.mean(gated, Some(0))?;
    Ok(GlobalFeature { vec })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, GradCheckReport, DEFAULT_EPSILON};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tiny_params(seed: u64, raw: usize, embed: usize, dim: usize, vocab: usize) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        init_params(&mut p, &mut rng, raw, embed, dim, vocab).unwrap();
        // non-zero biases so the bias paths are exercised
        for name in p.names().map(String::from).collect::<Vec<_>>() {
            if name.contains(".b_") || name == IMG_BIAS {
                let n = p.get(&name).unwrap().numel();
                let v = Tensor::vector((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
                p.set(&name, v).unwrap();
            }
        }
        p
    }

    #[test]
    fn identity_projection_and_linearity() {
        let mut p = ParamStore::new();
        p.insert(IMG_WEIGHT, Tensor::identity(3).unwrap()).unwrap();
        p.insert(IMG_BIAS, Tensor::zeros(&[3]).unwrap()).unwrap();
        let raw = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 0.0, 4.0]]).unwrap();
        let mut t = Tape::no_grad();
        let v = project_image(&mut t, &p, &raw).unwrap();
        assert_eq!(t.value(v.v).data(), raw.data());

        let zeros = Tensor::zeros(&[2, 3]).unwrap();
        let v = project_image(&mut t, &p, &zeros).unwrap();
        assert!(t.value(v.v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn projection_matches_loop_and_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let raw = rand_matrix(&mut rng, 4, 8);
        let w = rand_matrix(&mut rng, 8, 6);
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut p = ParamStore::new();
        p.insert(IMG_WEIGHT, w.clone()).unwrap();
        p.insert(IMG_BIAS, Tensor::vector(b.clone()).unwrap()).unwrap();
        let mut t = Tape::no_grad();
        let v = project_image(&mut t, &p, &raw).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let mut e = b[j];
                for k in 0..8 {
                    e += raw.at(i, k) * w.at(k, j);
                }
                assert!((t.value(v.v).at(i, j) - e).abs() < 1e-12);
            }
        }

        p.set(IMG_BIAS, Tensor::zeros(&[6]).unwrap()).unwrap();
        let base = project_image(&mut t, &p, &raw).unwrap();
        let scaled = project_image(&mut t, &p, &raw.map(|x| -2.5 * x)).unwrap();
        let expect = t.value(base.v).map(|x| -2.5 * x);
        assert!(t.value(scaled.v).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn projection_rejects_wrong_raw_dim() {
        let p = tiny_params(0, 5, 4, 3, 10);
        let mut t = Tape::no_grad();
        let err = project_image(&mut t, &p, &Tensor::zeros(&[2, 4]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn text_input_validation() {
        let p = tiny_params(0, 5, 4, 3, 10);
        let mut t = Tape::no_grad();
        assert!(matches!(encode_text(&mut t, &p, &[], 8), Err(Error::Input(_))));
        assert!(matches!(encode_text(&mut t, &p, &[1, 10], 8), Err(Error::Input(_))));
        assert!(matches!(encode_text(&mut t, &p, &[1; 9], 8), Err(Error::Input(_))));
    }

    #[test]
    fn single_token_sees_same_step_both_ways() {
        let mut p = tiny_params(1, 5, 4, 3, 10);
        // identical weights in both directions → identical states → t_1 = h
        for part in GRU_INPUT.iter().chain(&GRU_RECURRENT).chain(&GRU_BIAS) {
            let f = p.get(&gru_param(GruDirection::Forward, part)).unwrap().clone();
            p.set(&gru_param(GruDirection::Backward, part), f).unwrap();
        }
        let mut t = Tape::no_grad();
        let out = encode_text(&mut t, &p, &[7], 8).unwrap();
        assert_eq!(t.shape(out.t), &[1, 3]);

        let mut fwd_only = Tape::no_grad();
        let x = fwd_only.param(&p, WORD_EMBED).unwrap();
        let x = fwd_only.gather_rows(x, &[7]).unwrap();
        let cell = GruCell::bind(&mut fwd_only, &p, GruDirection::Forward).unwrap();
        let h = cell.run(&mut fwd_only, x, &[0], 3).unwrap()[0];
        assert!(t.value(out.t).max_abs_diff(fwd_only.value(h)) < 1e-15);
    }

    #[test]
    fn saturated_update_gate_yields_candidate() {
        let mut p = tiny_params(2, 5, 4, 3, 10);
        for dir in [GruDirection::Forward, GruDirection::Backward] {
            p.set(&gru_param(dir, "b_z"), Tensor::full(&[3], 40.0).unwrap()).unwrap();
        }
        let mut t = Tape::no_grad();
        let out = encode_text(&mut t, &p, &[3], 8).unwrap();
        // from h0 = 0 the candidate is tanh(x W_h + b_h) in each direction
        let emb = p.get(WORD_EMBED).unwrap().row(3).to_vec();
        for j in 0..3 {
            let mut avg = 0.0;
            for dir in [GruDirection::Forward, GruDirection::Backward] {
                let w = p.get(&gru_param(dir, "w_h")).unwrap();
                let b = p.get(&gru_param(dir, "b_h")).unwrap();
                let pre: f64 = (0..4).map(|k| emb[k] * w.at(k, j)).sum::<f64>() + b.data()[j];
                avg += 0.5 * pre.tanh();
            }
            assert!((t.value(out.t).at(0, j) - avg).abs() < 1e-12);
        }
    }

    /// Step-by-step scalar GRU over plain vectors.
    fn scalar_gru(p: &ParamStore, dir: GruDirection, xs: &[Vec<f64>], dim: usize) -> Vec<Vec<f64>> {
        let get = |part: &str| p.get(&gru_param(dir, part)).unwrap().clone();
        let (wz, wr, wh) = (get("w_z"), get("w_r"), get("w_h"));
        let (uz, ur, uh) = (get("u_z"), get("u_r"), get("u_h"));
        let (bz, br, bh) = (get("b_z"), get("b_r"), get("b_h"));
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut h = vec![0.0; dim];
        let mut out = Vec::new();
        for x in xs {
            let mut z = vec![0.0; dim];
            let mut r = vec![0.0; dim];
            for j in 0..dim {
                let mut az = bz.data()[j];
                let mut ar = br.data()[j];
                for (k, xk) in x.iter().enumerate() {
                    az += xk * wz.at(k, j);
                    ar += xk * wr.at(k, j);
                }
                for k in 0..dim {
                    az += h[k] * uz.at(k, j);
                    ar += h[k] * ur.at(k, j);
                }
                z[j] = sig(az);
                r[j] = sig(ar);
            }
            let mut next = vec![0.0; dim];
            for j in 0..dim {
                let mut a = bh.data()[j];
                for (k, xk) in x.iter().enumerate() {
                    a += xk * wh.at(k, j);
                }
                for k in 0..dim {
                    a += r[k] * h[k] * uh.at(k, j);
                }
                next[j] = (1.0 - z[j]) * h[j] + z[j] * a.tanh();
            }
            h = next;
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn matches_scalar_gru_reference() {
        let p = tiny_params(3, 5, 4, 3, 10);
        let tokens = [2u32, 9, 4];
        let emb = p.get(WORD_EMBED).unwrap();
        let xs: Vec<Vec<f64>> = tokens.iter().map(|&id| emb.row(id as usize).to_vec()).collect();
        let hf = scalar_gru(&p, GruDirection::Forward, &xs, 3);
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let mut hb = scalar_gru(&p, GruDirection::Backward, &rev, 3);
        hb.reverse();

        let mut t = Tape::no_grad();
        let out = encode_text(&mut t, &p, &tokens, 8).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                let e = 0.5 * (hf[j][k] + hb[j][k]);
                assert!((t.value(out.t).at(j, k) - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reversal_with_swapped_directions_reverses_rows() {
        let p = tiny_params(4, 5, 4, 3, 10);
        let mut swapped = p.clone();
        for part in GRU_INPUT.iter().chain(&GRU_RECURRENT).chain(&GRU_BIAS) {
            let f = p.get(&gru_param(GruDirection::Forward, part)).unwrap().clone();
            let b = p.get(&gru_param(GruDirection::Backward, part)).unwrap().clone();
            swapped.set(&gru_param(GruDirection::Forward, part), b).unwrap();
            swapped.set(&gru_param(GruDirection::Backward, part), f).unwrap();
        }
        let tokens = [1u32, 5, 5, 8];
        let rev: Vec<u32> = tokens.iter().rev().copied().collect();
        let mut t = Tape::no_grad();
        let a = encode_text(&mut t, &p, &tokens, 8).unwrap();
        let b = encode_text(&mut t, &swapped, &rev, 8).unwrap();
        for j in 0..4 {
            let ra = t.value(a.t).row(j).to_vec();
            let rb = t.value(b.t).row(3 - j).to_vec();
            for (x, y) in ra.iter().zip(&rb) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn global_feature_examples() {
        let mut t = Tape::no_grad();
        let ones = t.constant(Tensor::ones(&[3, 4]).unwrap());
        let g = global_feature(&mut t, ones).unwrap();
        assert_eq!(t.value(g.vec).data(), &[1.0; 4]);

        let x = t.constant(Tensor::matrix(1, 3, vec![2.0, -1.0, 0.5]).unwrap());
        let g = global_feature(&mut t, x).unwrap();
        assert_eq!(t.value(g.vec).data(), &[4.0, 1.0, 0.25]);
        assert_eq!(t.shape(g.vec), &[3]);
    }

    #[test]
    fn global_feature_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_matrix(&mut rng, 4, 6);
        let mut q = [0.0; 6];
        for i in 0..4 {
            for j in 0..6 {
                q[j] += x.at(i, j) / 4.0;
            }
        }
        let mut expect = [0.0; 6];
        for i in 0..4 {
            for j in 0..6 {
                expect[j] += x.at(i, j) * q[j] / 4.0;
            }
        }
        let mut t = Tape::no_grad();
        let vx = t.constant(x);
        let g = global_feature(&mut t, vx).unwrap();
        for j in 0..6 {
            assert!((t.value(g.vec).data()[j] - expect[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_stack_passes_gradient_check() {
        let p = tiny_params(5, 5, 4, 3, 10);
        let raw = rand_matrix(&mut ChaCha8Rng::seed_from_u64(12), 3, 5);
        let tokens = [4u32, 0, 7];
        let build = |t: &mut Tape, p: &ParamStore| -> Result<Var> {
            let img = project_image(t, p, &raw)?;
            let txt = encode_text(t, p, &tokens, 8)?;
            let gi = global_feature(t, img.v)?;
            let gt = global_feature(t, txt.t)?;
            let prod = t.mul(gi.vec, gt.vec)?;
            let a = t.sum(prod, None)?;
            let sq = t.square(txt.t);
            let b = t.sum(sq, None)?;
            t.add(a, b)
        };
        let mut tape = Tape::new();
        let loss = build(&mut tape, &p).unwrap();
        let analytic = tape.backward(loss, &p).unwrap();
        let numeric = finite_diff_grad(
            |p| {
                let mut t = Tape::no_grad();
                let l = build(&mut t, p)?;
                t.value(l).item()
            },
            &p,
            DEFAULT_EPSILON,
        )
        .unwrap();
        let report = GradCheckReport::compare(&analytic, &numeric, 1e-4).unwrap();
        assert!(report.passed(), "{:?}", report.entries);
    }
}
