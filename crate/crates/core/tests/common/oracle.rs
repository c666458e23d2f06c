//! Scalar reference of the full forward pass: nested loops over plain
//! `Vec<f64>` rows, reading weights straight from the parameter store.
//! Shares no code with the tape.

use tshsr::{ModelConfig, ParamStore, StreamMode, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| (0..c).map(|j| t.at(i, j)).collect()).collect()
}

fn param(p: &ParamStore, name: &str) -> Mat {
    mat(p.get(name).unwrap())
}

fn vecp(p: &ParamStore, name: &str) -> Vec<f64> {
    p.get(name).unwrap().data().to_vec()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x · W` for a row vector.
fn row_times(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (k, xk) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xk * w[k][j];
        }
    }
    out
}

fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    a.iter().map(|row| row_times(row, b)).collect()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn project(p: &ParamStore, raw: &Mat) -> Mat {
    let w = param(p, "img.weight");
    let b = vecp(p, "img.bias");
    raw.iter()
        .map(|r| row_times(r, &w).iter().zip(&b).map(|(x, y)| x + y).collect())
        .collect()
}

fn gru(p: &ParamStore, dir: &str, xs: &[Vec<f64>]) -> Mat {
    let g = |part: &str| param(p, &format!("txt.{dir}.{part}"));
    let b = |part: &str| vecp(p, &format!("txt.{dir}.{part}"));
    let (wz, wr, wh) = (g("w_z"), g("w_r"), g("w_h"));
    let (uz, ur, uh) = (g("u_z"), g("u_r"), g("u_h"));
    let (bz, br, bh) = (b("b_z"), b("b_r"), b("b_h"));
    let d = bz.len();
    let mut h = vec![0.0; d];
    let mut out = Vec::new();
    for x in xs {
        let mut next = vec![0.0; d];
        let mut z = vec![0.0; d];
        let mut r = vec![0.0; d];
        for k in 0..d {
            let mut az = bz[k];
            let mut ar = br[k];
            for e in 0..x.len() {
                az += x[e] * wz[e][k];
                ar += x[e] * wr[e][k];
            }
            for e in 0..d {
                az += h[e] * uz[e][k];
                ar += h[e] * ur[e][k];
            }
            z[k] = sigmoid(az);
            r[k] = sigmoid(ar);
        }
        for k in 0..d {
            let mut ah = bh[k];
            for e in 0..x.len() {
                ah += x[e] * wh[e][k];
            }
            for e in 0..d {
                ah += r[e] * h[e] * uh[e][k];
            }
            next[k] = (1.0 - z[k]) * h[k] + z[k] * ah.tanh();
        }
        h = next;
        out.push(h.clone());
    }
    out
}

pub fn encode_text(p: &ParamStore, tokens: &[u32]) -> Mat {
    let emb = param(p, "txt.embed");
    let xs: Mat = tokens.iter().map(|&t| emb[t as usize].clone()).collect();
    let fwd = gru(p, "fwd", &xs);
    let rev: Mat = xs.iter().rev().cloned().collect();
    let mut bwd = gru(p, "bwd", &rev);
    bwd.reverse();
    fwd.iter()
        .zip(&bwd)
        .map(|(f, b)| f.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect())
        .collect()
}

/// Mean over rows of `x_i ⊙ mean(x)`.
pub fn global(x: &Mat) -> Vec<f64> {
    let n = x.len() as f64;
    let d = x[0].len();
    let q: Vec<f64> = (0..d).map(|k| x.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    (0..d)
        .map(|k| x.iter().map(|r| r[k] * q[k]).sum::<f64>() / n)
        .collect()
}

/// `W |x − y|² / ‖x − y‖` with `W` stored `[m×d]`; zero vector when the
/// distance vanishes.
pub fn sim(w: &Mat, x: &[f64], y: &[f64]) -> Vec<f64> {
    let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let dist = norm(&diff);
    if dist < 1e-12 {
        return vec![0.0; w.len()];
    }
    w.iter()
        .map(|row| row.iter().zip(&diff).map(|(wk, dk)| wk * dk * dk).sum::<f64>() / dist)
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Region-to-word weights `a[i][j]`: clamped cosine, l2-normalised over
/// words for each region, softmax over regions for each word.
pub fn attention_i2t(v: &Mat, t: &Mat, lambda: f64) -> Mat {
    let (k, l) = (v.len(), t.len());
    let mut c = vec![vec![0.0; l]; k];
    for i in 0..k {
        for j in 0..l {
            c[i][j] = cosine(&v[i], &t[j]).max(0.0);
        }
        let n = norm(&c[i]);
        if n > 0.0 {
            for j in 0..l {
                c[i][j] /= n;
            }
        }
    }
    let mut a = vec![vec![0.0; l]; k];
    for j in 0..l {
        let mx = (0..k).map(|i| lambda * c[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k).map(|i| (lambda * c[i][j] - mx).exp()).sum();
        for i in 0..k {
            a[i][j] = (lambda * c[i][j] - mx).exp() / z;
        }
    }
    a
}

/// Region-to-word weights `a[i][j]`: clamped cosine, l2-normalised over
/// regions for each word, softmax over words for each region.
pub fn attention_t2i(v: &Mat, t: &Mat, lambda: f64) -> Mat {
    let (k, l) = (v.len(), t.len());
    let mut c = vec![vec![0.0; l]; k];
    for i in 0..k {
        for j in 0..l {
            c[i][j] = cosine(&v[i], &t[j]).max(0.0);
        }
    }
    for j in 0..l {
        let n = (0..k).map(|i| c[i][j] * c[i][j]).sum::<f64>().sqrt();
        if n > 0.0 {
            for i in 0..k {
                c[i][j] /= n;
            }
        }
    }
    let mut a = vec![vec![0.0; l]; k];
    for i in 0..k {
        let mx = (0..l).map(|j| lambda * c[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..l).map(|j| (lambda * c[i][j] - mx).exp()).sum();
        for j in 0..l {
            a[i][j] = (lambda * c[i][j] - mx).exp() / z;
        }
    }
    a
}

fn conv3x3_same(x: &Mat, kernel: &[f64], bias: f64) -> Mat {
    let n = x.len();
    let w = x[0].len();
    let mut out = vec![vec![bias; w]; n];
    for i in 0..n as isize {
        for j in 0..w as isize {
            for di in -1..=1isize {
                for dj in -1..=1isize {
                    let (a, b) = (i + di, j + dj);
                    if a >= 0 && b >= 0 && (a as usize) < n && (b as usize) < w {
                        out[i as usize][j as usize] += kernel[((di + 1) * 3 + dj + 1) as usize] * x[a as usize][b as usize];
                    }
                }
            }
        }
    }
    out
}

/// Reasoning over the node rows `s` (global node last); returns the final
/// global node.
pub fn reason(p: &ParamStore, cfg: &ModelConfig, mut s: Mat) -> Vec<f64> {
    for l in 0..cfg.layers {
        let g = |part: &str| param(p, &format!("hsr.{l}.{part}"));
        let (wp, wq, wr, wg) = (g("w_p"), g("w_q"), g("w_r"), g("w_g"));
        let kernel = vecp(p, &format!("hsr.{l}.gate_kernel"));
        let bias = vecp(p, &format!("hsr.{l}.gate_bias"))[0];
        let n = s.len();
        let ps = mat_mul(&s, &wp);
        let qs = mat_mul(&s, &wq);
        let mut r = vec![vec![0.0; n]; n];
        for a in 0..n {
            for b in 0..n {
                r[a][b] = ps[a].iter().zip(&qs[b]).map(|(x, y)| x * y).sum();
            }
        }
        if cfg.hierarchical {
            let ctx = conv3x3_same(&r, &kernel, bias);
            for a in 0..n {
                for b in 0..n {
                    r[a][b] *= sigmoid(ctx[a][b]);
                }
            }
        }
        if cfg.row_softmax {
            for row in r.iter_mut() {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp() / z;
                }
            }
        }
        let rs = mat_mul(&r, &s);
        let upd = mat_mul(&mat_mul(&rs, &wg), &wr);
        for a in 0..n {
            for k in 0..s[a].len() {
                s[a][k] += upd[a][k];
            }
        }
    }
    s.last().unwrap().clone()
}

/// Score of one image (raw region rows) against one caption.
pub fn score(p: &ParamStore, cfg: &ModelConfig, raw: &Mat, tokens: &[u32]) -> f64 {
    let names = if cfg.share_sim_weights {
        ["sim.shared"; 3]
    } else {
        ["sim.global", "sim.i2t", "sim.t2i"]
    };
    let v = project(p, raw);
    let t = encode_text(p, tokens);
    let s_g = sim(&param(p, names[0]), &global(&v), &global(&t));
    let (k, l, d) = (v.len(), t.len(), v[0].len());

    let mut fused = vec![0.0; s_g.len()];
    if cfg.stream != StreamMode::T2iOnly {
        let a = attention_i2t(&v, &t, cfg.lambda);
        let w = param(p, names[1]);
        let mut nodes = Vec::with_capacity(l + 1);
        for j in 0..l {
            let attended: Vec<f64> = (0..d).map(|c| (0..k).map(|i| a[i][j] * v[i][c]).sum()).collect();
            nodes.push(sim(&w, &attended, &t[j]));
        }
        nodes.push(s_g.clone());
        let g = if cfg.layers == 0 { s_g.clone() } else { reason(p, cfg, nodes) };
        for (f, x) in fused.iter_mut().zip(&g) {
            *f += x;
        }
    }
    if cfg.stream != StreamMode::I2tOnly {
        let a = attention_t2i(&v, &t, cfg.lambda);
        let w = param(p, names[2]);
        let mut nodes = Vec::with_capacity(k + 1);
        for i in 0..k {
            let attended: Vec<f64> = (0..d).map(|c| (0..l).map(|j| a[i][j] * t[j][c]).sum()).collect();
            nodes.push(sim(&w, &v[i], &attended));
        }
        nodes.push(s_g.clone());
        let n = nodes.len() as f64;
        for c in 0..fused.len() {
            fused[c] += nodes.iter().map(|r| r[c]).sum::<f64>() / n;
        }
    }
    let w = vecp(p, "head.weight");
    let b = vecp(p, "head.bias")[0];
    w.iter().zip(&fused).map(|(x, y)| x * y).sum::<f64>() + b
}

/// Bidirectional hardest-negative hinge loss, summed over queries.
pub fn ranking_loss(s: &Mat, margin: f64) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for k in 0..b {
        let neg_t = (0..b).filter(|&q| q != k).map(|q| s[k][q]).fold(f64::NEG_INFINITY, f64::max);
        let neg_v = (0..b).filter(|&q| q != k).map(|q| s[q][k]).fold(f64::NEG_INFINITY, f64::max);
        total += (margin - s[k][k] + neg_t).max(0.0);
        total += (margin - s[k][k] + neg_v).max(0.0);
    }
    total
}
