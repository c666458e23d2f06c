//! Raw slice kernels shared by the forward and backward passes.

/// `a[r×s] · b[s×c]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], r: usize, s: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        for k in 0..s {
            let aik = a[i * s + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * c..(k + 1) * c];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub(crate) fn conv3x3(input: &[f64], h: usize, w: usize, kernel: &[f64], bias: f64) -> Vec<f64> {
    let mut out = vec![bias; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for u in 0..3 {
                let Some(ii) = (i + u).checked_sub(1).filter(|&ii| ii < h) else { continue };
                for v in 0..3 {
                    let Some(jj) = (j + v).checked_sub(1).filter(|&jj| jj < w) else { continue };
                    acc += kernel[u * 3 + v] * input[ii * w + jj];
                }
            }
            out[i * w + j] += acc;
        }
    }
    out
}

/// Returns `(d input, d kernel, d bias)`.
pub(crate) fn conv3x3_backward(
    input: &[f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, f64) {
    let mut gi = vec![0.0; h * w];
    let mut gk = vec![0.0; 9];
    let mut gb = 0.0;
    for i in 0..h {
        for j in 0..w {
            let g = grad[i * w + j];
            gb += g;
            for u in 0..3 {
                let Some(ii) = (i + u).checked_sub(1).filter(|&ii| ii < h) else { continue };
                for v in 0..3 {
                    let Some(jj) = (j + v).checked_sub(1).filter(|&jj| jj < w) else { continue };
                    gi[ii * w + jj] += kernel[u * 3 + v] * g;
                    gk[u * 3 + v] += input[ii * w + jj] * g;
                }
            }
        }
    }
    (gi, gk, gb)
}
