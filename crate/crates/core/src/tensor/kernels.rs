use super::Tensor;

/// `a (r x k) * b (k x c)`
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k, c) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; r * c];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for (p, &aik) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor {
        shape: [r, c],
        data: out,
    }
}

/// `a (r x k) * b^T` where `b` is `c x k`.
pub(crate) fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k, c) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; r * c];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..r {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..c {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * c + j] = dot(arow, brow);
        }
    }
    Tensor {
        shape: [r, c],
        data: out,
    }
}

/// `a^T * b` where `a` is `r x k` and `b` is `r x c`.
pub(crate) fn matmul_at_b(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k, c) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; k * c];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..r {
        let brow = &bd[i * c..(i + 1) * c];
        for (p, &aip) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor {
        shape: [k, c],
        data: out,
    }
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor {
        shape: [c, r],
        data: out,
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorise without reassociation.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// Numerically stable log-sum-exp of a slice.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax written into `out`.
pub(crate) fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}
