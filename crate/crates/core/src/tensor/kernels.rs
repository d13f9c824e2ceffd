use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulates performed by forward matrix products on this thread
/// since the last reset.
pub fn mac_count() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset_mac_count() {
    MACS.with(|m| m.set(0));
}

/// Runs `f` and returns its result with the forward matmul MACs it performed.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = mac_count();
    let out = f();
    (out, mac_count() - before)
}

fn record(macs: usize) {
    MACS.with(|m| m.set(m.get() + macs as u64));
}

/// `c[m×n] += a[m×k] · b[k×n]`, accumulating each output in k order.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    record(m * k * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `da[m×k] += dc[m×n] · bᵀ`.
pub(crate) fn matmul_grad_lhs(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (j, &g) in dcrow.iter().enumerate() {
            let btrow = &bt[j * k..(j + 1) * k];
            for (dv, &bv) in darow.iter_mut().zip(btrow) {
                *dv += g * bv;
            }
        }
    }
}

/// `db[k×n] += aᵀ · dc[m×n]`.
pub(crate) fn matmul_grad_rhs(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dv, &g) in dbrow.iter_mut().zip(dcrow) {
                *dv += aip * g;
            }
        }
    }
}

pub(crate) const GELU_COEF: f64 = 0.044715;

fn gelu_inner(x: f64) -> f64 {
    (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_COEF * x * x * x)
}

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_inner(x).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = gelu_inner(x).tanh();
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = out_shape.len();
    if data.is_empty() {
        return (out_shape, out);
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        out.push(data[offset]);
        let mut ax = rank;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}
