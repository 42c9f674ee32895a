// Row-major inner loops. Every routine accumulates into `out`.

/// out[p,r] += a[p,q] · b[q,r]
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    if p * q * r < SMALL {
        return naive_gemm(a, b, out, p, q, r);
    }
    debug_assert!(a.len() >= p * q && b.len() >= q * r && out.len() >= p * r);
    // SAFETY: slice lengths cover every strided access.
    unsafe {
        matrixmultiply::dgemm(
            p,
            q,
            r,
            1.0,
            a.as_ptr(),
            q as isize,
            1,
            b.as_ptr(),
            r as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            r as isize,
            1,
        );
    }
}

/// out[p,q] += a[p,r] · b[q,r]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    if p * q * r < SMALL {
        return naive_gemm_nt(a, b, out, p, q, r);
    }
    debug_assert!(a.len() >= p * r && b.len() >= q * r && out.len() >= p * q);
    // SAFETY: as above; bᵀ is read through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            p,
            r,
            q,
            1.0,
            a.as_ptr(),
            r as isize,
            1,
            b.as_ptr(),
            1,
            r as isize,
            1.0,
            out.as_mut_ptr(),
            q as isize,
            1,
        );
    }
}

/// out[q,r] += a[p,q]ᵀ · b[p,r]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    if p * q * r < SMALL {
        return naive_gemm_tn(a, b, out, p, q, r);
    }
    debug_assert!(a.len() >= p * q && b.len() >= p * r && out.len() >= q * r);
    // SAFETY: as above; aᵀ is read through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            q,
            p,
            r,
            1.0,
            a.as_ptr(),
            1,
            q as isize,
            b.as_ptr(),
            r as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            r as isize,
            1,
        );
    }
}

// Below this many multiply-adds the packing cost of the blocked kernel
// outweighs its speed.
const SMALL: usize = 1 << 12;

// out[p,r] += a[p,q] · b[q,r]
fn naive_gemm(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let out_row = &mut out[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * r..(k + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

// out[p,q] += a[p,r] · b[q,r]ᵀ
fn naive_gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let a_row = &a[i * r..(i + 1) * r];
        for k in 0..q {
            let b_row = &b[k * r..(k + 1) * r];
            out[i * q + k] += dot(a_row, b_row);
        }
    }
}

// out[q,r] += a[p,q]ᵀ · b[p,r]
fn naive_gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let b_row = &b[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let out_row = &mut out[k * r..(k + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorise.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Swaps axes `ax1` and `ax2` of a row-major array.
pub(crate) fn transpose(data: &[f64], shape: &[usize], ax1: usize, ax2: usize) -> Vec<f64> {
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax1, ax2);
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(ax1, ax2);

    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = perm_strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // Odometer over all but the last axis.
        let mut axis = last;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            base += perm_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= perm_strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

// Tanh-approximation GELU, using 0.5·(1 + tanh(u)) = sigmoid(2u).
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    x * sigmoid(2.0 * C * (x + 0.044715 * x * x * x))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let s = sigmoid(2.0 * C * (x + 0.044715 * x * x * x));
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    s + 2.0 * x * s * (1.0 - s) * dinner
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
