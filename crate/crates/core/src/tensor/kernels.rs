// Inner loops shared by forward and backward rules. Multiple accumulators let
// the compiler vectorize reductions; the summation order is fixed, so results
// are bit-reproducible.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = w · x` for row-major `w` of shape `rows × x.len()`.
pub fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

/// `out += xᵀ · w` for row-major `w` of shape `x.len() × out.len()`.
pub fn vecmat_acc(x: &[f64], w: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (&xi, row) in x.iter().zip(w.chunks_exact(cols)) {
        if xi != 0.0 {
            axpy(xi, row, out);
        }
    }
}

/// `w += g ⊗ x` (outer product accumulate).
pub fn outer_acc(g: &[f64], x: &[f64], w: &mut [f64]) {
    let cols = x.len();
    for (&gi, row) in g.iter().zip(w.chunks_exact_mut(cols)) {
        if gi != 0.0 {
            axpy(gi, x, row);
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
