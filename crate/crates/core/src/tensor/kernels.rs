//! Numeric kernels shared by the f32 forward path and the f64 replay path.
//!
//! Every kernel does its per-element math and reductions in f64 and casts
//! back to the element type on the way out, so the f32 path stores 32-bit
//! values while accumulating in 64-bit, and the f64 path is exact.

/// Element type a kernel can run on. Implemented for `f32` and `f64`.
pub trait El: Copy + Send + Sync {
    fn f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl El for f32 {
    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl El for f64 {
    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
}

// ---- linear algebra ----

/// C[m,n] = A[m,k] x B[k,n].
pub fn matmul_nn<T: El>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..k {
            let ait = a[i * k + t].f64();
            let brow = &b[t * n..(t + 1) * n];
            for (av, bv) in acc.iter_mut().zip(brow) {
                *av += ait * bv.f64();
            }
        }
        for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = T::from_f64(*v);
        }
    }
}

/// C[m,n] = A[m,k] x B[n,k]^T. Both operands walk contiguously.
pub fn matmul_nt<T: El>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0f64;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av.f64() * bv.f64();
            }
            out[i * n + j] = T::from_f64(acc);
        }
    }
}

/// C[k,n] = A[m,k]^T x B[m,n].
pub fn matmul_tn<T: El>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let mut acc = vec![0f64; n];
    for t in 0..k {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let ait = a[i * k + t].f64();
            let brow = &b[i * n..(i + 1) * n];
            for (av, bv) in acc.iter_mut().zip(brow) {
                *av += ait * bv.f64();
            }
        }
        for (o, v) in out[t * n..(t + 1) * n].iter_mut().zip(&acc) {
            *o = T::from_f64(*v);
        }
    }
}

pub fn transpose2d<T: El>(x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
}

// ---- elementwise ----

pub fn add<T: El>(a: &[T], b: &[T], out: &mut [T]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = T::from_f64(x.f64() + y.f64());
    }
}

pub fn mul<T: El>(a: &[T], b: &[T], out: &mut [T]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = T::from_f64(x.f64() * y.f64());
    }
}

pub fn scale<T: El>(x: &[T], c: f64, out: &mut [T]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = T::from_f64(v.f64() * c);
    }
}

/// out[r, :] = x[r, :] + b for every leading row.
pub fn add_bias<T: El>(x: &[T], b: &[T], out: &mut [T]) {
    let d = b.len();
    for (orow, xrow) in out.chunks_exact_mut(d).zip(x.chunks_exact(d)) {
        for ((o, xv), bv) in orow.iter_mut().zip(xrow).zip(b) {
            *o = T::from_f64(xv.f64() + bv.f64());
        }
    }
}

pub fn relu<T: El>(x: &[T], out: &mut [T]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = T::from_f64(v.f64().max(0.0));
    }
}

pub fn sigmoid<T: El>(x: &[T], out: &mut [T]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = T::from_f64(sigmoid_f64(v.f64()));
    }
}

#[inline]
pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn tanh<T: El>(x: &[T], out: &mut [T]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = T::from_f64(v.f64().tanh());
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// tanh-approximation gelu.
pub fn gelu<T: El>(x: &[T], out: &mut [T]) {
    for (o, v) in out.iter_mut().zip(x) {
        let x = v.f64();
        let u = GELU_C * (x + GELU_A * x * x * x);
        *o = T::from_f64(0.5 * x * (1.0 + u.tanh()));
    }
}

#[inline]
pub fn gelu_grad_f64(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ---- softmax family ----

/// Softmax along `axis` of a tensor with the given shape, max-subtracted.
pub fn softmax_axis<T: El>(x: &[T], shape: &[usize], axis: usize, out: &mut [T]) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for r in 0..inner {
            let base = o * n * inner + r;
            let mut m = f64::NEG_INFINITY;
            for i in 0..n {
                m = m.max(x[base + i * inner].f64());
            }
            let mut z = 0f64;
            for i in 0..n {
                z += (x[base + i * inner].f64() - m).exp();
            }
            for i in 0..n {
                out[base + i * inner] = T::from_f64((x[base + i * inner].f64() - m).exp() / z);
            }
        }
    }
}

/// Row softmax over the last axis with an optional attendable mask.
/// Masked positions get weight exactly 0; masked entries never enter the
/// max/sum. Rows must have at least one attendable position (checked at op
/// creation).
pub fn softmax_rows_masked<T: El>(x: &[T], n: usize, mask: Option<&[bool]>, out: &mut [T]) {
    let rows = x.len() / n;
    for r in 0..rows {
        let xrow = &x[r * n..(r + 1) * n];
        let orow = &mut out[r * n..(r + 1) * n];
        let mrow = mask.map(|m| &m[r * n..(r + 1) * n]);
        let live = |i: usize| mrow.map_or(true, |m| m[i]);
        let mut m = f64::NEG_INFINITY;
        for i in 0..n {
            if live(i) {
                m = m.max(xrow[i].f64());
            }
        }
        let mut z = 0f64;
        for i in 0..n {
            if live(i) {
                z += (xrow[i].f64() - m).exp();
            }
        }
        for i in 0..n {
            orow[i] = if live(i) {
                T::from_f64((xrow[i].f64() - m).exp() / z)
            } else {
                T::from_f64(0.0)
            };
        }
    }
}

// ---- convolution / pooling ----

/// 3x3 cross-correlation with zero padding 1 and the given stride, plus bias.
/// input [h,w,cin], kernels [3,3,cin,cout], out [oh,ow,cout].
pub fn conv2d<T: El>(
    input: &[T],
    kernels: &[T],
    bias: &[T],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    out: &mut [T],
) {
    let oh = conv_out(h, stride);
    let ow = conv_out(w, stride);
    let mut acc = vec![0f64; cout];
    for yo in 0..oh {
        for xo in 0..ow {
            for (a, b) in acc.iter_mut().zip(bias) {
                *a = b.f64();
            }
            for dy in 0..3 {
                let yi = (yo * stride + dy) as isize - 1;
                if yi < 0 || yi as usize >= h {
                    continue;
                }
                for dx in 0..3 {
                    let xi = (xo * stride + dx) as isize - 1;
                    if xi < 0 || xi as usize >= w {
                        continue;
                    }
                    let ibase = (yi as usize * w + xi as usize) * cin;
                    let kbase = (dy * 3 + dx) * cin * cout;
                    for ci in 0..cin {
                        let v = input[ibase + ci].f64();
                        let krow = &kernels[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (a, kv) in acc.iter_mut().zip(krow) {
                            *a += v * kv.f64();
                        }
                    }
                }
            }
            let obase = (yo * ow + xo) * cout;
            for (o, a) in out[obase..obase + cout].iter_mut().zip(&acc) {
                *o = T::from_f64(*a);
            }
        }
    }
}

/// Spatial output extent of the 3x3 pad-1 convolution.
pub fn conv_out(extent: usize, stride: usize) -> usize {
    (extent + 2 - 3) / stride + 1
}

pub struct ConvGrads {
    pub dinput: Vec<f32>,
    pub dkernels: Vec<f32>,
    pub dbias: Vec<f32>,
}

pub fn conv2d_vjp(
    input: &[f32],
    kernels: &[f32],
    dout: &[f32],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    stride: usize,
) -> ConvGrads {
    let oh = conv_out(h, stride);
    let ow = conv_out(w, stride);
    let mut din = vec![0f64; h * w * cin];
    let mut dk = vec![0f64; 9 * cin * cout];
    let mut db = vec![0f64; cout];
    for yo in 0..oh {
        for xo in 0..ow {
            let obase = (yo * ow + xo) * cout;
            let drow = &dout[obase..obase + cout];
            for (d, g) in db.iter_mut().zip(drow) {
                *d += *g as f64;
            }
            for dy in 0..3 {
                let yi = (yo * stride + dy) as isize - 1;
                if yi < 0 || yi as usize >= h {
                    continue;
                }
                for dx in 0..3 {
                    let xi = (xo * stride + dx) as isize - 1;
                    if xi < 0 || xi as usize >= w {
                        continue;
                    }
                    let ibase = (yi as usize * w + xi as usize) * cin;
                    let kbase = (dy * 3 + dx) * cin * cout;
                    for ci in 0..cin {
                        let v = input[ibase + ci] as f64;
                        let krow = &kernels[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let dkrow = &mut dk[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let mut dv = 0f64;
                        for ((kv, dkv), g) in krow.iter().zip(dkrow.iter_mut()).zip(drow) {
                            let g = *g as f64;
                            dv += *kv as f64 * g;
                            *dkv += v * g;
                        }
                        din[ibase + ci] += dv;
                    }
                }
            }
        }
    }
    ConvGrads {
        dinput: din.into_iter().map(|v| v as f32).collect(),
        dkernels: dk.into_iter().map(|v| v as f32).collect(),
        dbias: db.into_iter().map(|v| v as f32).collect(),
    }
}

/// 2x2 max pooling with stride 2; trailing odd row/column dropped. Returns
/// the flat input index of each window max (first in row-major order on
/// ties) alongside the pooled values.
pub fn maxpool2d<T: El>(x: &[T], h: usize, w: usize, c: usize, out: &mut [T], argmax: &mut [usize]) {
    let oh = h / 2;
    let ow = w / 2;
    for yo in 0..oh {
        for xo in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = ((yo * 2 + dy) * w + xo * 2 + dx) * c + ch;
                        let v = x[idx].f64();
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = (yo * ow + xo) * c + ch;
                out[o] = T::from_f64(best);
                argmax[o] = best_idx;
            }
        }
    }
}

/// [h,w,c] -> [c] channel means.
pub fn global_avg_pool<T: El>(x: &[T], hw: usize, c: usize, out: &mut [T]) {
    let mut acc = vec![0f64; c];
    for row in x.chunks_exact(c) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v.f64();
        }
    }
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = T::from_f64(*a / hw as f64);
    }
}

// ---- normalization ----

/// Per-row layer normalization over the last axis (population variance),
/// then the affine gain/shift.
pub fn layernorm<T: El>(x: &[T], gain: &[T], shift: &[T], eps: f64, out: &mut [T]) {
    let d = gain.len();
    for (orow, xrow) in out.chunks_exact_mut(d).zip(x.chunks_exact(d)) {
        let (mean, var) = row_moments(xrow);
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            let xhat = (xrow[i].f64() - mean) * inv;
            orow[i] = T::from_f64(xhat * gain[i].f64() + shift[i].f64());
        }
    }
}

pub fn row_moments<T: El>(row: &[T]) -> (f64, f64) {
    let d = row.len() as f64;
    let mut s = 0f64;
    for v in row {
        s += v.f64();
    }
    let mean = s / d;
    let mut q = 0f64;
    for v in row {
        let c = v.f64() - mean;
        q += c * c;
    }
    (mean, q / d)
}

// ---- reductions / losses ----

pub fn sum_all<T: El>(x: &[T]) -> f64 {
    let mut s = 0f64;
    for v in x {
        s += v.f64();
    }
    s
}

/// -log softmax(row)[target], computed with max subtraction in f64.
pub fn row_neg_log_softmax<T: El>(row: &[T], target: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for v in row {
        m = m.max(v.f64());
    }
    let mut z = 0f64;
    for v in row {
        z += (v.f64() - m).exp();
    }
    (m + z.ln()) - row[target].f64()
}

/// Sum over mask-true rows of -log softmax(row)[target].
pub fn masked_ce_sum<T: El>(logits: &[T], v: usize, targets: &[u32], mask: &[bool]) -> f64 {
    let mut total = 0f64;
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            total += row_neg_log_softmax(&logits[r * v..(r + 1) * v], t as usize);
        }
    }
    total
}

/// Index of the row maximum; the lowest index wins ties.
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
