//! Layers with hand-written backward passes. Activations are channels-last
//! `[batch, time, height, width, channels]` in `f64`.
//!
//! Every layer's `forward` takes `&self` and returns the output together
//! with what its `backward` needs, so inference never mutates the network.
//! Batch-normalization running statistics are folded in by `backward`,
//! i.e. once per optimizer step.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor size");
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn dims5(&self) -> [usize; 5] {
        assert_eq!(self.shape.len(), 5, "expected a 5-d tensor");
        [self.shape[0], self.shape[1], self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Channels of a channels-last tensor.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }
}

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    fn new(name: String, shape: &[usize], value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            name,
            shape: shape.to_vec(),
            value,
            grad: vec![0.0; n],
        }
    }

    fn filled(name: String, shape: &[usize], v: f64) -> Self {
        Self::new(name, shape, vec![v; shape.iter().product()])
    }

    fn glorot(name: String, fan_in: usize, fan_out: usize, shape: &[usize], rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new(-limit, limit);
        let n = shape.iter().product();
        Self::new(name, shape, (0..n).map(|_| dist.sample(rng)).collect())
    }
}

/// A non-trainable state tensor saved with the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f64>,
}

/// Visitor over parameters and buffers, in a fixed order.
pub trait Visit {
    fn params(&mut self, f: &mut dyn FnMut(&mut Param));
    fn buffers(&mut self, _f: &mut dyn FnMut(&mut Buffer)) {}
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product with arbitrary strides
/// on `a` and `b`; `c` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output length and leading pad of a "same"-padded window.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

fn window_geometry(dims: [usize; 5], k: [usize; 3], s: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let mut out = [0; 3];
    let mut pad = [0; 3];
    for a in 0..3 {
        (out[a], pad[a]) = same_padding(dims[a + 1], k[a], s[a]);
    }
    (out, pad)
}

/// `acc += Σ_j xs[j] · w[j, :]` with `w` row-major `xs.len() × C`; `C` is
/// the row width, or 0 when only known at run time.
#[inline(always)]
fn dot_taps<const C: usize>(acc: &mut [f64], xs: &[f64], w: &[f64]) {
    if C > 0 {
        let a: &mut [f64; C] = acc.try_into().expect("row width");
        let mut r = *a;
        for (&xv, wr) in xs.iter().zip(w.chunks_exact(C)) {
            let wr: &[f64; C] = wr.try_into().expect("row width");
            for k in 0..C {
                r[k] += xv * wr[k];
            }
        }
        *a = r;
    } else {
        for (&xv, wr) in xs.iter().zip(w.chunks_exact(acc.len())) {
            for (a, b) in acc.iter_mut().zip(wr) {
                *a += xv * b;
            }
        }
    }
}

/// `g[j, :] += xs[j] · v`.
#[inline(always)]
fn spread_taps<const C: usize>(g: &mut [f64], xs: &[f64], v: &[f64]) {
    if C > 0 {
        let v: [f64; C] = v.try_into().expect("row width");
        for (&xv, gr) in xs.iter().zip(g.chunks_exact_mut(C)) {
            let gr: &mut [f64; C] = gr.try_into().expect("row width");
            for k in 0..C {
                gr[k] += xv * v[k];
            }
        }
    } else {
        for (&xv, gr) in xs.iter().zip(g.chunks_exact_mut(v.len())) {
            for (a, b) in gr.iter_mut().zip(v) {
                *a += xv * b;
            }
        }
    }
}

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 22;

/// 3-D convolution without bias, "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub w: Param,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub cin: usize,
    pub cout: usize,
    /// The first convolution needs no input gradient.
    pub needs_input_grad: bool,
}

impl Conv3d {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3], rng: &mut impl Rng) -> Self {
        let fan_in = kernel.iter().product::<usize>() * cin;
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let shape = [kernel[0], kernel[1], kernel[2], cin, cout];
        let value = (0..fan_in * cout).map(|_| dist.sample(rng)).collect();
        Self {
            w: Param::new(format!("{name}/w"), &shape, value),
            kernel,
            stride,
            cin,
            cout,
            needs_input_grad: true,
        }
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }

    pub fn out_shape(&self, dims: [usize; 5]) -> [usize; 5] {
        let (o, _) = window_geometry(dims, self.kernel, self.stride);
        [dims[0], o[0], o[1], o[2], self.cout]
    }

    fn k_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }

    fn chunk_rows(&self) -> usize {
        (COL_BUDGET / self.k_len()).max(1)
    }

    /// Walks the receptive fields of output rows `r0..r0 + rows`. For every
    /// row and in-bounds `(dt, dh)` pair, `f` gets the column offset within
    /// the row, the input offset and the length of the contiguous run of
    /// `kw` taps (times channels) that lies inside the input; `pad` gets the
    /// out-of-bounds column ranges.
    fn for_each_run(
        &self,
        dims: [usize; 5],
        r0: usize,
        rows: usize,
        mut run: impl FnMut(usize, usize, usize, usize),
        mut pad: impl FnMut(usize, usize, usize),
    ) {
        let (o, p) = window_geometry(dims, self.kernel, self.stride);
        let [kt, kh, kw] = self.kernel;
        let cin = self.cin;
        let seg = kw * cin;
        let span = |out: usize, a: usize, k: usize, len: usize| {
            let lo = (out * self.stride[a]) as isize - p[a] as isize;
            let first = (-lo).max(0) as usize;
            let last = ((len as isize - lo).max(0) as usize).min(k);
            (lo, first, last.max(first))
        };
        for i in 0..rows {
            let r = r0 + i;
            let wo = r % o[2];
            let ho = (r / o[2]) % o[1];
            let to = (r / (o[2] * o[1])) % o[0];
            let n = r / (o[2] * o[1] * o[0]);
            let (tl, t0, t1) = span(to, 0, kt, dims[1]);
            let (hl, h0, h1) = span(ho, 1, kh, dims[2]);
            let (wl, w0, w1) = span(wo, 2, kw, dims[3]);
            for dt in 0..kt {
                for dh in 0..kh {
                    let col = (dt * kh + dh) * seg;
                    if dt < t0 || dt >= t1 || dh < h0 || dh >= h1 || w0 == w1 {
                        pad(i, col, seg);
                        continue;
                    }
                    let ti = (tl + dt as isize) as usize;
                    let hi = (hl + dh as isize) as usize;
                    let wi = (wl + w0 as isize) as usize;
                    let src = (((n * dims[1] + ti) * dims[2] + hi) * dims[3] + wi) * cin;
                    if w0 > 0 {
                        pad(i, col, w0 * cin);
                    }
                    run(i, col + w0 * cin, src, (w1 - w0) * cin);
                    if w1 < kw {
                        pad(i, col + w1 * cin, (kw - w1) * cin);
                    }
                }
            }
        }
    }

    /// Direct convolution of a single-channel input, one output position
    /// at a time. Without `grad`, writes the output into `y`; with it,
    /// treats `y` as the output gradient and accumulates the weight
    /// gradient. `C` is the output width, or 0 to read it at run time.
    fn single_channel<const C: usize>(&self, x: &Tensor, y: &mut [f64], grad: Option<&mut [f64]>) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were just detected.
            unsafe { self.single_channel_avx2::<C>(x, y, grad) };
            return;
        }
        self.single_channel_body::<C>(x, y, grad)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn single_channel_avx2<const C: usize>(&self, x: &Tensor, y: &mut [f64], grad: Option<&mut [f64]>) {
        self.single_channel_body::<C>(x, y, grad)
    }

    #[inline(always)]
    fn single_channel_body<const C: usize>(&self, x: &Tensor, y: &mut [f64], mut grad: Option<&mut [f64]>) {
        let d = x.dims5();
        let (o, p) = window_geometry(d, self.kernel, self.stride);
        let c = if C == 0 { self.cout } else { C };
        let [kt, kh, kw] = self.kernel;
        let w = &self.w.value;
        // taps of an output coordinate that land inside the input
        let taps = |out: usize, a: usize, k: usize, len: usize| {
            let lo = (out * self.stride[a]) as isize - p[a] as isize;
            let first = (-lo).max(0) as usize;
            let last = ((len as isize - lo).max(0) as usize).min(k);
            (lo, first, last.max(first))
        };
        let mut acc = vec![0.0; c];
        for n in 0..d[0] {
            for to in 0..o[0] {
                let (tl, t0, t1) = taps(to, 0, kt, d[1]);
                for ho in 0..o[1] {
                    let (hl, h0, h1) = taps(ho, 1, kh, d[2]);
                    for wo in 0..o[2] {
                        let (wl, w0, w1) = taps(wo, 2, kw, d[3]);
                        let out = (((n * o[0] + to) * o[1] + ho) * o[2] + wo) * c;
                        let yr = &mut y[out..out + c];
                        if grad.is_none() {
                            acc.fill(0.0);
                        }
                        for dt in t0..t1 {
                            let ti = (tl + dt as isize) as usize;
                            for dh in h0..h1 {
                                let hi = (hl + dh as isize) as usize;
                                let src = ((n * d[1] + ti) * d[2] + hi) * d[3] + (wl + w0 as isize) as usize;
                                let xs = &x.data[src..src + (w1 - w0)];
                                let tap = ((dt * kh + dh) * kw + w0) * c;
                                let len = (w1 - w0) * c;
                                match grad.as_deref_mut() {
                                    None => dot_taps::<C>(&mut acc, xs, &w[tap..tap + len]),
                                    Some(g) => spread_taps::<C>(&mut g[tap..tap + len], xs, yr),
                                }
                            }
                        }
                        if grad.is_none() {
                            yr.copy_from_slice(&acc);
                        }
                    }
                }
            }
        }
    }

    /// Gathers receptive fields of output rows `r0..r0 + rows` into `col`.
    fn im2col(&self, x: &Tensor, r0: usize, rows: usize, col: &mut [f64]) {
        let kl = self.k_len();
        let col = std::cell::RefCell::new(col);
        self.for_each_run(
            x.dims5(),
            r0,
            rows,
            |i, c, src, len| col.borrow_mut()[i * kl + c..i * kl + c + len].copy_from_slice(&x.data[src..src + len]),
            |i, c, len| col.borrow_mut()[i * kl + c..i * kl + c + len].fill(0.0),
        );
    }

    fn col2im(&self, dims: [usize; 5], r0: usize, rows: usize, col: &[f64], dx: &mut [f64]) {
        let kl = self.k_len();
        self.for_each_run(
            dims,
            r0,
            rows,
            |i, c, dst, len| {
                for (a, b) in dx[dst..dst + len].iter_mut().zip(&col[i * kl + c..i * kl + c + len]) {
                    *a += b;
                }
            },
            |_, _, _| {},
        );
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let d = x.dims5();
        assert_eq!(d[4], self.cin, "{}: input channels", self.w.name);
        let out = self.out_shape(d);
        let mut y = Tensor::zeros(&out);
        let rows = out[0] * out[1] * out[2] * out[3];
        if self.pointwise() {
            gemm(rows, self.cin, self.cout, &x.data, (self.cin, 1), &self.w.value, (self.cout, 1), 0.0, &mut y.data);
            return y;
        }
        if self.cin == 1 {
            // single-channel input: a direct loop beats a 1-wide im2col
            match self.cout {
                4 => self.single_channel::<4>(x, &mut y.data, None),
                16 => self.single_channel::<16>(x, &mut y.data, None),
                _ => self.single_channel::<0>(x, &mut y.data, None),
            }
            return y;
        }
        let kl = self.k_len();
        let chunk = self.chunk_rows().min(rows);
        let mut col = vec![0.0; chunk * kl];
        let mut r0 = 0;
        while r0 < rows {
            let n = chunk.min(rows - r0);
            self.im2col(x, r0, n, &mut col);
            gemm(
                n,
                kl,
                self.cout,
                &col,
                (kl, 1),
                &self.w.value,
                (self.cout, 1),
                0.0,
                &mut y.data[r0 * self.cout..(r0 + n) * self.cout],
            );
            r0 += n;
        }
        y
    }

    /// Accumulates the weight gradient; returns the input gradient unless
    /// this is the first layer.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Option<Tensor> {
        let d = x.dims5();
        let rows = dy.data.len() / self.cout;
        let mut dx = self.needs_input_grad.then(|| Tensor::zeros(&d));
        if self.pointwise() {
            gemm(self.cin, rows, self.cout, &x.data, (1, self.cin), &dy.data, (self.cout, 1), 1.0, &mut self.w.grad);
            if let Some(dx) = dx.as_mut() {
                gemm(rows, self.cout, self.cin, &dy.data, (self.cout, 1), &self.w.value, (1, self.cout), 0.0, &mut dx.data);
            }
            return dx;
        }
        if self.cin == 1 && dx.is_none() {
            let mut gw = std::mem::take(&mut self.w.grad);
            let mut dyc = dy.data.clone();
            match self.cout {
                4 => self.single_channel::<4>(x, &mut dyc, Some(&mut gw[..])),
                16 => self.single_channel::<16>(x, &mut dyc, Some(&mut gw[..])),
                _ => self.single_channel::<0>(x, &mut dyc, Some(&mut gw[..])),
            }
            self.w.grad = gw;
            return None;
        }
        let kl = self.k_len();
        let chunk = self.chunk_rows().min(rows);
        let mut col = vec![0.0; chunk * kl];
        let mut dcol = if dx.is_some() { vec![0.0; chunk * kl] } else { Vec::new() };
        let mut r0 = 0;
        while r0 < rows {
            let n = chunk.min(rows - r0);
            let dyc = &dy.data[r0 * self.cout..(r0 + n) * self.cout];
            self.im2col(x, r0, n, &mut col);
            gemm(kl, n, self.cout, &col, (1, kl), dyc, (self.cout, 1), 1.0, &mut self.w.grad);
            if let Some(dx) = dx.as_mut() {
                gemm(n, self.cout, kl, dyc, (self.cout, 1), &self.w.value, (1, self.cout), 0.0, &mut dcol);
                self.col2im(d, r0, n, &dcol, &mut dx.data);
            }
            r0 += n;
        }
        dx
    }
}

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    rows: usize,
}

impl BatchNorm {
    pub fn new(name: &str, c: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}/gamma"), &[c], 1.0),
            beta: Param::filled(format!("{name}/beta"), &[c], 0.0),
            running_mean: Buffer {
                name: format!("{name}/running_mean"),
                value: vec![0.0; c],
            },
            running_var: Buffer {
                name: format!("{name}/running_var"),
                value: vec![1.0; c],
            },
        }
    }

    /// Normalizes `x` in place. Training mode uses the batch statistics and
    /// returns what backward needs.
    pub fn forward(&self, x: &mut Tensor, train: bool) -> Option<BnCache> {
        let c = x.channels();
        let rows = x.data.len() / c;
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            for row in x.data.chunks_exact(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for row in x.data.chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            (mean, var)
        } else {
            (self.running_mean.value.clone(), self.running_var.value.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let mut xhat = if train { Vec::with_capacity(x.data.len()) } else { Vec::new() };
        for row in x.data.chunks_exact_mut(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                if train {
                    xhat.push(h);
                }
                row[j] = self.gamma.value[j] * h + self.beta.value[j];
            }
        }
        train.then_some(BnCache {
            xhat,
            inv_std,
            mean,
            var,
            rows,
        })
    }

    /// Turns `dy` into the input gradient in place and folds the batch
    /// statistics into the running averages.
    pub fn backward(&mut self, cache: &BnCache, dy: &mut Tensor) {
        let c = dy.channels();
        let n = cache.rows as f64;
        let mut dbeta = vec![0.0; c];
        let mut dgamma = vec![0.0; c];
        for (row, xh) in dy.data.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for j in 0..c {
                dbeta[j] += row[j];
                dgamma[j] += row[j] * xh[j];
            }
        }
        for (row, xh) in dy.data.chunks_exact_mut(c).zip(cache.xhat.chunks_exact(c)) {
            for j in 0..c {
                let k = self.gamma.value[j] * cache.inv_std[j] / n;
                row[j] = k * (n * row[j] - dbeta[j] - xh[j] * dgamma[j]);
            }
        }
        for j in 0..c {
            self.beta.grad[j] += dbeta[j];
            self.gamma.grad[j] += dgamma[j];
            let unbiased = if cache.rows > 1 { cache.var[j] * n / (n - 1.0) } else { cache.var[j] };
            let rm = &mut self.running_mean.value[j];
            *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * cache.mean[j];
            let rv = &mut self.running_var.value[j];
            *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * unbiased;
        }
    }
}

/// Convolution, batch normalization and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit3d {
    pub conv: Conv3d,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct UnitCache {
    x: Tensor,
    bn: BnCache,
    /// Post-activation output; its sign is the ReLU mask.
    y: Tensor,
}

impl Unit3d {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv3d::new(&format!("{name}/conv_3d"), cin, cout, kernel, stride, rng),
            bn: BatchNorm::new(&format!("{name}/batch_norm"), cout),
        }
    }

    pub fn out_shape(&self, dims: [usize; 5]) -> [usize; 5] {
        self.conv.out_shape(dims)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> (Tensor, Option<UnitCache>) {
        let mut y = self.conv.forward(x);
        let bn = self.bn.forward(&mut y, train);
        y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let cache = bn.map(|bn| UnitCache {
            x: x.clone(),
            bn,
            y: y.clone(),
        });
        (y, cache)
    }

    pub fn backward(&mut self, cache: &UnitCache, mut dy: Tensor) -> Option<Tensor> {
        for (d, y) in dy.data.iter_mut().zip(&cache.y.data) {
            if *y <= 0.0 {
                *d = 0.0;
            }
        }
        self.bn.backward(&cache.bn, &mut dy);
        self.conv.backward(&cache.x, &dy)
    }
}

impl Visit for Unit3d {
    fn params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.conv.w);
        f(&mut self.bn.gamma);
        f(&mut self.bn.beta);
    }

    fn buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        f(&mut self.bn.running_mean);
        f(&mut self.bn.running_var);
    }
}

/// Max pooling with "same" padding; padded positions never win.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxPool3d {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    input_dims: [usize; 5],
    argmax: Vec<u32>,
}

impl MaxPool3d {
    pub fn out_shape(&self, dims: [usize; 5]) -> [usize; 5] {
        let (o, _) = window_geometry(dims, self.kernel, self.stride);
        [dims[0], o[0], o[1], o[2], dims[4]]
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> (Tensor, Option<PoolCache>) {
        let d = x.dims5();
        let (o, p) = window_geometry(d, self.kernel, self.stride);
        let c = d[4];
        let out = [d[0], o[0], o[1], o[2], c];
        let mut y = Tensor::zeros(&out);
        let mut argmax = if train { vec![0u32; y.data.len()] } else { Vec::new() };
        let range = |o: usize, a: usize| {
            let lo = (o * self.stride[a]) as isize - p[a] as isize;
            let hi = (lo + self.kernel[a] as isize).min(d[a + 1] as isize);
            (lo.max(0) as usize, hi as usize)
        };
        let mut best = vec![f64::NEG_INFINITY; c];
        let mut best_i = vec![0u32; c];
        let mut out_i = 0;
        for n in 0..d[0] {
            for to in 0..o[0] {
                let (t0, t1) = range(to, 0);
                for ho in 0..o[1] {
                    let (h0, h1) = range(ho, 1);
                    for wo in 0..o[2] {
                        let (w0, w1) = range(wo, 2);
                        best.fill(f64::NEG_INFINITY);
                        for t in t0..t1 {
                            for h in h0..h1 {
                                for w in w0..w1 {
                                    let base = (((n * d[1] + t) * d[2] + h) * d[3] + w) * c;
                                    for j in 0..c {
                                        let v = x.data[base + j];
                                        if v > best[j] {
                                            best[j] = v;
                                            best_i[j] = (base + j) as u32;
                                        }
                                    }
                                }
                            }
                        }
                        y.data[out_i..out_i + c].copy_from_slice(&best);
                        if train {
                            argmax[out_i..out_i + c].copy_from_slice(&best_i);
                        }
                        out_i += c;
                    }
                }
            }
        }
        (y, train.then_some(PoolCache { input_dims: d, argmax }))
    }

    pub fn backward(cache: &PoolCache, dy: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(&cache.input_dims);
        for (g, &i) in dy.data.iter().zip(&cache.argmax) {
            dx.data[i as usize] += g;
        }
        dx
    }
}

/// Channel counts of an inception block:
/// `[b0, b1 reduce, b1, b2 reduce, b2, b3 projection]`.
pub type MixedChannels = [usize; 6];

/// Inception block: 1x1; 1x1 then 3x3; 1x1 then 3x3; 3x3 max pool then
/// 1x1, concatenated on channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixed {
    pub b0: Unit3d,
    pub b1a: Unit3d,
    pub b1b: Unit3d,
    pub b2a: Unit3d,
    pub b2b: Unit3d,
    pub b3: Unit3d,
    pub pool: MaxPool3d,
}

#[derive(Debug, Clone)]
pub struct MixedCache {
    b0: UnitCache,
    b1a: UnitCache,
    b1b: UnitCache,
    b2a: UnitCache,
    b2b: UnitCache,
    pool: PoolCache,
    b3: UnitCache,
}

impl Mixed {
    pub fn new(name: &str, cin: usize, ch: MixedChannels, rng: &mut impl Rng) -> Self {
        let one = [1, 1, 1];
        let three = [3, 3, 3];
        Self {
            b0: Unit3d::new(&format!("{name}/Branch_0/Conv3d_0a_1x1"), cin, ch[0], one, one, rng),
            b1a: Unit3d::new(&format!("{name}/Branch_1/Conv3d_0a_1x1"), cin, ch[1], one, one, rng),
            b1b: Unit3d::new(&format!("{name}/Branch_1/Conv3d_0b_3x3"), ch[1], ch[2], three, one, rng),
            b2a: Unit3d::new(&format!("{name}/Branch_2/Conv3d_0a_1x1"), cin, ch[3], one, one, rng),
            b2b: Unit3d::new(&format!("{name}/Branch_2/Conv3d_0b_3x3"), ch[3], ch[4], three, one, rng),
            b3: Unit3d::new(&format!("{name}/Branch_3/Conv3d_0b_1x1"), cin, ch[5], one, one, rng),
            pool: MaxPool3d {
                kernel: three,
                stride: one,
            },
        }
    }

    fn widths(&self) -> [usize; 4] {
        [self.b0.conv.cout, self.b1b.conv.cout, self.b2b.conv.cout, self.b3.conv.cout]
    }

    pub fn out_shape(&self, dims: [usize; 5]) -> [usize; 5] {
        [dims[0], dims[1], dims[2], dims[3], self.widths().iter().sum()]
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> (Tensor, Option<MixedCache>) {
        let (y0, c0) = self.b0.forward(x, train);
        let (h1, c1a) = self.b1a.forward(x, train);
        let (y1, c1b) = self.b1b.forward(&h1, train);
        let (h2, c2a) = self.b2a.forward(x, train);
        let (y2, c2b) = self.b2b.forward(&h2, train);
        let (p3, cp) = self.pool.forward(x, train);
        let (y3, c3) = self.b3.forward(&p3, train);
        let parts = [&y0, &y1, &y2, &y3];
        let out = self.out_shape(x.dims5());
        let total = out[4];
        let mut y = Tensor::zeros(&out);
        let mut off = 0;
        for part in parts {
            let c = part.channels();
            for (dst, src) in y.data.chunks_exact_mut(total).zip(part.data.chunks_exact(c)) {
                dst[off..off + c].copy_from_slice(src);
            }
            off += c;
        }
        let cache = match (c0, c1a, c1b, c2a, c2b, cp, c3) {
            (Some(b0), Some(b1a), Some(b1b), Some(b2a), Some(b2b), Some(pool), Some(b3)) => Some(MixedCache {
                b0,
                b1a,
                b1b,
                b2a,
                b2b,
                pool,
                b3,
            }),
            _ => None,
        };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &MixedCache, dy: &Tensor) -> Tensor {
        let total = dy.channels();
        let split = |off: usize, c: usize| {
            let mut shape = dy.shape.clone();
            *shape.last_mut().unwrap() = c;
            let data = dy.data.chunks_exact(total).flat_map(|r| r[off..off + c].iter().copied()).collect();
            Tensor::from_vec(&shape, data)
        };
        let w = self.widths();
        let offs = [0, w[0], w[0] + w[1], w[0] + w[1] + w[2]];
        let mut dx = self.b0.backward(&cache.b0, split(offs[0], w[0])).expect("inner grad");
        let add = |dx: &mut Tensor, g: Tensor| dx.data.iter_mut().zip(g.data).for_each(|(a, b)| *a += b);
        let g = self.b1b.backward(&cache.b1b, split(offs[1], w[1])).expect("inner grad");
        add(&mut dx, self.b1a.backward(&cache.b1a, g).expect("inner grad"));
        let g = self.b2b.backward(&cache.b2b, split(offs[2], w[2])).expect("inner grad");
        add(&mut dx, self.b2a.backward(&cache.b2a, g).expect("inner grad"));
        let g = self.b3.backward(&cache.b3, split(offs[3], w[3])).expect("inner grad");
        add(&mut dx, MaxPool3d::backward(&cache.pool, &g));
        dx
    }
}

impl Visit for Mixed {
    fn params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for u in [&mut self.b0, &mut self.b1a, &mut self.b1b, &mut self.b2a, &mut self.b2b, &mut self.b3] {
            u.params(f);
        }
    }

    fn buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        for u in [&mut self.b0, &mut self.b1a, &mut self.b1b, &mut self.b2a, &mut self.b2b, &mut self.b3] {
            u.buffers(f);
        }
    }
}

/// Per-timestep spatial max and average pooling, concatenated:
/// `[n, t, h, w, c]` to `[n, t, 2c]`.
#[derive(Debug, Clone)]
pub struct SpatialPoolCache {
    input_dims: [usize; 5],
    argmax: Vec<usize>,
}

pub fn spatial_pool(x: &Tensor) -> (Tensor, SpatialPoolCache) {
    let d = x.dims5();
    let (hw, c) = (d[2] * d[3], d[4]);
    let mut y = Tensor::zeros(&[d[0], d[1], 2 * c]);
    let mut argmax = vec![0usize; d[0] * d[1] * c];
    for nt in 0..d[0] * d[1] {
        let out = &mut y.data[nt * 2 * c..(nt + 1) * 2 * c];
        let am = &mut argmax[nt * c..(nt + 1) * c];
        out[..c].fill(f64::NEG_INFINITY);
        for s in 0..hw {
            let base = (nt * hw + s) * c;
            for j in 0..c {
                let v = x.data[base + j];
                if v > out[j] {
                    out[j] = v;
                    am[j] = base + j;
                }
                out[c + j] += v;
            }
        }
        out[c..].iter_mut().for_each(|v| *v /= hw as f64);
    }
    (y, SpatialPoolCache { input_dims: d, argmax })
}

pub fn spatial_pool_backward(cache: &SpatialPoolCache, dy: &Tensor) -> Tensor {
    let d = cache.input_dims;
    let (hw, c) = (d[2] * d[3], d[4]);
    let mut dx = Tensor::zeros(&d);
    for nt in 0..d[0] * d[1] {
        let g = &dy.data[nt * 2 * c..(nt + 1) * 2 * c];
        for j in 0..c {
            dx.data[cache.argmax[nt * c + j]] += g[j];
        }
        for s in 0..hw {
            let base = (nt * hw + s) * c;
            for j in 0..c {
                dx.data[base + j] += g[c + j] / hw as f64;
            }
        }
    }
    dx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Long short-term memory layer returning its final hidden state. Gates
/// are ordered input, forget, cell, output; the forget bias starts at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub wx: Param,
    pub wh: Param,
    pub b: Param,
    pub units: usize,
    pub reverse: bool,
}

#[derive(Debug, Clone)]
struct LstmStep {
    t: usize,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates `[n, 4u]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    steps: Vec<LstmStep>,
}

impl Lstm {
    pub fn new(name: &str, input: usize, units: usize, reverse: bool, rng: &mut impl Rng) -> Self {
        let mut b = vec![0.0; 4 * units];
        b[units..2 * units].fill(1.0);
        Self {
            wx: Param::glorot(format!("{name}/kernel"), input, 4 * units, &[input, 4 * units], rng),
            wh: Param::glorot(format!("{name}/recurrent_kernel"), units, 4 * units, &[units, 4 * units], rng),
            b: Param::new(format!("{name}/bias"), &[4 * units], b),
            units,
            reverse,
        }
    }

    /// `x` is `[n, t, d]`; returns the final hidden state `[n, units]`.
    pub fn forward(&self, x: &Tensor) -> (Vec<f64>, LstmCache) {
        let (n, steps, dim) = (x.shape[0], x.shape[1], x.shape[2]);
        let u = self.units;
        let mut h = vec![0.0; n * u];
        let mut c = vec![0.0; n * u];
        let mut cache = Vec::with_capacity(steps);
        let mut xt = vec![0.0; n * dim];
        for s in 0..steps {
            let t = if self.reverse { steps - 1 - s } else { s };
            for i in 0..n {
                xt[i * dim..(i + 1) * dim].copy_from_slice(&x.data[(i * steps + t) * dim..(i * steps + t + 1) * dim]);
            }
            let mut z: Vec<f64> = (0..n).flat_map(|_| self.b.value.iter().copied()).collect();
            gemm(n, dim, 4 * u, &xt, (dim, 1), &self.wx.value, (4 * u, 1), 1.0, &mut z);
            gemm(n, u, 4 * u, &h, (u, 1), &self.wh.value, (4 * u, 1), 1.0, &mut z);
            let (h_prev, c_prev) = (h.clone(), c.clone());
            let mut tanh_c = vec![0.0; n * u];
            for i in 0..n {
                let g = &mut z[i * 4 * u..(i + 1) * 4 * u];
                for j in 0..u {
                    g[j] = sigmoid(g[j]);
                    g[u + j] = sigmoid(g[u + j]);
                    g[2 * u + j] = g[2 * u + j].tanh();
                    g[3 * u + j] = sigmoid(g[3 * u + j]);
                    let k = i * u + j;
                    c[k] = g[u + j] * c_prev[k] + g[j] * g[2 * u + j];
                    tanh_c[k] = c[k].tanh();
                    h[k] = g[3 * u + j] * tanh_c[k];
                }
            }
            cache.push(LstmStep {
                t,
                h_prev,
                c_prev,
                gates: z,
                tanh_c,
            });
        }
        (h, LstmCache { steps: cache })
    }

    /// Backpropagates the gradient of the final hidden state; adds the
    /// input gradient into `dx` (`[n, t, d]`).
    pub fn backward(&mut self, x: &Tensor, cache: &LstmCache, dh_final: &[f64], dx: &mut Tensor) {
        let (n, steps, dim) = (x.shape[0], x.shape[1], x.shape[2]);
        let u = self.units;
        let mut dh = dh_final.to_vec();
        let mut dc = vec![0.0; n * u];
        let mut dz = vec![0.0; n * 4 * u];
        let mut xt = vec![0.0; n * dim];
        let mut dxt = vec![0.0; n * dim];
        for step in cache.steps.iter().rev() {
            for i in 0..n {
                let g = &step.gates[i * 4 * u..(i + 1) * 4 * u];
                let d = &mut dz[i * 4 * u..(i + 1) * 4 * u];
                for j in 0..u {
                    let k = i * u + j;
                    let (gi, gf, gg, go) = (g[j], g[u + j], g[2 * u + j], g[3 * u + j]);
                    let tc = step.tanh_c[k];
                    let dct = dc[k] + dh[k] * go * (1.0 - tc * tc);
                    d[j] = dct * gg * gi * (1.0 - gi);
                    d[u + j] = dct * step.c_prev[k] * gf * (1.0 - gf);
                    d[2 * u + j] = dct * gi * (1.0 - gg * gg);
                    d[3 * u + j] = dh[k] * tc * go * (1.0 - go);
                    dc[k] = dct * gf;
                }
            }
            let t = step.t;
            for i in 0..n {
                xt[i * dim..(i + 1) * dim].copy_from_slice(&x.data[(i * steps + t) * dim..(i * steps + t + 1) * dim]);
            }
            gemm(dim, n, 4 * u, &xt, (1, dim), &dz, (4 * u, 1), 1.0, &mut self.wx.grad);
            gemm(u, n, 4 * u, &step.h_prev, (1, u), &dz, (4 * u, 1), 1.0, &mut self.wh.grad);
            for row in dz.chunks_exact(4 * u) {
                for (b, d) in self.b.grad.iter_mut().zip(row) {
                    *b += d;
                }
            }
            gemm(n, 4 * u, dim, &dz, (4 * u, 1), &self.wx.value, (1, 4 * u), 0.0, &mut dxt);
            for i in 0..n {
                for (a, b) in dx.data[(i * steps + t) * dim..(i * steps + t + 1) * dim]
                    .iter_mut()
                    .zip(&dxt[i * dim..(i + 1) * dim])
                {
                    *a += b;
                }
            }
            gemm(n, 4 * u, u, &dz, (4 * u, 1), &self.wh.value, (1, 4 * u), 0.0, &mut dh);
        }
    }
}

impl Visit for Lstm {
    fn params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.wx);
        f(&mut self.wh);
        f(&mut self.b);
    }
}

/// Single-output dense layer producing a logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Logit {
    pub w: Param,
    pub b: Param,
}

impl Logit {
    pub fn new(name: &str, input: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Param::glorot(format!("{name}/kernel"), input, 1, &[input, 1], rng),
            b: Param::filled(format!("{name}/bias"), &[1], 0.0),
        }
    }

    /// `x` is `[n, d]` row-major.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let d = self.w.value.len();
        x.chunks_exact(d)
            .map(|row| self.b.value[0] + row.iter().zip(&self.w.value).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    /// Accumulates gradients and adds the input gradient into `dx`.
    pub fn backward(&mut self, x: &[f64], dlogit: &[f64], dx: &mut [f64]) {
        let d = self.w.value.len();
        for ((row, g), drow) in x.chunks_exact(d).zip(dlogit).zip(dx.chunks_exact_mut(d)) {
            self.b.grad[0] += g;
            for j in 0..d {
                self.w.grad[j] += g * row[j];
                drow[j] += g * self.w.value[j];
            }
        }
    }
}

impl Visit for Logit {
    fn params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Direct nested-loop convolution with the same padding rule.
    fn naive_conv(x: &Tensor, conv: &Conv3d) -> Tensor {
        let d = x.dims5();
        let out = conv.out_shape(d);
        let [kt, kh, kw] = conv.kernel;
        let pads: Vec<usize> = (0..3).map(|a| same_padding(d[a + 1], conv.kernel[a], conv.stride[a]).1).collect();
        let mut y = Tensor::zeros(&out);
        for n in 0..out[0] {
            for t in 0..out[1] {
                for h in 0..out[2] {
                    for w in 0..out[3] {
                        for co in 0..conv.cout {
                            let mut s = 0.0;
                            for a in 0..kt {
                                for b in 0..kh {
                                    for c in 0..kw {
                                        let ti = (t * conv.stride[0] + a) as isize - pads[0] as isize;
                                        let hi = (h * conv.stride[1] + b) as isize - pads[1] as isize;
                                        let wi = (w * conv.stride[2] + c) as isize - pads[2] as isize;
                                        if ti < 0 || hi < 0 || wi < 0 || ti >= d[1] as isize || hi >= d[2] as isize || wi >= d[3] as isize {
                                            continue;
                                        }
                                        for ci in 0..conv.cin {
                                            let xi = (((n * d[1] + ti as usize) * d[2] + hi as usize) * d[3] + wi as usize) * conv.cin + ci;
                                            let wi = (((a * kh + b) * kw + c) * conv.cin + ci) * conv.cout + co;
                                            s += x.data[xi] * conv.w.value[wi];
                                        }
                                    }
                                }
                            }
                            y.data[(((n * out[1] + t) * out[2] + h) * out[3] + w) * conv.cout + co] = s;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn same_padding_arithmetic() {
        assert_eq!(same_padding(64, 7, 2), (32, 2));
        assert_eq!(same_padding(32, 3, 2), (16, 0));
        assert_eq!(same_padding(16, 1, 1), (16, 0));
        assert_eq!(same_padding(4, 2, 2), (2, 0));
        assert_eq!(same_padding(5, 3, 1), (5, 1));
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut r = rng();
        for (k, s, cin, cout) in [([3, 3, 3], [1, 1, 1], 2, 3), ([7, 7, 7], [2, 2, 2], 1, 2), ([3, 3, 3], [1, 1, 1], 1, 4), ([1, 1, 1], [1, 1, 1], 3, 2), ([1, 3, 3], [1, 2, 2], 2, 2)] {
            let conv = Conv3d::new("c", cin, cout, k, s, &mut r);
            let x = random(&[2, 5, 6, 7, cin], &mut r);
            let y = conv.forward(&x);
            let want = naive_conv(&x, &conv);
            assert_eq!(y.shape, want.shape);
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Central differences of `sum(forward(x) * probe)` against backward.
    #[test]
    fn conv_gradients() {
        let mut r = rng();
        for (k, s, cin, first) in [
            ([3, 3, 3], [1, 1, 1], 2, false),
            ([3, 3, 3], [2, 2, 2], 2, false),
            ([1, 1, 1], [1, 1, 1], 2, false),
            ([7, 7, 7], [2, 2, 2], 1, true),
            ([3, 3, 3], [2, 2, 2], 1, false),
        ] {
            let mut conv = Conv3d::new("c", cin, 3, k, s, &mut r);
            conv.needs_input_grad = !first;
            let x = random(&[2, 4, 5, 5, cin], &mut r);
            let probe = random(&conv.out_shape(x.dims5()), &mut r);
            let loss = |conv: &Conv3d, x: &Tensor| conv.forward(x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum::<f64>();
            let dx = conv.backward(&x, &probe);
            assert_eq!(dx.is_none(), first);
            let eps = 1e-6;
            for i in (0..if first { 0 } else { x.data.len() }).step_by(7) {
                let dx = dx.as_ref().unwrap();
                let mut xp = x.clone();
                xp.data[i] += eps;
                let mut xm = x.clone();
                xm.data[i] -= eps;
                let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
                assert!((num - dx.data[i]).abs() < 1e-7, "dx[{i}] {num} vs {}", dx.data[i]);
            }
            for i in (0..conv.w.value.len()).step_by(5) {
                let mut c2 = conv.clone();
                c2.w.value[i] += eps;
                let lp = loss(&c2, &x);
                c2.w.value[i] -= 2.0 * eps;
                let num = (lp - loss(&c2, &x)) / (2.0 * eps);
                assert!((num - conv.w.grad[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn max_pool_ignores_padding() {
        let pool = MaxPool3d {
            kernel: [1, 3, 3],
            stride: [1, 2, 2],
        };
        let x = Tensor::from_vec(&[1, 1, 2, 2, 1], vec![-4.0, -3.0, -2.0, -1.0]);
        let (y, cache) = pool.forward(&x, true);
        assert_eq!(y.shape, vec![1, 1, 1, 1, 1]);
        assert_eq!(y.data, vec![-1.0]);
        let dx = MaxPool3d::backward(&cache.unwrap(), &Tensor::from_vec(&[1, 1, 1, 1, 1], vec![2.0]));
        assert_eq!(dx.data, vec![0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn batch_norm_normalizes_and_tracks() {
        let mut bn = BatchNorm::new("bn", 2);
        let mut x = Tensor::from_vec(&[1, 1, 1, 4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
        let cache = bn.forward(&mut x, true).unwrap();
        let mean0: f64 = x.data.iter().step_by(2).sum::<f64>() / 4.0;
        assert!(mean0.abs() < 1e-12);
        let mut dy = Tensor::from_vec(&[1, 1, 1, 4, 2], vec![0.0; 8]);
        bn.backward(&cache, &mut dy);
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-12);
        assert!((bn.running_mean.value[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn spatial_pool_values() {
        let x = Tensor::from_vec(&[1, 1, 2, 2, 1], vec![1.0, 5.0, 3.0, 3.0]);
        let (y, cache) = spatial_pool(&x);
        assert_eq!(y.data, vec![5.0, 3.0]);
        let dx = spatial_pool_backward(&cache, &Tensor::from_vec(&[1, 1, 2], vec![1.0, 4.0]));
        assert_eq!(dx.data, vec![1.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn lstm_gradients() {
        let mut r = rng();
        for reverse in [false, true] {
            let mut lstm = Lstm::new("l", 3, 2, reverse, &mut r);
            let x = random(&[2, 4, 3], &mut r);
            let probe = [0.3, -0.7, 1.1, 0.5];
            let loss = |l: &Lstm, x: &Tensor| l.forward(x).0.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();
            let (_, cache) = lstm.forward(&x);
            let mut dx = Tensor::zeros(&x.shape);
            lstm.backward(&x, &cache, &probe, &mut dx);
            let eps = 1e-6;
            for i in 0..x.data.len() {
                let mut xp = x.clone();
                xp.data[i] += eps;
                let mut xm = x.clone();
                xm.data[i] -= eps;
                let num = (loss(&lstm, &xp) - loss(&lstm, &xm)) / (2.0 * eps);
                assert!((num - dx.data[i]).abs() < 1e-8, "dx[{i}]");
            }
            for which in 0..3 {
                let n = [lstm.wx.value.len(), lstm.wh.value.len(), lstm.b.value.len()][which];
                for i in 0..n {
                    let mut l2 = lstm.clone();
                    let p = [&mut l2.wx, &mut l2.wh, &mut l2.b][which].value.get_mut(i).unwrap();
                    *p += eps;
                    let lp = loss(&l2, &x);
                    let mut l3 = lstm.clone();
                    *[&mut l3.wx, &mut l3.wh, &mut l3.b][which].value.get_mut(i).unwrap() -= eps;
                    let num = (lp - loss(&l3, &x)) / (2.0 * eps);
                    let ana = [&lstm.wx, &lstm.wh, &lstm.b][which].grad[i];
                    assert!((num - ana).abs() < 1e-8, "param {which}[{i}]: {num} vs {ana}");
                }
            }
        }
    }
}
