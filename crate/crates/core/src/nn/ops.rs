use alloc::vec;
use alloc::vec::Vec;

use super::params::{Grads, ParamId, ParamStore};
use crate::rng::Rng;

/// `C[m×n] (+)= A[m×k] · B[k×n]`; `a_t`/`b_t` mark operands stored
/// transposed (`A` as `k×m`, `B` as `n×k`).
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index touched by the strides.
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    He,
    Zero,
}

/// Dense layer `y = x Wᵀ + b` with `W: [outputs, inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, init: Init, rng: &mut Rng) -> Self {
        let weight = match init {
            Init::He => store.he_normal(alloc::format!("{name}.weight"), &[outputs, inputs], inputs, rng),
            Init::Zero => store.zeros(alloc::format!("{name}.weight"), &[outputs, inputs]),
        };
        let bias = store.zeros(alloc::format!("{name}.bias"), &[outputs]);
        Self { weight, bias, inputs, outputs }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f32], n: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), n * self.inputs);
        let mut y = vec![0.0; n * self.outputs];
        let b = p.get(self.bias);
        for row in y.chunks_exact_mut(self.outputs) {
            row.copy_from_slice(b);
        }
        gemm(n, self.inputs, self.outputs, x, false, p.get(self.weight), true, &mut y, true);
        y
    }

    /// Accumulates parameter gradients; returns `dx` when requested.
    pub fn backward(
        &self,
        p: &ParamStore,
        x: &[f32],
        dy: &[f32],
        n: usize,
        grads: &mut Grads,
        need_dx: bool,
    ) -> Option<Vec<f32>> {
        gemm(self.outputs, n, self.inputs, dy, true, x, false, grads.get_mut(self.weight), true);
        let db = grads.get_mut(self.bias);
        for row in dy.chunks_exact(self.outputs) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
        need_dx.then(|| {
            let mut dx = vec![0.0; n * self.inputs];
            gemm(n, self.outputs, self.inputs, dy, false, p.get(self.weight), false, &mut dx, false);
            dx
        })
    }
}

/// `k×k` convolution, stride 1, zero "same" padding, on `[n, cin, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        height: usize,
        width: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = cin * kernel * kernel;
        let shape = [cout, cin, kernel, kernel];
        let weight = match init {
            Init::He => store.he_normal(alloc::format!("{name}.weight"), &shape, fan_in, rng),
            Init::Zero => store.zeros(alloc::format!("{name}.weight"), &shape),
        };
        let bias = store.zeros(alloc::format!("{name}.bias"), &[cout]);
        Self { weight, bias, cin, cout, kernel, height, width }
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn hw(&self) -> usize {
        self.height * self.width
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let (h, w, k) = (self.height as isize, self.width as isize, self.kernel);
        let pad = (k / 2) as isize;
        let hw = self.hw();
        for c in 0..self.cin {
            let plane = &x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                    for y in 0..h {
                        let sy = y + dy;
                        let out = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                        if sy < 0 || sy >= h {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                        for (xx, o) in out.iter_mut().enumerate() {
                            let sx = xx as isize + dx;
                            *o = if sx < 0 || sx >= w { 0.0 } else { src[sx as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let (h, w, k) = (self.height as isize, self.width as isize, self.kernel);
        let pad = (k / 2) as isize;
        let hw = self.hw();
        for c in 0..self.cin {
            let plane = &mut dx[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let (dy, ddx) = (ky as isize - pad, kx as isize - pad);
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let s = &src[(y * w) as usize..((y + 1) * w) as usize];
                        let dst = &mut plane[(sy * w) as usize..((sy + 1) * w) as usize];
                        for (xx, &v) in s.iter().enumerate() {
                            let sx = xx as isize + ddx;
                            if sx >= 0 && sx < w {
                                dst[sx as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Returns the output and the im2col buffer needed by `backward`.
    pub fn forward(&self, p: &ParamStore, x: &[f32], n: usize) -> (Vec<f32>, Vec<f32>) {
        let (hw, rows) = (self.hw(), self.col_rows());
        debug_assert_eq!(x.len(), n * self.cin * hw);
        let mut cols = vec![0.0; n * rows * hw];
        let mut y = vec![0.0; n * self.cout * hw];
        let (wt, b) = (p.get(self.weight), p.get(self.bias));
        for i in 0..n {
            let col = &mut cols[i * rows * hw..(i + 1) * rows * hw];
            self.im2col(&x[i * self.cin * hw..(i + 1) * self.cin * hw], col);
            let out = &mut y[i * self.cout * hw..(i + 1) * self.cout * hw];
            for (o, plane) in out.chunks_exact_mut(hw).enumerate() {
                plane.fill(b[o]);
            }
            gemm(self.cout, rows, hw, wt, false, col, false, out, true);
        }
        (y, cols)
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cols: &[f32],
        dy: &[f32],
        n: usize,
        grads: &mut Grads,
        need_dx: bool,
    ) -> Option<Vec<f32>> {
        let (hw, rows) = (self.hw(), self.col_rows());
        let mut dx = need_dx.then(|| vec![0.0; n * self.cin * hw]);
        let mut dcol = vec![0.0; rows * hw];
        for i in 0..n {
            let col = &cols[i * rows * hw..(i + 1) * rows * hw];
            let d = &dy[i * self.cout * hw..(i + 1) * self.cout * hw];
            gemm(self.cout, hw, rows, d, false, col, true, grads.get_mut(self.weight), true);
            let db = grads.get_mut(self.bias);
            for (o, plane) in d.chunks_exact(hw).enumerate() {
                db[o] += plane.iter().sum::<f32>();
            }
            if let Some(dx) = dx.as_mut() {
                gemm(rows, self.cout, hw, p.get(self.weight), true, d, false, &mut dcol, false);
                self.col2im(&dcol, &mut dx[i * self.cin * hw..(i + 1) * self.cin * hw]);
            }
        }
        dx
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + num_traits::Float::exp(-x))
}

pub fn silu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Backward of SiLU given the pre-activation `x`.
pub fn silu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

pub fn relu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Backward of ReLU given its output `y`.
pub fn relu_backward(y: &[f32], dy: &[f32]) -> Vec<f32> {
    y.iter().zip(dy).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect()
}

/// 2×2 average pooling on `[n·c, h, w]` planes (`h`, `w` even).
pub fn avg_pool2(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for yy in 0..oh {
            for xx in 0..ow {
                let i = 2 * yy * w + 2 * xx;
                dst[yy * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    y
}

pub fn avg_pool2_backward(dy: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for yy in 0..oh {
            for xx in 0..ow {
                let g = 0.25 * src[yy * ow + xx];
                let i = 2 * yy * w + 2 * xx;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + w] = g;
                dst[i + w + 1] = g;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling on `[planes, h, w]` (input size).
pub fn upsample2(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for yy in 0..oh {
            for xx in 0..ow {
                dst[yy * ow + xx] = src[(yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for yy in 0..oh {
            for xx in 0..ow {
                dst[(yy / 2) * w + xx / 2] += src[yy * ow + xx];
            }
        }
    }
    dx
}

/// Mean over each `hw`-sized plane: `[n·c, hw] → [n·c]`.
pub fn global_avg_pool(x: &[f32], hw: usize) -> Vec<f32> {
    let inv = 1.0 / hw as f32;
    x.chunks_exact(hw).map(|p| p.iter().sum::<f32>() * inv).collect()
}

pub fn global_avg_pool_backward(dy: &[f32], hw: usize) -> Vec<f32> {
    let inv = 1.0 / hw as f32;
    dy.iter().flat_map(|&g| core::iter::repeat_n(g * inv, hw)).collect()
}

/// Concatenates per-sample blocks: `[n, a] ++ [n, b] → [n, a + b]`.
pub fn concat_rows(a: &[f32], a_len: usize, b: &[f32], b_len: usize, n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * (a_len + b_len));
    for i in 0..n {
        out.extend_from_slice(&a[i * a_len..(i + 1) * a_len]);
        out.extend_from_slice(&b[i * b_len..(i + 1) * b_len]);
    }
    out
}

/// Inverse of [`concat_rows`].
pub fn split_rows(x: &[f32], a_len: usize, b_len: usize, n: usize) -> (Vec<f32>, Vec<f32>) {
    let mut a = Vec::with_capacity(n * a_len);
    let mut b = Vec::with_capacity(n * b_len);
    for row in x.chunks_exact(a_len + b_len).take(n) {
        a.extend_from_slice(&row[..a_len]);
        b.extend_from_slice(&row[a_len..]);
    }
    (a, b)
}

/// Adds a per-sample, per-channel bias `[n, c]` to `[n, c, hw]`.
pub fn add_channel_bias(x: &mut [f32], bias: &[f32], hw: usize) {
    for (plane, &b) in x.chunks_exact_mut(hw).zip(bias) {
        for v in plane {
            *v += b;
        }
    }
}

pub fn add_channel_bias_backward(dy: &[f32], hw: usize) -> Vec<f32> {
    dy.chunks_exact(hw).map(|p| p.iter().sum()).collect()
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> (f64, Vec<f32>) {
    let n = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0f64;
    let inv_n = 1.0 / n as f32;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f32;
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = num_traits::Float::exp(v - m);
            z += *gj;
        }
        loss += f64::from(num_traits::Float::ln(z) + m - row[label]);
        for gj in g.iter_mut() {
            *gj *= inv_n / z;
        }
        g[label] -= inv_n;
    }
    (loss / n as f64, grad)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f32]) -> Vec<f32> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_layouts() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let want = naive_matmul(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
        }
    }

    /// Finite-difference check of a scalar loss `sum(w ⊙ f(x))`.
    fn check_input_grad(x: &[f32], f: impl Fn(&[f32]) -> Vec<f32>, grad: impl Fn(&[f32], &[f32]) -> Vec<f32>) {
        let y = f(x);
        let w: Vec<f32> = (0..y.len()).map(|i| ((i * 7 % 11) as f32 - 5.0) / 5.0).collect();
        let analytic = grad(x, &w);
        let h = 1e-2f32;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let lp: f32 = f(&xp).iter().zip(&w).map(|(a, b)| a * b).sum();
            let lm: f32 = f(&xm).iter().zip(&w).map(|(a, b)| a * b).sum();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 2e-2 * (1.0 + fd.abs()), "i={i} fd={fd} an={}", analytic[i]);
        }
    }

    #[test]
    fn conv_input_gradient() {
        let mut rng = rng_from_seed(1);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 4, 5, Init::He, &mut rng);
        let x: Vec<f32> = (0..2 * 2 * 20).map(|i| (i as f32 * 0.3).sin()).collect();
        check_input_grad(
            &x,
            |x| conv.forward(&store, x, 2).0,
            |x, w| {
                let (_, cols) = conv.forward(&store, x, 2);
                let mut g = store.zero_grads();
                conv.backward(&store, &cols, w, 2, &mut g, true).unwrap()
            },
        );
    }

    #[test]
    fn pooling_and_upsampling_gradients() {
        let x: Vec<f32> = (0..2 * 16).map(|i| (i as f32 * 0.7).cos()).collect();
        check_input_grad(&x, |x| avg_pool2(x, 2, 4, 4), |_, w| avg_pool2_backward(w, 2, 4, 4));
        check_input_grad(&x, |x| upsample2(x, 2, 4, 4), |_, w| upsample2_backward(w, 2, 4, 4));
        check_input_grad(&x, |x| global_avg_pool(x, 16), |_, w| global_avg_pool_backward(w, 16));
        check_input_grad(&x, silu, silu_backward);
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = vec![0.3f32, -1.0, 2.0, 0.5, 0.1, -0.2];
        let labels = [2usize, 0];
        let (_, g) = softmax_cross_entropy(&logits, &labels, 3);
        for i in 0..logits.len() {
            let h = 1e-3;
            let mut p = logits.clone();
            p[i] += h;
            let mut m = logits.clone();
            m[i] -= h;
            let fd = (softmax_cross_entropy(&p, &labels, 3).0 - softmax_cross_entropy(&m, &labels, 3).0) / (2.0 * f64::from(h));
            assert!((fd as f32 - g[i]).abs() < 1e-3);
        }
    }
}
