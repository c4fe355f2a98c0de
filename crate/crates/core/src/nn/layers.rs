//! Layers with explicit forward/backward passes.
//!
//! Activations are 2-D: one row per sample (dense layers) or one row per pixel
//! or token (convolution, attention), channels along columns. Forward passes
//! return whatever the backward pass needs; `backward` accumulates parameter
//! gradients (when asked) and returns the gradient for the layer input.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::optim::Param;
use crate::seed::Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    /// Shape (in, out).
    pub w: Param,
    /// Shape (1, out).
    pub b: Param,
}

impl Linear {
    /// Uniform init with bound `sqrt(6 / fan_in) * gain / sqrt(2)`; `gain = sqrt(2)` is He init.
    pub fn new(fan_in: usize, fan_out: usize, gain: f32, rng: &mut Rng) -> Self {
        let bound = gain * (3.0 / fan_in as f32).sqrt();
        Self {
            w: Param::uniform(fan_in, fan_out, bound, rng),
            b: Param::zeros(1, fan_out),
        }
    }

    pub fn zeroed(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Param::zeros(fan_in, fan_out),
            b: Param::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.value.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.value.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.w.value);
        y += &self.b.value;
        y
    }

    pub fn backward(
        &mut self,
        x: &ArrayView2<f32>,
        dy: &Array2<f32>,
        param_grads: bool,
    ) -> Array2<f32> {
        if param_grads {
            general_mat_mul(1.0, &x.t(), dy, 1.0, &mut self.w.grad);
            self.b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        dy.dot(&self.w.value.t())
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.w, &mut self.b]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.w, &self.b]
    }
}

/// Geometry of a batch of feature maps stored as (n*h*w, c).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapShape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl MapShape {
    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    /// Shape (9 * c_in, c_out); row index is `(ky * 3 + kx) * c_in + ci`.
    pub w: Param,
    pub b: Param,
}

impl Conv3x3 {
    pub fn new(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        let lin = Linear::new(9 * c_in, c_out, std::f32::consts::SQRT_2, rng);
        Self { w: lin.w, b: lin.b }
    }

    pub fn c_in(&self) -> usize {
        self.w.value.nrows() / 9
    }

    pub fn c_out(&self) -> usize {
        self.w.value.ncols()
    }

    /// Returns the output and the unfolded input (needed by `backward`).
    pub fn forward(&self, x: &Array2<f32>, shape: MapShape) -> (Array2<f32>, Array2<f32>) {
        debug_assert_eq!(shape.c, self.c_in());
        let cols = im2col(x, shape);
        let mut y = cols.dot(&self.w.value);
        y += &self.b.value;
        (y, cols)
    }

    pub fn backward(
        &mut self,
        cols: &Array2<f32>,
        dy: &Array2<f32>,
        shape: MapShape,
        param_grads: bool,
    ) -> Array2<f32> {
        if param_grads {
            general_mat_mul(1.0, &cols.t(), dy, 1.0, &mut self.w.grad);
            self.b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let dcols = dy.dot(&self.w.value.t());
        col2im(&dcols, shape)
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.w, &mut self.b]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.w, &self.b]
    }
}

fn im2col(x: &Array2<f32>, s: MapShape) -> Array2<f32> {
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let c = s.c;
    let mut cols = vec![0.0f32; s.rows() * 9 * c];
    for b in 0..s.n {
        for y in 0..s.h {
            for xx in 0..s.w {
                let row = (b * s.h + y) * s.w + xx;
                let dst = &mut cols[row * 9 * c..(row + 1) * 9 * c];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= s.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= s.w as isize {
                            continue;
                        }
                        let srow = (b * s.h + sy as usize) * s.w + sx as usize;
                        let k = ky * 3 + kx;
                        dst[k * c..(k + 1) * c].copy_from_slice(&src[srow * c..(srow + 1) * c]);
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((s.rows(), 9 * c), cols).expect("im2col shape")
}

fn col2im(dcols: &Array2<f32>, s: MapShape) -> Array2<f32> {
    let src = dcols.as_slice().expect("standard layout");
    let c = s.c;
    let mut dx = vec![0.0f32; s.rows() * c];
    for b in 0..s.n {
        for y in 0..s.h {
            for xx in 0..s.w {
                let row = (b * s.h + y) * s.w + xx;
                let g = &src[row * 9 * c..(row + 1) * 9 * c];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= s.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= s.w as isize {
                            continue;
                        }
                        let srow = (b * s.h + sy as usize) * s.w + sx as usize;
                        let k = ky * 3 + kx;
                        for (d, v) in dx[srow * c..(srow + 1) * c]
                            .iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                        {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((s.rows(), c), dx).expect("col2im shape")
}

/// 2x2 average pooling (h and w must be even).
pub fn avg_pool2(x: &Array2<f32>, s: MapShape) -> Array2<f32> {
    let (ho, wo) = (s.h / 2, s.w / 2);
    let mut out = Array2::zeros((s.n * ho * wo, s.c));
    for b in 0..s.n {
        for y in 0..ho {
            for xx in 0..wo {
                let mut o = out.row_mut((b * ho + y) * wo + xx);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let r = (b * s.h + 2 * y + dy) * s.w + 2 * xx + dx;
                    o.scaled_add(0.25, &x.row(r));
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &Array2<f32>, s: MapShape) -> Array2<f32> {
    let (ho, wo) = (s.h / 2, s.w / 2);
    let mut dx = Array2::zeros((s.rows(), s.c));
    for b in 0..s.n {
        for y in 0..ho {
            for xx in 0..wo {
                let g = dy.row((b * ho + y) * wo + xx);
                for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let r = (b * s.h + 2 * y + oy) * s.w + 2 * xx + ox;
                    dx.row_mut(r).scaled_add(0.25, &g);
                }
            }
        }
    }
    dx
}

/// Mean over groups of `group` consecutive rows: (n*group, c) -> (n, c).
pub fn group_mean(x: &Array2<f32>, group: usize) -> Array2<f32> {
    let n = x.nrows() / group;
    let mut out = Array2::zeros((n, x.ncols()));
    for b in 0..n {
        let m = x
            .slice(s![b * group..(b + 1) * group, ..])
            .mean_axis(Axis(0))
            .expect("non-empty group");
        out.row_mut(b).assign(&m);
    }
    out
}

pub fn group_mean_backward(dy: &Array2<f32>, group: usize) -> Array2<f32> {
    let mut dx = Array2::zeros((dy.nrows() * group, dy.ncols()));
    let inv = 1.0 / group as f32;
    for b in 0..dy.nrows() {
        let g = dy.row(b);
        for r in b * group..(b + 1) * group {
            dx.row_mut(r).scaled_add(inv, &g);
        }
    }
    dx
}

pub fn relu(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given its output.
pub fn relu_backward(y: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
    Zip::from(y)
        .and(dy)
        .map_collect(|&y, &g| if y > 0.0 { g } else { 0.0 })
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

pub fn silu(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| v * sigmoid(v))
}

/// Gradient through SiLU given its input.
pub fn silu_backward(x: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
    Zip::from(x).and(dy).map_collect(|&x, &g| {
        let s = sigmoid(x);
        g * (s + x * s * (1.0 - s))
    })
}

/// Row-wise softmax.
pub fn softmax_rows(x: &ArrayView2<f32>) -> Array2<f32> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// Row-wise layer normalization with affine parameters.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

pub struct LayerNormCache {
    xhat: Array2<f32>,
    inv_std: Vec<f32>,
}

impl LayerNorm {
    const EPS: f32 = 1e-5;

    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(Array2::ones((1, dim))),
            beta: Param::zeros(1, dim),
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, LayerNormCache) {
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.mean().unwrap_or(0.0);
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / row.len() as f32;
            let is = 1.0 / (var + Self::EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let mut y = &xhat * &self.gamma.value;
        y += &self.beta.value;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &mut self,
        cache: &LayerNormCache,
        dy: &Array2<f32>,
        param_grads: bool,
    ) -> Array2<f32> {
        if param_grads {
            self.gamma.grad += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
            self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let g = dy * &self.gamma.value;
        let d = g.ncols() as f32;
        let mut dx = Array2::zeros(g.raw_dim());
        for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
            let gr = g.row(i);
            let xr = cache.xhat.row(i);
            let mg = gr.sum() / d;
            let mgx = gr.dot(&xr) / d;
            Zip::from(&mut out)
                .and(&gr)
                .and(&xr)
                .for_each(|o, &g, &x| *o = cache.inv_std[i] * (g - mg - x * mgx));
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.gamma, &self.beta]
    }
}

/// Single-head self-attention over sequences of `tokens` consecutive rows.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

pub struct AttentionCache {
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    attn: Vec<Array2<f32>>,
    mixed: Array2<f32>,
}

impl SelfAttention {
    pub fn new(dim: usize, rng: &mut Rng) -> Self {
        Self {
            q: Linear::new(dim, dim, 1.0, rng),
            k: Linear::new(dim, dim, 1.0, rng),
            v: Linear::new(dim, dim, 1.0, rng),
            o: Linear::new(dim, dim, 1.0, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f32>, tokens: usize) -> (Array2<f32>, AttentionCache) {
        let xv = x.view();
        let (q, k, v) = (
            self.q.forward(&xv),
            self.k.forward(&xv),
            self.v.forward(&xv),
        );
        let scale = 1.0 / (q.ncols() as f32).sqrt();
        let n = x.nrows() / tokens;
        let mut mixed = Array2::zeros(x.raw_dim());
        let mut attn = Vec::with_capacity(n);
        for b in 0..n {
            let r = s![b * tokens..(b + 1) * tokens, ..];
            let scores = q.slice(r).dot(&k.slice(r).t()) * scale;
            let a = softmax_rows(&scores.view());
            mixed.slice_mut(r).assign(&a.dot(&v.slice(r)));
            attn.push(a);
        }
        let y = self.o.forward(&mixed.view());
        (
            y,
            AttentionCache {
                q,
                k,
                v,
                attn,
                mixed,
            },
        )
    }

    pub fn backward(
        &mut self,
        x: &Array2<f32>,
        c: &AttentionCache,
        dy: &Array2<f32>,
        tokens: usize,
    ) -> Array2<f32> {
        let dmixed = self.o.backward(&c.mixed.view(), dy, true);
        let scale = 1.0 / (c.q.ncols() as f32).sqrt();
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (b, a) in c.attn.iter().enumerate() {
            let r = s![b * tokens..(b + 1) * tokens, ..];
            let dm = dmixed.slice(r);
            let da = dm.dot(&c.v.slice(r).t());
            dv.slice_mut(r).assign(&a.t().dot(&dm));
            let mut ds = Array2::zeros(a.raw_dim());
            for i in 0..tokens {
                let dot: f32 = a.row(i).dot(&da.row(i));
                Zip::from(ds.row_mut(i))
                    .and(a.row(i))
                    .and(da.row(i))
                    .for_each(|d, &p, &g| *d = p * (g - dot) * scale);
            }
            dq.slice_mut(r).assign(&ds.dot(&c.k.slice(r)));
            dk.slice_mut(r).assign(&ds.t().dot(&c.q.slice(r)));
        }
        let xv = x.view();
        let mut dx = self.q.backward(&xv, &dq, true);
        dx += &self.k.backward(&xv, &dk, true);
        dx += &self.v.backward(&xv, &dv, true);
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::with_capacity(8);
        for l in [&mut self.q, &mut self.k, &mut self.v, &mut self.o] {
            v.extend(l.params_mut());
        }
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        [&self.q, &self.k, &self.v, &self.o]
            .into_iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Array2<f32>, labels: &[usize]) -> (f32, Array2<f32>) {
    let n = logits.nrows();
    let mut probs = softmax_rows(&logits.view());
    let mut loss = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        loss -= (probs[[i, y]].max(1e-12) as f64).ln();
        probs[[i, y]] -= 1.0;
    }
    probs.mapv_inplace(|g| g / n as f32);
    ((loss / n as f64) as f32, probs)
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse(pred: &Array2<f32>, target: &ArrayView2<f32>) -> (f32, Array2<f32>) {
    let n = pred.len() as f32;
    let diff = pred - target;
    let loss = diff.iter().map(|d| (*d as f64) * (*d as f64)).sum::<f64>() / n as f64;
    (loss as f32, diff * (2.0 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f32> {
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Array2<f32>, f: impl Fn(&Array2<f32>) -> f64) -> Array2<f32> {
        let h = 1e-2f32;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = ((f(&xp) - f(&xm)) / (2.0 * h as f64)) as f32;
        }
        g
    }

    fn close(a: &Array2<f32>, b: &Array2<f32>, tol: f32) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    /// Weighted sum of outputs; gives every output element a distinct upstream gradient.
    fn probe(y: &Array2<f32>, w: &Array2<f32>) -> f64 {
        y.iter()
            .zip(w)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from_u64(1);
        let shape = MapShape {
            n: 2,
            h: 4,
            w: 4,
            c: 2,
        };
        let mut conv = Conv3x3::new(2, 3, &mut rng);
        let x = randn(shape.rows(), 2, &mut rng);
        let wout = randn(shape.rows(), 3, &mut rng);
        let (_, cols) = conv.forward(&x, shape);
        let dx = conv.backward(&cols, &wout, shape, true);
        let num = numeric_grad(&x, |x| probe(&conv.forward(x, shape).0, &wout));
        close(&dx, &num, 2e-2);
        let w0 = conv.w.value.clone();
        let num_w = numeric_grad(&w0, |w| {
            let mut c = conv.clone();
            c.w.value = w.clone();
            probe(&c.forward(&x, shape).0, &wout)
        });
        close(&conv.w.grad, &num_w, 2e-2);
    }

    #[test]
    fn pooling_and_group_mean_gradients() {
        let mut rng = Rng::seed_from_u64(2);
        let shape = MapShape {
            n: 2,
            h: 4,
            w: 2,
            c: 3,
        };
        let x = randn(shape.rows(), 3, &mut rng);
        let wout = randn(shape.rows() / 4, 3, &mut rng);
        let dx = avg_pool2_backward(&wout, shape);
        close(
            &dx,
            &numeric_grad(&x, |x| probe(&avg_pool2(x, shape), &wout)),
            1e-2,
        );
        let wg = randn(2, 3, &mut rng);
        let dg = group_mean_backward(&wg, 8);
        close(
            &dg,
            &numeric_grad(&x, |x| probe(&group_mean(x, 8), &wg)),
            1e-2,
        );
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = Rng::seed_from_u64(3);
        let mut ln = LayerNorm::new(5);
        ln.gamma.value = randn(1, 5, &mut rng);
        let x = randn(3, 5, &mut rng);
        let wout = randn(3, 5, &mut rng);
        let (_, cache) = ln.forward(&x);
        let dx = ln.backward(&cache, &wout, true);
        close(
            &dx,
            &numeric_grad(&x, |x| probe(&ln.forward(x).0, &wout)),
            3e-2,
        );
    }

    #[test]
    fn attention_gradients() {
        let mut rng = Rng::seed_from_u64(4);
        let mut att = SelfAttention::new(4, &mut rng);
        let x = randn(6, 4, &mut rng);
        let wout = randn(6, 4, &mut rng);
        let (_, cache) = att.forward(&x, 3);
        let dx = att.backward(&x, &cache, &wout, 3);
        close(
            &dx,
            &numeric_grad(&x, |x| probe(&att.forward(x, 3).0, &wout)),
            3e-2,
        );
        let q0 = att.q.w.value.clone();
        let num_q = numeric_grad(&q0, |w| {
            let mut a = att.clone();
            a.q.w.value = w.clone();
            probe(&a.forward(&x, 3).0, &wout)
        });
        close(&att.q.w.grad, &num_q, 3e-2);
    }

    #[test]
    fn activations_and_losses() {
        let mut rng = Rng::seed_from_u64(5);
        let x = randn(3, 4, &mut rng);
        let wout = randn(3, 4, &mut rng);
        close(
            &silu_backward(&x, &wout),
            &numeric_grad(&x, |x| probe(&silu(x), &wout)),
            1e-2,
        );
        let labels = [0usize, 3, 1];
        let (_, dl) = softmax_cross_entropy(&x, &labels);
        close(
            &dl,
            &numeric_grad(&x, |x| softmax_cross_entropy(x, &labels).0 as f64),
            1e-2,
        );
        let t = randn(3, 4, &mut rng);
        let (_, dm) = mse(&x, &t.view());
        close(&dm, &numeric_grad(&x, |x| mse(x, &t.view()).0 as f64), 1e-2);
        let p = softmax_rows(&x.view());
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = Rng::seed_from_u64(6);
        let mut lin = Linear::new(3, 2, 1.0, &mut rng);
        let x = randn(4, 3, &mut rng);
        let wout = randn(4, 2, &mut rng);
        let dx = lin.backward(&x.view(), &wout, true);
        close(
            &dx,
            &numeric_grad(&x, |x| probe(&lin.forward(&x.view()), &wout)),
            1e-2,
        );
        let b0 = lin.b.value.clone();
        let num_b = numeric_grad(&b0, |b| {
            let mut l = lin.clone();
            l.b.value = b.clone();
            probe(&l.forward(&x.view()), &wout)
        });
        close(&lin.b.grad, &num_b, 1e-2);
    }
}
