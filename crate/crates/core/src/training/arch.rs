//! The three default ensemble members: two convolutional nets of different
//! width and depth, and a small patch-attention classifier.
//!
//! Inputs are normalized images flattened row-major with interleaved
//! channels, shape (n, h*w*3); that layout is already the (n*h*w, 3)
//! feature-map layout used by [`Conv3x3`], so no copy is needed.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::nn::layers::{
    avg_pool2, avg_pool2_backward, group_mean, group_mean_backward, relu, relu_backward,
    softmax_cross_entropy,
};
use crate::nn::{Conv3x3, LayerNorm, Linear, MapShape, Param, SelfAttention};
use crate::seed::{self, Rng};

pub const CNN_COMPACT: &str = "cnn-compact";
pub const CNN_WIDE: &str = "cnn-wide";
pub const ATTN_TINY: &str = "attn-tiny";

/// Architectures known to the registry, in default ensemble order.
pub const DEFAULT_ARCHITECTURES: [&str; 3] = [CNN_COMPACT, CNN_WIDE, ATTN_TINY];

const PATCH: usize = 4;
const ATTN_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl InputShape {
    pub fn pixels(&self) -> usize {
        self.height * self.width * 3
    }

    fn map(&self, n: usize, c: usize) -> MapShape {
        MapShape {
            n,
            h: self.height,
            w: self.width,
            c,
        }
    }
}

/// Conv stack: `conv -> relu [-> pool]` per stage, global average pool, linear head.
#[derive(Debug, Clone)]
pub struct ConvNet {
    convs: Vec<Conv3x3>,
    /// Whether stage `i` is followed by 2x2 pooling.
    pools: Vec<bool>,
    head: Linear,
}

struct ConvCache {
    shapes: Vec<MapShape>,
    cols: Vec<Array2<f32>>,
    relu_out: Vec<Array2<f32>>,
    pooled_shape: MapShape,
    features: Array2<f32>,
}

impl ConvNet {
    fn new(input: InputShape, channels: &[usize], pools: &[bool], rng: &mut Rng) -> Self {
        let mut convs = Vec::new();
        let mut c_in = 3;
        for &c in channels {
            convs.push(Conv3x3::new(c_in, c, rng));
            c_in = c;
        }
        Self {
            convs,
            pools: pools.to_vec(),
            head: Linear::new(c_in, input.classes, 1.0, rng),
        }
    }

    fn forward(&self, x: &Array2<f32>, input: InputShape) -> (Array2<f32>, ConvCache) {
        let n = x.nrows();
        let mut shape = input.map(n, 3);
        let mut h = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((shape.rows(), 3))
            .expect("image rows are h*w*3");
        let mut cache = ConvCache {
            shapes: Vec::new(),
            cols: Vec::new(),
            relu_out: Vec::new(),
            pooled_shape: shape,
            features: Array2::zeros((0, 0)),
        };
        for (conv, &pool) in self.convs.iter().zip(&self.pools) {
            let (y, cols) = conv.forward(&h, shape);
            let a = relu(&y);
            cache.shapes.push(shape);
            cache.cols.push(cols);
            let out_shape = MapShape {
                c: conv.c_out(),
                ..shape
            };
            if pool {
                h = avg_pool2(&a, out_shape);
                shape = MapShape {
                    h: shape.h / 2,
                    w: shape.w / 2,
                    ..out_shape
                };
            } else {
                h = a.clone();
                shape = out_shape;
            }
            cache.relu_out.push(a);
        }
        cache.pooled_shape = shape;
        let features = group_mean(&h, shape.h * shape.w);
        let logits = self.head.forward(&features.view());
        cache.features = features;
        (logits, cache)
    }

    fn backward(&mut self, cache: &ConvCache, dlogits: &Array2<f32>) {
        let dfeat = self.head.backward(&cache.features.view(), dlogits, true);
        let s = cache.pooled_shape;
        let mut dh = group_mean_backward(&dfeat, s.h * s.w);
        for i in (0..self.convs.len()).rev() {
            let in_shape = cache.shapes[i];
            let out_shape = MapShape {
                c: self.convs[i].c_out(),
                ..in_shape
            };
            if self.pools[i] {
                dh = avg_pool2_backward(&dh, out_shape);
            }
            let dy = relu_backward(&cache.relu_out[i], &dh);
            dh = self.convs[i].backward(&cache.cols[i], &dy, in_shape, true);
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        v.extend(self.head.params_mut());
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.convs.iter().flat_map(|c| c.params()).collect();
        v.extend(self.head.params());
        v
    }
}

/// Non-overlapping 4x4 patches embedded to tokens, one pre-norm attention
/// block with an MLP, mean pooling and a linear head.
#[derive(Debug, Clone)]
pub struct AttnNet {
    embed: Linear,
    pos: Param,
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    mlp_in: Linear,
    mlp_out: Linear,
    ln_f: LayerNorm,
    head: Linear,
}

struct AttnCache {
    patches: Array2<f32>,
    ln1: crate::nn::layers::LayerNormCache,
    n1: Array2<f32>,
    attn: crate::nn::layers::AttentionCache,
    ln2: crate::nn::layers::LayerNormCache,
    n2: Array2<f32>,
    hidden: Array2<f32>,
    lnf: crate::nn::layers::LayerNormCache,
    pooled: Array2<f32>,
}

impl AttnNet {
    fn tokens(input: InputShape) -> usize {
        (input.height / PATCH) * (input.width / PATCH)
    }

    fn new(input: InputShape, rng: &mut Rng) -> Self {
        let d = ATTN_DIM;
        let tokens = Self::tokens(input);
        Self {
            embed: Linear::new(PATCH * PATCH * 3, d, 1.0, rng),
            pos: Param::uniform(tokens, d, 0.1, rng),
            ln1: LayerNorm::new(d),
            attn: SelfAttention::new(d, rng),
            ln2: LayerNorm::new(d),
            mlp_in: Linear::new(d, 2 * d, std::f32::consts::SQRT_2, rng),
            mlp_out: Linear::new(2 * d, d, 1.0, rng),
            ln_f: LayerNorm::new(d),
            head: Linear::new(d, input.classes, 1.0, rng),
        }
    }

    /// (n, h*w*3) images to (n*tokens, 48) patch rows.
    fn patchify(x: &Array2<f32>, input: InputShape) -> Array2<f32> {
        let (ph, pw) = (input.height / PATCH, input.width / PATCH);
        let mut out = Array2::zeros((x.nrows() * ph * pw, PATCH * PATCH * 3));
        for (b, img) in x.rows().into_iter().enumerate() {
            for py in 0..ph {
                for px in 0..pw {
                    let mut row = out.row_mut((b * ph + py) * pw + px);
                    let mut k = 0;
                    for y in 0..PATCH {
                        for xx in 0..PATCH {
                            let base = ((py * PATCH + y) * input.width + px * PATCH + xx) * 3;
                            for c in 0..3 {
                                row[k] = img[base + c];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn forward(&self, x: &Array2<f32>, input: InputShape) -> (Array2<f32>, AttnCache) {
        let tokens = Self::tokens(input);
        let n = x.nrows();
        let patches = Self::patchify(x, input);
        let mut t0 = self.embed.forward(&patches.view());
        for b in 0..n {
            let mut block = t0.slice_mut(ndarray::s![b * tokens..(b + 1) * tokens, ..]);
            block += &self.pos.value;
        }
        let (n1, ln1) = self.ln1.forward(&t0);
        let (a, attn) = self.attn.forward(&n1, tokens);
        let t1 = &t0 + &a;
        let (n2, ln2) = self.ln2.forward(&t1);
        let hidden = relu(&self.mlp_in.forward(&n2.view()));
        let t2 = &t1 + &self.mlp_out.forward(&hidden.view());
        let (nf, lnf) = self.ln_f.forward(&t2);
        let pooled = group_mean(&nf, tokens);
        let logits = self.head.forward(&pooled.view());
        let cache = AttnCache {
            patches,
            ln1,
            n1,
            attn,
            ln2,
            n2,
            hidden,
            lnf,
            pooled,
        };
        (logits, cache)
    }

    fn backward(&mut self, c: &AttnCache, dlogits: &Array2<f32>, input: InputShape) {
        let tokens = Self::tokens(input);
        let dpooled = self.head.backward(&c.pooled.view(), dlogits, true);
        let dnf = group_mean_backward(&dpooled, tokens);
        let mut dt2 = self.ln_f.backward(&c.lnf, &dnf, true);
        let dhidden = self.mlp_out.backward(&c.hidden.view(), &dt2, true);
        let dpre = relu_backward(&c.hidden, &dhidden);
        let dn2 = self.mlp_in.backward(&c.n2.view(), &dpre, true);
        dt2 += &self.ln2.backward(&c.ln2, &dn2, true);
        let dt1 = dt2;
        let dn1 = self.attn.backward(&c.n1, &c.attn, &dt1, tokens);
        let mut dt0 = dt1;
        dt0 += &self.ln1.backward(&c.ln1, &dn1, true);
        let n = dt0.nrows() / tokens;
        for b in 0..n {
            self.pos.grad += &dt0.slice(ndarray::s![b * tokens..(b + 1) * tokens, ..]);
        }
        self.embed.backward(&c.patches.view(), &dt0, true);
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = Vec::new();
        v.extend(self.embed.params_mut());
        v.push(&mut self.pos);
        v.extend(self.ln1.params_mut());
        v.extend(self.attn.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.mlp_in.params_mut());
        v.extend(self.mlp_out.params_mut());
        v.extend(self.ln_f.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = Vec::new();
        v.extend(self.embed.params());
        v.push(&self.pos);
        v.extend(self.ln1.params());
        v.extend(self.attn.params());
        v.extend(self.ln2.params());
        v.extend(self.mlp_in.params());
        v.extend(self.mlp_out.params());
        v.extend(self.ln_f.params());
        v.extend(self.head.params());
        v
    }
}

#[derive(Debug, Clone)]
enum Body {
    Conv(ConvNet),
    Attn(AttnNet),
}

/// A registry architecture with its weights.
#[derive(Debug, Clone)]
pub struct Classifier {
    arch_id: String,
    input: InputShape,
    body: Body,
}

impl Classifier {
    /// Build `arch_id` with seeded random weights.
    pub fn new(arch_id: &str, input: InputShape, seed: u64) -> Result<Self> {
        if input.classes < 2 {
            return Err(Error::config("a classifier needs at least two classes"));
        }
        let rng = &mut seed::rng(seed, "classifier-init", 0);
        let body = match arch_id {
            CNN_COMPACT => {
                check_even(input, 1)?;
                Body::Conv(ConvNet::new(input, &[8, 16], &[true, false], rng))
            }
            CNN_WIDE => {
                check_even(input, 2)?;
                Body::Conv(ConvNet::new(
                    input,
                    &[16, 32, 32],
                    &[true, true, false],
                    rng,
                ))
            }
            ATTN_TINY => {
                if input.height % PATCH != 0 || input.width % PATCH != 0 {
                    return Err(Error::config(format!(
                        "{ATTN_TINY} needs image sides divisible by {PATCH}, got {}x{}",
                        input.width, input.height
                    )));
                }
                Body::Attn(AttnNet::new(input, rng))
            }
            other => {
                return Err(Error::config(format!(
                    "unknown architecture '{other}' (known: {})",
                    DEFAULT_ARCHITECTURES.join(", ")
                )))
            }
        };
        Ok(Self {
            arch_id: arch_id.to_string(),
            input,
            body,
        })
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn logits(&self, x: &Array2<f32>) -> Array2<f32> {
        match &self.body {
            Body::Conv(net) => net.forward(x, self.input).0,
            Body::Attn(net) => net.forward(x, self.input).0,
        }
    }

    /// Forward and backward on one batch; gradients accumulate into the
    /// parameters. Returns the mean cross-entropy.
    pub fn accumulate_gradients(&mut self, x: &Array2<f32>, labels: &[usize]) -> f32 {
        let input = self.input;
        match &mut self.body {
            Body::Conv(net) => {
                let (logits, cache) = net.forward(x, input);
                let (loss, d) = softmax_cross_entropy(&logits, labels);
                net.backward(&cache, &d);
                loss
            }
            Body::Attn(net) => {
                let (logits, cache) = net.forward(x, input);
                let (loss, d) = softmax_cross_entropy(&logits, labels);
                net.backward(&cache, &d, input);
                loss
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match &mut self.body {
            Body::Conv(net) => net.params_mut(),
            Body::Attn(net) => net.params_mut(),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match &self.body {
            Body::Conv(net) => net.params(),
            Body::Attn(net) => net.params(),
        }
    }

    pub fn snapshot(&self) -> Vec<Array2<f32>> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Array2<f32>]) {
        for (p, v) in self.params_mut().into_iter().zip(snapshot) {
            p.value.assign(v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    pub fn write_to(&self, ar: &mut Archive, prefix: &str) {
        for (i, p) in self.params().iter().enumerate() {
            ar.push(
                format!("{prefix}/{i}"),
                &p.shape(),
                p.value.as_slice().expect("standard layout"),
            );
        }
    }

    pub fn read_from(ar: &Archive, prefix: &str, arch_id: &str, input: InputShape) -> Result<Self> {
        let mut net = Self::new(arch_id, input, 0)?;
        for (i, p) in net.params_mut().into_iter().enumerate() {
            let data = ar.get_shaped(&format!("{prefix}/{i}"), &p.shape())?;
            p.load(data);
        }
        Ok(net)
    }
}

fn check_even(input: InputShape, pools: u32) -> Result<()> {
    let m = 1usize << pools;
    if input.height % m != 0 || input.width % m != 0 {
        return Err(Error::config(format!(
            "image sides must be divisible by {m}, got {}x{}",
            input.width, input.height
        )));
    }
    Ok(())
}

/// Row-wise softmax in f64, so rows sum to 1 well within 1e-6.
pub fn probabilities(logits: &Array2<f32>) -> Array2<f64> {
    let mut out = logits.mapv(|v| v as f64);
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}
