//! The denoiser `f(x_t, t, c) -> x0_hat`.
//!
//! A stack of gated residual 1D convolutions over the 88-channel roll:
//!
//! ```text
//! h   = relu(W_in x_t)                                  (1x1 conv, 88 -> C)
//! for each layer l:
//!     y   = h + W_t,l e(t) + W_mel,l c                  (time and mel projections)
//!     z   = conv_k,d(y)                                 (C -> 2C, same padding)
//!     g   = tanh(z_a) * sigmoid(z_b)
//!     o   = W_o,l g                                     (1x1 conv, C -> 2C)
//!     h   = (h + o_res) / sqrt(2);  skip += o_skip
//! x0  = W_out relu(W_skip skip / sqrt(L))               (W_out zero-initialized)
//! ```
//!
//! `e(t)` is a sinusoidal step encoding passed through two SiLU-activated
//! affine layers. Gradients are computed by hand; the model is generic over
//! `f32` (training and inference) and `f64` (gradient checking).

use std::f64::consts::FRAC_1_SQRT_2;

use ndarray::linalg::general_mat_mul;
use ndarray::{
    s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD,
    Axis, NdFloat, Zip,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::exec::{chunk_ranges, Execution};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub residual_channels: usize,
    pub num_layers: usize,
    pub kernel_size: usize,
    /// Dilation of layer `l` is `dilation_pattern[l % len]`.
    pub dilation_pattern: Vec<usize>,
    pub mel_bins: usize,
    pub roll_channels: usize,
    pub time_embedding_dim: usize,
    /// Largest valid diffusion step.
    pub diffusion_steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            residual_channels: 512,
            num_layers: 15,
            kernel_size: 9,
            dilation_pattern: vec![1],
            mel_bins: 229,
            roll_channels: 88,
            time_embedding_dim: 128,
            diffusion_steps: 200,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.kernel_size % 2 == 1,
            InvalidArgument,
            "kernel size must be odd, got {}",
            self.kernel_size
        );
        ensure!(
            !self.dilation_pattern.is_empty() && self.dilation_pattern.iter().all(|&d| d >= 1),
            InvalidArgument,
            "dilation pattern must be non-empty with entries >= 1"
        );
        ensure!(
            self.residual_channels > 0
                && self.num_layers > 0
                && self.mel_bins > 0
                && self.roll_channels > 0,
            InvalidArgument,
            "channel and layer counts must be positive"
        );
        ensure!(
            self.time_embedding_dim >= 4 && self.time_embedding_dim.is_multiple_of(2),
            InvalidArgument,
            "time embedding dim must be even and >= 4, got {}",
            self.time_embedding_dim
        );
        ensure!(
            self.diffusion_steps >= 1,
            InvalidArgument,
            "diffusion steps must be positive"
        );
        Ok(())
    }

    pub fn dilation(&self, layer: usize) -> usize {
        self.dilation_pattern[layer % self.dilation_pattern.len()]
    }

    /// Frames of input visible to one output frame.
    pub fn receptive_field(&self) -> usize {
        1 + (0..self.num_layers)
            .map(|l| (self.kernel_size - 1) * self.dilation(l))
            .sum::<usize>()
    }
}

/// Parameters of one residual layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualLayer<F> {
    pub time_w: Array2<F>,
    pub time_b: Array1<F>,
    pub mel_w: Array2<F>,
    pub mel_b: Array1<F>,
    /// `(kernel, 2C, C)`: one `2C x C` matrix per tap.
    pub conv_w: Array3<F>,
    pub conv_b: Array1<F>,
    pub out_w: Array2<F>,
    pub out_b: Array1<F>,
}

/// All learnable tensors. Gradients and optimizer moments use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<F> {
    pub input_w: Array2<F>,
    pub input_b: Array1<F>,
    pub time_fc1_w: Array2<F>,
    pub time_fc1_b: Array1<F>,
    pub time_fc2_w: Array2<F>,
    pub time_fc2_b: Array1<F>,
    pub layers: Vec<ResidualLayer<F>>,
    pub skip_w: Array2<F>,
    pub skip_b: Array1<F>,
    pub output_w: Array2<F>,
    pub output_b: Array1<F>,
}

impl<F: NdFloat> DenoiserParams<F> {
    pub fn zeros(cfg: &DenoiserConfig) -> Self {
        let c = cfg.residual_channels;
        let layer = || ResidualLayer {
            time_w: Array2::zeros((c, c)),
            time_b: Array1::zeros(c),
            mel_w: Array2::zeros((c, cfg.mel_bins)),
            mel_b: Array1::zeros(c),
            conv_w: Array3::zeros((cfg.kernel_size, 2 * c, c)),
            conv_b: Array1::zeros(2 * c),
            out_w: Array2::zeros((2 * c, c)),
            out_b: Array1::zeros(2 * c),
        };
        Self {
            input_w: Array2::zeros((c, cfg.roll_channels)),
            input_b: Array1::zeros(c),
            time_fc1_w: Array2::zeros((c, cfg.time_embedding_dim)),
            time_fc1_b: Array1::zeros(c),
            time_fc2_w: Array2::zeros((c, c)),
            time_fc2_b: Array1::zeros(c),
            layers: (0..cfg.num_layers).map(|_| layer()).collect(),
            skip_w: Array2::zeros((c, c)),
            skip_b: Array1::zeros(c),
            output_w: Array2::zeros((cfg.roll_channels, c)),
            output_b: Array1::zeros(cfg.roll_channels),
        }
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = vec![
            ("input.w".to_string(), self.input_w.view().into_dyn()),
            ("input.b".to_string(), self.input_b.view().into_dyn()),
            ("time.fc1.w".to_string(), self.time_fc1_w.view().into_dyn()),
            ("time.fc1.b".to_string(), self.time_fc1_b.view().into_dyn()),
            ("time.fc2.w".to_string(), self.time_fc2_w.view().into_dyn()),
            ("time.fc2.b".to_string(), self.time_fc2_b.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layers.{i}.time.w"), l.time_w.view().into_dyn()),
                (format!("layers.{i}.time.b"), l.time_b.view().into_dyn()),
                (format!("layers.{i}.mel.w"), l.mel_w.view().into_dyn()),
                (format!("layers.{i}.mel.b"), l.mel_b.view().into_dyn()),
                (format!("layers.{i}.conv.w"), l.conv_w.view().into_dyn()),
                (format!("layers.{i}.conv.b"), l.conv_b.view().into_dyn()),
                (format!("layers.{i}.out.w"), l.out_w.view().into_dyn()),
                (format!("layers.{i}.out.b"), l.out_b.view().into_dyn()),
            ]);
        }
        out.extend([
            ("skip.w".to_string(), self.skip_w.view().into_dyn()),
            ("skip.b".to_string(), self.skip_b.view().into_dyn()),
            ("output.w".to_string(), self.output_w.view().into_dyn()),
            ("output.b".to_string(), self.output_b.view().into_dyn()),
        ]);
        out
    }

    /// Mutable views in the same order as [`DenoiserParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        let mut out = vec![
            self.input_w.view_mut().into_dyn(),
            self.input_b.view_mut().into_dyn(),
            self.time_fc1_w.view_mut().into_dyn(),
            self.time_fc1_b.view_mut().into_dyn(),
            self.time_fc2_w.view_mut().into_dyn(),
            self.time_fc2_b.view_mut().into_dyn(),
        ];
        for l in &mut self.layers {
            out.extend([
                l.time_w.view_mut().into_dyn(),
                l.time_b.view_mut().into_dyn(),
                l.mel_w.view_mut().into_dyn(),
                l.mel_b.view_mut().into_dyn(),
                l.conv_w.view_mut().into_dyn(),
                l.conv_b.view_mut().into_dyn(),
                l.out_w.view_mut().into_dyn(),
                l.out_b.view_mut().into_dyn(),
            ]);
        }
        out.extend([
            self.skip_w.view_mut().into_dyn(),
            self.skip_b.view_mut().into_dyn(),
            self.output_w.view_mut().into_dyn(),
            self.output_b.view_mut().into_dyn(),
        ]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for (mut a, (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    /// `self *= k`.
    pub fn scale(&mut self, k: F) {
        for mut a in self.tensors_mut() {
            a.mapv_inplace(|v| v * k);
        }
    }

    /// Copies values element-wise in a fixed order, for serialization.
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (_, t) in self.tensors() {
            out.extend(t.iter().copied());
        }
        out
    }

    /// Inverse of [`DenoiserParams::flatten`].
    pub fn load_flat(&mut self, values: &[F]) -> Result<()> {
        ensure!(
            values.len() == self.num_parameters(),
            Shape,
            "expected {} parameters, got {}",
            self.num_parameters(),
            values.len()
        );
        let mut offset = 0;
        for mut t in self.tensors_mut() {
            let n = t.len();
            for (dst, &src) in t.iter_mut().zip(&values[offset..offset + n]) {
                *dst = src;
            }
            offset += n;
        }
        Ok(())
    }
}

/// A denoiser: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel<F> {
    config: DenoiserConfig,
    pub params: DenoiserParams<F>,
}

/// Anything that maps `(x_t, t, c)` batches to `x0_hat` batches.
///
/// Shapes: `x_t` is `(B, 88, frames)`, `t` has `B` entries, `c` is
/// `(B, mel_bins, frames)`.
pub trait Denoiser<F> {
    fn predict_x0(
        &self,
        x_t: ArrayView3<'_, F>,
        t: &[usize],
        c: ArrayView3<'_, F>,
    ) -> Result<Array3<F>>;
}

fn sigmoid<F: NdFloat>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn silu<F: NdFloat>(x: F) -> F {
    x * sigmoid(x)
}

fn silu_grad<F: NdFloat>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

fn cast<F: NdFloat>(v: f64) -> F {
    F::from(v).unwrap()
}

fn col<F: NdFloat>(b: &Array1<F>) -> ArrayView2<'_, F> {
    b.view().insert_axis(Axis(1))
}

/// `c = a . b` for fresh output.
fn matmul<F: NdFloat>(a: &ArrayView2<'_, F>, b: &ArrayView2<'_, F>) -> Array2<F> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(F::one(), a, b, F::zero(), &mut c);
    c
}

struct TimeCache<F> {
    encoding: Array1<F>,
    pre1: Array1<F>,
    hidden: Array1<F>,
    pre2: Array1<F>,
    embedding: Array1<F>,
}

struct LayerCache<F> {
    padded: Array2<F>,
    tanh: Array2<F>,
    gate: Array2<F>,
    gated: Array2<F>,
}

struct ForwardCache<F> {
    time: TimeCache<F>,
    input_pre: Array2<F>,
    layers: Vec<LayerCache<F>>,
    skip: Array2<F>,
    head_pre: Array2<F>,
    head: Array2<F>,
}

/// Sinusoidal encoding of a diffusion step: `[sin(t f_i), cos(t f_i)]` with
/// `f_i = 10^(4 i / (half - 1))`.
pub fn step_encoding<F: NdFloat>(t: usize, dim: usize) -> Array1<F> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = 10f64.powf(4.0 * i as f64 / (half - 1) as f64);
        let arg = t as f64 * freq;
        out[i] = cast(arg.sin());
        out[half + i] = cast(arg.cos());
    }
    out
}

impl<F: NdFloat> DenoiserModel<F> {
    /// Deterministic initialization from `seed`.
    ///
    /// Convolution weights are Kaiming-normal, dense weights and all biases
    /// uniform in `+-1/sqrt(fan_in)`, and the output projection is zero.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = DenoiserParams::zeros(&config);

        fn kaiming<F: NdFloat>(a: &mut ArrayViewMutD<'_, F>, fan_in: usize, rng: &mut ChaCha8Rng) {
            let std = (2.0 / fan_in as f64).sqrt();
            a.mapv_inplace(|_| {
                let z: f64 = StandardNormal.sample(rng);
                cast(z * std)
            });
        }
        fn uniform<F: NdFloat>(a: &mut ArrayViewMutD<'_, F>, fan_in: usize, rng: &mut ChaCha8Rng) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            a.mapv_inplace(|_| cast(rng.gen_range(-bound..bound)));
        }

        let c = config.residual_channels;
        let k = config.kernel_size;
        let p = &mut params;
        kaiming(&mut p.input_w.view_mut().into_dyn(), config.roll_channels, &mut rng);
        uniform(&mut p.input_b.view_mut().into_dyn(), config.roll_channels, &mut rng);
        uniform(&mut p.time_fc1_w.view_mut().into_dyn(), config.time_embedding_dim, &mut rng);
        uniform(&mut p.time_fc1_b.view_mut().into_dyn(), config.time_embedding_dim, &mut rng);
        uniform(&mut p.time_fc2_w.view_mut().into_dyn(), c, &mut rng);
        uniform(&mut p.time_fc2_b.view_mut().into_dyn(), c, &mut rng);
        for l in &mut p.layers {
            uniform(&mut l.time_w.view_mut().into_dyn(), c, &mut rng);
            uniform(&mut l.time_b.view_mut().into_dyn(), c, &mut rng);
            kaiming(&mut l.mel_w.view_mut().into_dyn(), config.mel_bins, &mut rng);
            uniform(&mut l.mel_b.view_mut().into_dyn(), config.mel_bins, &mut rng);
            kaiming(&mut l.conv_w.view_mut().into_dyn(), c * k, &mut rng);
            uniform(&mut l.conv_b.view_mut().into_dyn(), c * k, &mut rng);
            kaiming(&mut l.out_w.view_mut().into_dyn(), c, &mut rng);
            uniform(&mut l.out_b.view_mut().into_dyn(), c, &mut rng);
        }
        kaiming(&mut p.skip_w.view_mut().into_dyn(), c, &mut rng);
        uniform(&mut p.skip_b.view_mut().into_dyn(), c, &mut rng);
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking that their shapes fit `config`.
    pub fn from_params(config: DenoiserConfig, params: DenoiserParams<F>) -> Result<Self> {
        config.validate()?;
        let reference = DenoiserParams::<F>::zeros(&config);
        let same = reference
            .tensors()
            .iter()
            .zip(params.tensors())
            .all(|((_, a), (_, b))| a.shape() == b.shape())
            && reference.layers.len() == params.layers.len();
        ensure!(same, Shape, "parameter shapes do not match the configuration");
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    fn check_inputs(
        &self,
        x_t: &ArrayView3<'_, F>,
        t: &[usize],
        c: &ArrayView3<'_, F>,
    ) -> Result<()> {
        let cfg = &self.config;
        let (b, rows, frames) = x_t.dim();
        ensure!(
            rows == cfg.roll_channels,
            Shape,
            "x_t has {rows} channels, model expects {}",
            cfg.roll_channels
        );
        ensure!(
            c.dim() == (b, cfg.mel_bins, frames),
            Shape,
            "conditioner shape {:?} does not match ({b}, {}, {frames})",
            c.dim(),
            cfg.mel_bins
        );
        ensure!(t.len() == b, Shape, "{} steps for a batch of {b}", t.len());
        ensure!(frames > 0, Shape, "input has no frames");
        for &step in t {
            ensure!(
                (1..=cfg.diffusion_steps).contains(&step),
                InvalidArgument,
                "diffusion step {step} outside 1..={}",
                cfg.diffusion_steps
            );
        }
        Ok(())
    }

    fn time_forward(&self, t: usize) -> TimeCache<F> {
        let p = &self.params;
        let encoding = step_encoding::<F>(t, self.config.time_embedding_dim);
        let pre1 = p.time_fc1_w.dot(&encoding) + &p.time_fc1_b;
        let hidden = pre1.mapv(silu);
        let pre2 = p.time_fc2_w.dot(&hidden) + &p.time_fc2_b;
        let embedding = pre2.mapv(silu);
        TimeCache {
            encoding,
            pre1,
            hidden,
            pre2,
            embedding,
        }
    }

    /// Diffusion-step embeddings, one `C`-dim row per entry of `t`.
    pub fn time_embedding(&self, t: &[usize]) -> Result<Array2<F>> {
        let c = self.config.residual_channels;
        let mut out = Array2::zeros((t.len(), c));
        for (mut row, &step) in out.outer_iter_mut().zip(t) {
            ensure!(
                (1..=self.config.diffusion_steps).contains(&step),
                InvalidArgument,
                "diffusion step {step} outside 1..={}",
                self.config.diffusion_steps
            );
            row.assign(&self.time_forward(step).embedding);
        }
        Ok(out)
    }

    /// Forward pass for one batch element. Returns the cache when `keep`.
    fn forward_one(
        &self,
        x: ArrayView2<'_, F>,
        t: usize,
        c: ArrayView2<'_, F>,
        keep: bool,
    ) -> (Array2<F>, Option<ForwardCache<F>>) {
        let cfg = &self.config;
        let p = &self.params;
        let ch = cfg.residual_channels;
        let frames = x.ncols();
        let k = cfg.kernel_size;
        let inv_sqrt2: F = cast(FRAC_1_SQRT_2);

        let time = self.time_forward(t);

        let mut input_pre = matmul(&p.input_w.view(), &x);
        input_pre += &col(&p.input_b);
        let mut h = input_pre.mapv(|v| v.max(F::zero()));
        let mut skip = Array2::<F>::zeros((ch, frames));
        let mut layer_caches = Vec::with_capacity(if keep { cfg.num_layers } else { 0 });
        let mut z = Array2::<F>::zeros((2 * ch, frames));

        for (l, layer) in p.layers.iter().enumerate() {
            let dil = cfg.dilation(l);
            let pad = dil * (k - 1) / 2;
            let shift = p.layers[l].time_w.dot(&time.embedding) + &layer.time_b + &layer.mel_b;

            let mut padded = Array2::<F>::zeros((ch, frames + 2 * pad));
            {
                let mut centre = padded.slice_mut(s![.., pad..pad + frames]);
                centre.assign(&h);
                centre += &shift.view().insert_axis(Axis(1));
                general_mat_mul(F::one(), &layer.mel_w, &c, F::one(), &mut centre);
            }

            z.assign(&col(&layer.conv_b));
            for tap in 0..k {
                let window = padded.slice(s![.., tap * dil..tap * dil + frames]);
                general_mat_mul(
                    F::one(),
                    &layer.conv_w.index_axis(Axis(0), tap),
                    &window,
                    F::one(),
                    &mut z,
                );
            }
            let tanh = z.slice(s![..ch, ..]).mapv(|v| v.tanh());
            let gate = z.slice(s![ch.., ..]).mapv(sigmoid);
            let gated = &tanh * &gate;

            let mut o = matmul(&layer.out_w.view(), &gated.view());
            o += &col(&layer.out_b);
            Zip::from(&mut h)
                .and(o.slice(s![..ch, ..]))
                .for_each(|h, &r| *h = (*h + r) * inv_sqrt2);
            skip += &o.slice(s![ch.., ..]);

            if keep {
                layer_caches.push(LayerCache {
                    padded,
                    tanh,
                    gate,
                    gated,
                });
            }
        }

        skip.mapv_inplace(|v| v * cast(1.0 / (cfg.num_layers as f64).sqrt()));
        let mut head_pre = matmul(&p.skip_w.view(), &skip.view());
        head_pre += &col(&p.skip_b);
        let head = head_pre.mapv(|v| v.max(F::zero()));
        let mut out = matmul(&p.output_w.view(), &head.view());
        out += &col(&p.output_b);

        let cache = keep.then(|| ForwardCache {
            time,
            input_pre,
            layers: layer_caches,
            skip,
            head_pre,
            head,
        });
        (out, cache)
    }

    /// Accumulates parameter gradients of one element into `grads`.
    fn backward_one(
        &self,
        x: ArrayView2<'_, F>,
        c: ArrayView2<'_, F>,
        cache: &ForwardCache<F>,
        d_out: &Array2<F>,
        grads: &mut DenoiserParams<F>,
    ) {
        let cfg = &self.config;
        let p = &self.params;
        let ch = cfg.residual_channels;
        let frames = x.ncols();
        let k = cfg.kernel_size;
        let one = F::one();
        let inv_sqrt2: F = cast(FRAC_1_SQRT_2);

        general_mat_mul(one, d_out, &cache.head.t(), one, &mut grads.output_w);
        grads.output_b += &d_out.sum_axis(Axis(1));
        let mut d_head = matmul(&p.output_w.t(), &d_out.view());
        Zip::from(&mut d_head)
            .and(&cache.head_pre)
            .for_each(|d, &pre| {
                if pre <= F::zero() {
                    *d = F::zero();
                }
            });
        general_mat_mul(one, &d_head, &cache.skip.t(), one, &mut grads.skip_w);
        grads.skip_b += &d_head.sum_axis(Axis(1));
        let mut d_skip = matmul(&p.skip_w.t(), &d_head.view());
        d_skip.mapv_inplace(|v| v * cast(1.0 / (cfg.num_layers as f64).sqrt()));

        let temb = &cache.time.embedding;
        let mut d_temb = Array1::<F>::zeros(ch);
        let mut d_h = Array2::<F>::zeros((ch, frames));
        let mut d_o = Array2::<F>::zeros((2 * ch, frames));
        let mut d_z = Array2::<F>::zeros((2 * ch, frames));

        for l in (0..cfg.num_layers).rev() {
            let layer = &p.layers[l];
            let lc = &cache.layers[l];
            let g = &mut grads.layers[l];
            let dil = cfg.dilation(l);
            let pad = dil * (k - 1) / 2;

            d_h.mapv_inplace(|v| v * inv_sqrt2);
            d_o.slice_mut(s![..ch, ..]).assign(&d_h);
            d_o.slice_mut(s![ch.., ..]).assign(&d_skip);

            general_mat_mul(one, &d_o, &lc.gated.t(), one, &mut g.out_w);
            g.out_b += &d_o.sum_axis(Axis(1));
            let d_gated = matmul(&layer.out_w.t(), &d_o.view());

            Zip::from(d_z.slice_mut(s![..ch, ..]))
                .and(&d_gated)
                .and(&lc.tanh)
                .and(&lc.gate)
                .for_each(|dz, &dg, &th, &sg| *dz = dg * sg * (one - th * th));
            Zip::from(d_z.slice_mut(s![ch.., ..]))
                .and(&d_gated)
                .and(&lc.tanh)
                .and(&lc.gate)
                .for_each(|dz, &dg, &th, &sg| *dz = dg * th * sg * (one - sg));
            g.conv_b += &d_z.sum_axis(Axis(1));

            let mut d_padded = Array2::<F>::zeros((ch, frames + 2 * pad));
            for tap in 0..k {
                let range = tap * dil..tap * dil + frames;
                let window = lc.padded.slice(s![.., range.clone()]);
                let mut gw = g.conv_w.index_axis_mut(Axis(0), tap);
                general_mat_mul(one, &d_z, &window.t(), one, &mut gw);
                let mut dwin = d_padded.slice_mut(s![.., range]);
                general_mat_mul(
                    one,
                    &layer.conv_w.index_axis(Axis(0), tap).t(),
                    &d_z,
                    one,
                    &mut dwin,
                );
            }
            let d_y = d_padded.slice(s![.., pad..pad + frames]);

            // Residual path (already scaled) plus the path through y.
            d_h += &d_y;

            let d_shift = d_y.sum_axis(Axis(1));
            general_mat_mul(
                one,
                &d_shift.view().insert_axis(Axis(1)),
                &temb.view().insert_axis(Axis(0)),
                one,
                &mut g.time_w,
            );
            g.time_b += &d_shift;
            g.mel_b += &d_shift;
            d_temb += &layer.time_w.t().dot(&d_shift);
            general_mat_mul(one, &d_y, &c.t(), one, &mut g.mel_w);
        }

        Zip::from(&mut d_h)
            .and(&cache.input_pre)
            .for_each(|d, &pre| {
                if pre <= F::zero() {
                    *d = F::zero();
                }
            });
        general_mat_mul(one, &d_h, &x.t(), one, &mut grads.input_w);
        grads.input_b += &d_h.sum_axis(Axis(1));

        let tc = &cache.time;
        let d_pre2 = Zip::from(&d_temb)
            .and(&tc.pre2)
            .map_collect(|&d, &a| d * silu_grad(a));
        outer_acc(&mut grads.time_fc2_w, &d_pre2.view(), &tc.hidden.view());
        grads.time_fc2_b += &d_pre2;
        let d_hidden = p.time_fc2_w.t().dot(&d_pre2);
        let d_pre1 = Zip::from(&d_hidden)
            .and(&tc.pre1)
            .map_collect(|&d, &a| d * silu_grad(a));
        outer_acc(&mut grads.time_fc1_w, &d_pre1.view(), &tc.encoding.view());
        grads.time_fc1_b += &d_pre1;
    }

    /// Batched prediction with an explicit execution strategy.
    pub fn predict_x0_with(
        &self,
        exec: Execution,
        x_t: ArrayView3<'_, F>,
        t: &[usize],
        c: ArrayView3<'_, F>,
    ) -> Result<Array3<F>> {
        self.check_inputs(&x_t, t, &c)?;
        let (b, rows, frames) = x_t.dim();
        let outs = exec.map(b, |i| {
            self.forward_one(
                x_t.index_axis(Axis(0), i),
                t[i],
                c.index_axis(Axis(0), i),
                false,
            )
            .0
        });
        let mut out = Array3::zeros((b, rows, frames));
        for (mut dst, src) in out.outer_iter_mut().zip(outs) {
            dst.assign(&src);
        }
        Ok(out)
    }

    /// Mean squared error against `target` and its parameter gradient.
    ///
    /// Elements are split into one contiguous chunk per worker and chunk
    /// gradients are summed in chunk order, so the result depends only on the
    /// inputs and the worker count.
    pub fn loss_and_grad(
        &self,
        exec: Execution,
        x_t: ArrayView3<'_, F>,
        t: &[usize],
        c: ArrayView3<'_, F>,
        target: ArrayView3<'_, F>,
    ) -> Result<(F, DenoiserParams<F>)> {
        self.check_inputs(&x_t, t, &c)?;
        ensure!(
            target.dim() == x_t.dim(),
            Shape,
            "target {:?} does not match x_t {:?}",
            target.dim(),
            x_t.dim()
        );
        let b = x_t.dim().0;
        let count: F = cast(target.len() as f64);
        let two: F = cast(2.0);
        let chunks = chunk_ranges(b, exec.workers());
        let partial = exec.map(chunks.len(), |ci| {
            let mut grads = DenoiserParams::zeros(&self.config);
            let mut sq = F::zero();
            for i in chunks[ci].clone() {
                let x = x_t.index_axis(Axis(0), i);
                let cond = c.index_axis(Axis(0), i);
                let (out, cache) = self.forward_one(x, t[i], cond, true);
                let mut d_out = out - target.index_axis(Axis(0), i);
                sq += d_out.iter().fold(F::zero(), |acc, &d| acc + d * d);
                d_out.mapv_inplace(|d| two * d / count);
                self.backward_one(x, cond, cache.as_ref().unwrap(), &d_out, &mut grads);
            }
            (sq, grads)
        });
        let mut iter = partial.into_iter();
        let (mut sq, mut grads) = iter.next().expect("batch is non-empty");
        for (s, g) in iter {
            sq += s;
            grads.add_assign(&g);
        }
        Ok((sq / count, grads))
    }
}

fn outer_acc<F: NdFloat>(dst: &mut Array2<F>, a: &ArrayView1<'_, F>, b: &ArrayView1<'_, F>) {
    general_mat_mul(
        F::one(),
        &a.view().insert_axis(Axis(1)),
        &b.view().insert_axis(Axis(0)),
        F::one(),
        dst,
    );
}

impl<F: NdFloat> Denoiser<F> for DenoiserModel<F> {
    fn predict_x0(
        &self,
        x_t: ArrayView3<'_, F>,
        t: &[usize],
        c: ArrayView3<'_, F>,
    ) -> Result<Array3<F>> {
        self.predict_x0_with(Execution::default(), x_t, t, c)
    }
}
