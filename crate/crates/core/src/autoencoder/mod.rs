//! Convolutional autoencoder with an 8× spatial compression to 4 latent
//! channels, latent scaling and an on-disk latent cache.
//!
//! Images enter as `[3, H, W]` in `[−1, 1]`; use [`to_signed`] and
//! [`to_unit`] to move between that range and `[0, 1]`.

mod cache;

pub use cache::{cache_latents, load_latent, LatentCache};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{adam_step, derive_seed, AdamConfig, AdamState, Bound, ParamSet, Rng, Tape, Tensor, Var};

/// Latent channels.
pub const LATENT_CHANNELS: usize = 4;
/// Spatial compression factor.
pub const DOWNSAMPLE: usize = 8;

const LOGVAR_RANGE: (f64, f64) = (-30.0, 20.0);

/// A `[4, H/8, W/8]` latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor(Tensor<f32>);

impl LatentTensor {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        if t.rank() != 3 || t.shape()[0] != LATENT_CHANNELS {
            return Err(Error::InvalidShape {
                op: "latent",
                shape: t.shape().to_vec(),
                reason: format!("expected [{LATENT_CHANNELS}, h, w]"),
            });
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    /// `(h, w)` of the latent grid.
    pub fn spatial(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }
}

/// Maps `[0, 1]` to `[−1, 1]`.
pub fn to_signed(image: &Tensor<f32>) -> Tensor<f32> {
    image.map(|v| 2.0 * v - 1.0)
}

/// Maps `[−1, 1]` to `[0, 1]`, clamping.
pub fn to_unit(image: &Tensor<f32>) -> Tensor<f32> {
    image.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Peak signal-to-noise ratio in dB of two images in `[−1, 1]`
/// (peak-to-peak range 2).
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(10.0 * (4.0 / mse.max(1e-20)).log10())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    /// Channel widths of the three downsampling stages.
    pub widths: [usize; 3],
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { widths: [32, 64, 128] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    Mean,
    /// Reparameterized sample `μ + σ·ε` with `ε` drawn from the seed.
    Sample(u64),
}

/// Trained autoencoder weights and the latent scaling factor `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams {
    pub config: VaeConfig,
    pub params: ParamSet,
    pub scale: f32,
}

struct Layer {
    name: &'static str,
    kind: LayerKind,
    cin: usize,
    cout: usize,
    k: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum LayerKind {
    Conv { stride: usize, pad: usize },
    Up,
}

fn encoder_layers(w: [usize; 3]) -> Vec<Layer> {
    let conv = |name, cin, cout, k, stride, pad| Layer {
        name,
        kind: LayerKind::Conv { stride, pad },
        cin,
        cout,
        k,
    };
    vec![
        conv("enc.stem", 3, w[0], 3, 1, 1),
        conv("enc.down0", w[0], w[0], 4, 2, 1),
        conv("enc.down1", w[0], w[1], 4, 2, 1),
        conv("enc.down2", w[1], w[2], 4, 2, 1),
        conv("enc.head", w[2], 2 * LATENT_CHANNELS, 3, 1, 1),
    ]
}

fn decoder_layers(w: [usize; 3]) -> Vec<Layer> {
    let conv = |name, cin, cout| Layer {
        name,
        kind: LayerKind::Conv { stride: 1, pad: 1 },
        cin,
        cout,
        k: 3,
    };
    let up = |name, cin, cout| Layer {
        name,
        kind: LayerKind::Up,
        cin,
        cout,
        k: 4,
    };
    vec![
        conv("dec.in", LATENT_CHANNELS, w[2]),
        up("dec.up0", w[2], w[1]),
        up("dec.up1", w[1], w[0]),
        up("dec.up2", w[0], w[0]),
        conv("dec.out", w[0], 3),
    ]
}

impl VaeParams {
    /// He-normal weights, zero biases, `scale = 1`.
    pub fn init(config: VaeConfig, seed: u64) -> Self {
        let mut rng = Rng::new(derive_seed(seed, 0x7ae));
        let mut params = ParamSet::new();
        for l in encoder_layers(config.widths).into_iter().chain(decoder_layers(config.widths)) {
            let (shape, fan_in) = match l.kind {
                LayerKind::Conv { .. } => ([l.cout, l.cin, l.k, l.k], l.cin * l.k * l.k),
                LayerKind::Up => ([l.cin, l.cout, l.k, l.k], l.cin * l.k * l.k / 4),
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let w = rng.normal_tensor::<f32>(shape).map(|v| v * std as f32);
            params.insert(format!("{}.w", l.name), w);
            params.insert(format!("{}.b", l.name), Tensor::zeros([l.cout]));
        }
        Self {
            config,
            params,
            scale: 1.0,
        }
    }

    /// Encodes one image `[3, H, W]`.
    pub fn encode(&self, x: &Tensor<f32>, mode: EncodeMode) -> Result<LatentTensor> {
        check_image(x)?;
        let batch = x.clone().reshaped([1, 3, x.shape()[1], x.shape()[2]])?;
        let z = self.encode_batch(&batch, mode)?;
        let s = z.shape()[1..].to_vec();
        LatentTensor::new(z.reshaped(s)?)
    }

    /// Encodes `[N, 3, H, W]` to `[N, 4, H/8, W/8]`. In sample mode each item
    /// draws noise from `derive_seed(seed, index)`.
    pub fn encode_batch(&self, x: &Tensor<f32>, mode: EncodeMode) -> Result<Tensor<f32>> {
        check_batch(x)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let (mean, logvar) = encoder_graph(&bound, self.config.widths, tape.constant(x.clone()))?;
        match mode {
            EncodeMode::Mean => Ok((*mean.value()).clone()),
            EncodeMode::Sample(seed) => {
                let eps = batch_noise(&mean.shape(), seed);
                let z = reparameterize(mean, logvar, tape.constant(eps))?;
                Ok((*z.value()).clone())
            }
        }
    }

    /// Decodes one latent to `[3, 8h, 8w]` in `[−1, 1]`.
    pub fn decode(&self, z: &LatentTensor) -> Result<Tensor<f32>> {
        let (h, w) = z.spatial();
        let x = self.decode_batch(&z.tensor().clone().reshaped([1, LATENT_CHANNELS, h, w])?)?;
        x.reshaped([3, h * DOWNSAMPLE, w * DOWNSAMPLE])
    }

    pub fn decode_batch(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        if z.rank() != 4 || z.shape()[1] != LATENT_CHANNELS {
            return Err(Error::InvalidShape {
                op: "decode",
                shape: z.shape().to_vec(),
                reason: format!("expected [N, {LATENT_CHANNELS}, h, w]"),
            });
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let x = decoder_graph(&bound, self.config.widths, tape.constant(z.clone()))?;
        Ok((*x.value()).clone())
    }

    /// `s·z`.
    pub fn scale_latent(&self, z: &Tensor<f32>) -> Tensor<f32> {
        scale_latent(z, self.scale)
    }

    /// `z/s`.
    pub fn unscale_latent(&self, z: &Tensor<f32>) -> Tensor<f32> {
        unscale_latent(z, self.scale)
    }
}

fn check_image(x: &Tensor<f32>) -> Result<()> {
    let s = x.shape();
    if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(DOWNSAMPLE) || !s[2].is_multiple_of(DOWNSAMPLE) || s[1] == 0 || s[2] == 0 {
        return Err(Error::InvalidShape {
            op: "encode",
            shape: s.to_vec(),
            reason: format!("expected [3, H, W] with H and W positive multiples of {DOWNSAMPLE}"),
        });
    }
    Ok(())
}

fn check_batch(x: &Tensor<f32>) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op: "encode",
            shape: s.to_vec(),
            reason: "expected [N, 3, H, W]".into(),
        });
    }
    check_image(&Tensor::zeros(s[1..].to_vec()))
}

fn batch_noise(shape: &[usize], seed: u64) -> Tensor<f32> {
    let per = shape[1..].iter().product::<usize>();
    let mut data = Vec::with_capacity(shape[0] * per);
    for i in 0..shape[0] {
        data.extend(Rng::new(derive_seed(seed, i as u64)).normal_tensor::<f32>([per]).into_data());
    }
    Tensor::new(shape.to_vec(), data).expect("noise length matches shape")
}

fn apply<'t>(bound: &Bound<'t, '_>, layer: &Layer, x: Var<'t>) -> Result<Var<'t>> {
    let w = bound.get(&format!("{}.w", layer.name))?;
    let b = bound.get(&format!("{}.b", layer.name))?;
    match layer.kind {
        LayerKind::Conv { stride, pad } => x.conv2d(w, Some(b), stride, pad),
        LayerKind::Up => x.transposed_conv2d(w, Some(b), 2, 1),
    }
}

/// Returns `(mean, clamped log-variance)`, each `[N, 4, h, w]`.
fn encoder_graph<'t>(bound: &Bound<'t, '_>, widths: [usize; 3], x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let layers = encoder_layers(widths);
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = apply(bound, l, h)?;
        if i + 1 < layers.len() {
            h = h.silu()?;
        }
    }
    let mean = h.slice(1, 0, LATENT_CHANNELS)?;
    let logvar = h.slice(1, LATENT_CHANNELS, 2 * LATENT_CHANNELS)?.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1)?;
    Ok((mean, logvar))
}

fn decoder_graph<'t>(bound: &Bound<'t, '_>, widths: [usize; 3], z: Var<'t>) -> Result<Var<'t>> {
    let layers = decoder_layers(widths);
    let mut h = z;
    for (i, l) in layers.iter().enumerate() {
        h = apply(bound, l, h)?;
        h = if i + 1 < layers.len() { h.silu()? } else { h.tanh()? };
    }
    Ok(h)
}

fn reparameterize<'t>(mean: Var<'t>, logvar: Var<'t>, eps: Var<'t>) -> Result<Var<'t>> {
    mean.add(logvar.scalar_scale(0.5)?.exp()?.mul(eps)?)
}

/// `s = 1 / std` of all latent elements pooled.
pub fn compute_scale_factor(latents: &[Tensor<f32>]) -> Result<f32> {
    let n: usize = latents.iter().map(Tensor::numel).sum();
    if n < 2 {
        return Err(Error::invalid("scale factor needs at least two latent values"));
    }
    let values = || latents.iter().flat_map(|t| t.data().iter().map(|&v| v as f64));
    let mean = values().sum::<f64>() / n as f64;
    let var = values().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if var.is_nan() || var <= 1e-24 {
        return Err(Error::invalid("latents have zero variance; scale factor undefined"));
    }
    Ok((1.0 / var.sqrt()) as f32)
}

pub fn scale_latent(z: &Tensor<f32>, s: f32) -> Tensor<f32> {
    z.map(|v| v * s)
}

pub fn unscale_latent(z: &Tensor<f32>, s: f32) -> Tensor<f32> {
    z.map(|v| v / s)
}

/// Autoencoder training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the per-element mean KL term against `N(0, I)`.
    pub kl_weight: f64,
    pub seed: u64,
    /// Latents sampled (mean mode) to estimate the scale factor.
    pub scale_samples: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 14,
            batch_size: 16,
            lr: 2e-3,
            kl_weight: 1e-6,
            seed: 0,
            scale_samples: 256,
        }
    }
}

/// Losses recorded by [`train_vae`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VaeHistory {
    /// Total loss per optimizer step.
    pub loss: Vec<f64>,
    /// Reconstruction MSE per optimizer step.
    pub recon: Vec<f64>,
}

/// One optimizer step's loss on `batch` `[N, 3, H, W]`.
///
/// Returns `(total, reconstruction mse)`; when `grads_out` is given it
/// receives parameter gradients in `params` order.
pub fn vae_loss(
    vae: &VaeParams,
    batch: &Tensor<f32>,
    kl_weight: f64,
    noise_seed: u64,
    grads_out: Option<&mut Vec<Tensor<f32>>>,
) -> Result<(f64, f64)> {
    check_batch(batch)?;
    let tape = Tape::new();
    let bound = vae.params.bind(&tape, grads_out.is_some());
    let x = tape.constant(batch.clone());
    let (mean, logvar) = encoder_graph(&bound, vae.config.widths, x)?;
    let eps = tape.constant(batch_noise(&mean.shape(), noise_seed));
    let z = reparameterize(mean, logvar, eps)?;
    let recon = decoder_graph(&bound, vae.config.widths, z)?.mse_loss(x)?;
    let loss = if kl_weight == 0.0 {
        recon
    } else {
        // 0.5·(μ² + σ² − 1 − log σ²), averaged over latent elements.
        let kl = mean
            .mul(mean)?
            .add(logvar.exp()?)?
            .sub(logvar)?
            .add_scalar(-1.0)?
            .mean()?
            .scalar_scale(0.5)?;
        recon.add(kl.scalar_scale(kl_weight)?)?
    };
    if let Some(out) = grads_out {
        let mut g = tape.backward(loss)?;
        *out = bound.grads(&mut g);
    }
    Ok((loss.value().item() as f64, recon.value().item() as f64))
}

/// Stacks `[3, H, W]` items selected by `indices` into `[N, 3, H, W]`.
pub fn gather_batch(images: &[Tensor<f32>], indices: &[usize]) -> Result<Tensor<f32>> {
    let items: Vec<Tensor<f32>> = indices.iter().map(|&i| images[i].clone()).collect();
    Tensor::stack(&items)
}

/// Trains from `init` on images in `[−1, 1]` and sets the scale factor from
/// mean-mode latents of the first `scale_samples` images.
pub fn train_vae_from(
    mut vae: VaeParams,
    images: &[Tensor<f32>],
    config: &VaeTrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(VaeParams, VaeHistory)> {
    if images.is_empty() {
        return Err(Error::invalid("cannot train the autoencoder on an empty dataset"));
    }
    for x in images {
        check_image(x)?;
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        vae.params.tensors(),
    );
    let mut history = VaeHistory::default();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut step = 0usize;
    let mut grads = Vec::new();
    for epoch in 0..config.epochs {
        Rng::new(derive_seed(config.seed, epoch as u64)).shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let batch = gather_batch(images, chunk)?;
            let seed = derive_seed(config.seed ^ 0x5eed, step as u64);
            let (loss, recon) = vae_loss(&vae, &batch, config.kl_weight, seed, Some(&mut grads))?;
            adam_step(&mut vae.params.tensors_mut(), &grads, &mut adam)?;
            history.loss.push(loss);
            history.recon.push(recon);
            on_step(step, loss);
            step += 1;
        }
    }
    let take = config.scale_samples.clamp(1, images.len());
    let mut latents = Vec::with_capacity(take);
    for chunk in (0..take).collect::<Vec<_>>().chunks(32) {
        latents.push(vae.encode_batch(&gather_batch(images, chunk)?, EncodeMode::Mean)?);
    }
    vae.scale = compute_scale_factor(&latents)?;
    Ok((vae, history))
}

/// [`train_vae_from`] starting at a fresh initialization.
pub fn train_vae(images: &[Tensor<f32>], vae_config: VaeConfig, config: &VaeTrainConfig) -> Result<(VaeParams, VaeHistory)> {
    train_vae_from(VaeParams::init(vae_config, config.seed), images, config, |_, _| {})
}
