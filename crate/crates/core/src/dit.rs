//! Diffusion transformer noise predictor with adaLN-Zero conditioning.
//!
//! Input latents `[N, C, h, w]` (C = 8 with a mask latent concatenated, 4
//! without) are cut into `p×p` patches, embedded, passed through `depth`
//! residual blocks whose layer norms are modulated by the timestep
//! embedding, and projected back to `[N, 4, h, w]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{concat, derive_seed, Bound, ParamSet, Rng, Tape, Tensor, Var, LN_EPS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiTConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    /// 8 for mask-conditioned models, 4 for unconditional ones.
    pub in_channels: usize,
    pub out_channels: usize,
    /// Latent grid `(h, w)` the positional table is sized for.
    pub latent_size: [usize; 2],
    pub mlp_ratio: usize,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
    /// Largest valid timestep.
    pub max_t: usize,
}

impl DiTConfig {
    /// Named presets: `paper-256`, `paper-512`, `desk-64`.
    pub fn preset(name: &str, conditional: bool) -> Result<Self> {
        let (depth, dim, heads, latent) = match name {
            "paper-256" => (12, 768, 12, 32),
            "paper-512" => (12, 768, 12, 64),
            "desk-64" => (4, 128, 4, 8),
            _ => {
                return Err(Error::invalid(format!(
                    "unknown preset {name:?}; expected paper-256, paper-512 or desk-64"
                )))
            }
        };
        Ok(Self {
            depth,
            dim,
            heads,
            patch: 2,
            in_channels: if conditional { 8 } else { 4 },
            out_channels: 4,
            latent_size: [latent, latent],
            mlp_ratio: 4,
            freq_dim: 256,
            max_t: 1000,
        })
    }

    pub fn conditional(&self) -> bool {
        self.in_channels == 8
    }

    pub fn tokens(&self) -> usize {
        (self.latent_size[0] / self.patch) * (self.latent_size[1] / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.patch == 0 || self.mlp_ratio == 0 {
            return bad("depth, dim, heads, patch and mlp_ratio must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.latent_size.iter().any(|&s| s == 0 || s % self.patch != 0) {
            return bad(format!("latent size {:?} is not divisible by patch {}", self.latent_size, self.patch));
        }
        if self.in_channels != 4 && self.in_channels != 8 {
            return bad(format!("in_channels must be 4 or 8, got {}", self.in_channels));
        }
        if self.out_channels != 4 {
            return bad(format!("out_channels must be 4, got {}", self.out_channels));
        }
        if self.freq_dim < 2 || !self.freq_dim.is_multiple_of(2) || self.max_t == 0 {
            return bad("freq_dim must be even and max_t positive".into());
        }
        Ok(())
    }
}

/// Noise predictor weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DiTParams {
    pub config: DiTConfig,
    pub params: ParamSet,
}

fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor<f32> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn([fan_in, fan_out], |_| rng.uniform_range(-a, a) as f32)
}

/// 2-D sin-cos table `[gh·gw, dim]`: half the channels encode the row,
/// half the column.
pub fn sincos_position_table(gh: usize, gw: usize, dim: usize) -> Tensor<f32> {
    let quarter = dim / 4;
    let mut t = Tensor::zeros([gh * gw, dim]);
    let d = t.data_mut();
    for y in 0..gh {
        for x in 0..gw {
            let row = &mut d[(y * gw + x) * dim..(y * gw + x + 1) * dim];
            for (half, pos) in [(0, y), (1, x)] {
                for i in 0..quarter {
                    let omega = 1.0 / 10_000f64.powf(i as f64 / quarter.max(1) as f64);
                    let a = pos as f64 * omega;
                    row[half * 2 * quarter + i] = a.sin() as f32;
                    row[half * 2 * quarter + quarter + i] = a.cos() as f32;
                }
            }
        }
    }
    t
}

impl DiTParams {
    /// Xavier-uniform linears, sin-cos initialized positional table, and
    /// zeros for every modulation projection and the output head.
    pub fn init(config: DiTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(derive_seed(seed, 0xd17));
        let (d, p2) = (config.dim, config.patch * config.patch);
        let mut ps = ParamSet::new();
        ps.insert("x_embed.w", xavier(&mut rng, config.in_channels * p2, d));
        ps.insert("x_embed.b", Tensor::zeros([d]));
        let [h, w] = config.latent_size;
        ps.insert("pos", sincos_position_table(h / config.patch, w / config.patch, d));
        let small = |rng: &mut Rng, shape: [usize; 2]| rng.normal_tensor::<f32>(shape).map(|v| v * 0.02);
        ps.insert("t_embed.0.w", small(&mut rng, [config.freq_dim, d]));
        ps.insert("t_embed.0.b", Tensor::zeros([d]));
        ps.insert("t_embed.2.w", small(&mut rng, [d, d]));
        ps.insert("t_embed.2.b", Tensor::zeros([d]));
        let hidden = d * config.mlp_ratio;
        for i in 0..config.depth {
            let b = format!("blocks.{i}");
            ps.insert(format!("{b}.attn.qkv.w"), xavier(&mut rng, d, 3 * d));
            ps.insert(format!("{b}.attn.qkv.b"), Tensor::zeros([3 * d]));
            ps.insert(format!("{b}.attn.proj.w"), xavier(&mut rng, d, d));
            ps.insert(format!("{b}.attn.proj.b"), Tensor::zeros([d]));
            ps.insert(format!("{b}.mlp.fc1.w"), xavier(&mut rng, d, hidden));
            ps.insert(format!("{b}.mlp.fc1.b"), Tensor::zeros([hidden]));
            ps.insert(format!("{b}.mlp.fc2.w"), xavier(&mut rng, hidden, d));
            ps.insert(format!("{b}.mlp.fc2.b"), Tensor::zeros([d]));
            ps.insert(format!("{b}.ada.w"), Tensor::zeros([d, 6 * d]));
            ps.insert(format!("{b}.ada.b"), Tensor::zeros([6 * d]));
        }
        ps.insert("final.ada.w", Tensor::zeros([d, 2 * d]));
        ps.insert("final.ada.b", Tensor::zeros([2 * d]));
        let out = config.out_channels * p2;
        ps.insert("final.linear.w", Tensor::zeros([d, out]));
        ps.insert("final.linear.b", Tensor::zeros([out]));
        Ok(Self { config, params: ps })
    }

    /// Predicts noise for one latent `[4, h, w]`, an optional mask latent of
    /// the same shape, and timestep `t`.
    pub fn predict_noise(&self, z_t: &Tensor<f32>, mask: Option<&Tensor<f32>>, t: usize) -> Result<Tensor<f32>> {
        let one = |x: &Tensor<f32>| {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.clone().reshaped(s)
        };
        let m = mask.map(one).transpose()?;
        let out = self.predict_noise_batch(&one(z_t)?, m.as_ref(), &[t])?;
        let s = out.shape()[1..].to_vec();
        out.reshaped(s)
    }

    /// Batched [`predict_noise`](Self::predict_noise) with per-item timesteps.
    pub fn predict_noise_batch(&self, z_t: &Tensor<f32>, mask: Option<&Tensor<f32>>, ts: &[usize]) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let m = mask.map(|m| tape.constant(m.clone()));
        let out = forward(&bound, &self.config, tape.constant(z_t.clone()), m, ts)?;
        Ok((*out.value()).clone())
    }
}

/// Stacks `z_t` and the mask latent along channels: `[4, h, w] × 2 → [8, h, w]`.
pub fn concat_condition(z_t: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    if z_t.rank() != 3 || z_t.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "concat_condition",
            lhs: z_t.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let mut data = z_t.data().to_vec();
    data.extend_from_slice(mask.data());
    let mut shape = z_t.shape().to_vec();
    shape[0] *= 2;
    Tensor::new(shape, data)
}

fn patch_dims(shape: &[usize], p: usize) -> Result<(usize, usize, usize, usize, usize)> {
    if shape.len() != 4 || p == 0 || !shape[2].is_multiple_of(p) || !shape[3].is_multiple_of(p) {
        return Err(Error::InvalidShape {
            op: "patchify",
            shape: shape.to_vec(),
            reason: format!("expected [N, C, h, w] with h and w divisible by {p}"),
        });
    }
    Ok((shape[0], shape[1], shape[2] / p, shape[3] / p, p))
}

/// `[N, C, h, w] → [N, (h/p)·(w/p), C·p²]`, patches in row-major order and
/// features ordered `(c, dy, dx)`.
pub fn patchify_var<'t>(u: Var<'t>, p: usize) -> Result<Var<'t>> {
    let (n, c, gh, gw, p) = patch_dims(&u.shape(), p)?;
    u.reshape([n, c, gh, p, gw, p])?
        .transpose(&[0, 2, 4, 1, 3, 5])?
        .reshape([n, gh * gw, c * p * p])
}

/// Inverse of [`patchify_var`] for `c` channels on an `h×w` grid.
pub fn unpatchify_var<'t>(tokens: Var<'t>, c: usize, h: usize, w: usize, p: usize) -> Result<Var<'t>> {
    let s = tokens.shape();
    let (_, _, gh, gw, p) = patch_dims(&[1, c, h, w], p)?;
    if s.len() != 3 || s[1] != gh * gw || s[2] != c * p * p {
        return Err(Error::InvalidShape {
            op: "unpatchify",
            shape: s,
            reason: format!("expected [N, {}, {}]", gh * gw, c * p * p),
        });
    }
    tokens
        .reshape([s[0], gh, gw, c, p, p])?
        .transpose(&[0, 3, 1, 4, 2, 5])?
        .reshape([s[0], c, h, w])
}

/// Single-image patchify: `[C, h, w] → [(h/p)·(w/p), C·p²]`.
pub fn patchify(u: &Tensor<f32>, p: usize) -> Result<Tensor<f32>> {
    if u.rank() != 3 {
        return Err(Error::InvalidShape {
            op: "patchify",
            shape: u.shape().to_vec(),
            reason: "expected [C, h, w]".into(),
        });
    }
    let tape = Tape::new();
    let mut s = vec![1];
    s.extend_from_slice(u.shape());
    let v = patchify_var(tape.constant(u.clone().reshaped(s)?), p)?;
    let out = (*v.value()).clone();
    let s = out.shape()[1..].to_vec();
    out.reshaped(s)
}

/// Single-image inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor<f32>, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor<f32>> {
    let tape = Tape::new();
    let mut s = vec![1];
    s.extend_from_slice(tokens.shape());
    let v = unpatchify_var(tape.constant(tokens.clone().reshaped(s)?), c, h, w, p)?;
    (*v.value()).clone().reshaped([c, h, w])
}

/// Sinusoidal features of `t`: `[cos(t·ω_i), sin(t·ω_i)]` with
/// `ω_i = 10⁴^(−i/half)`, so frequencies run geometrically from 1 down
/// toward 10⁻⁴.
pub fn timestep_features(t: usize, dim: usize) -> Tensor<f32> {
    let half = dim / 2;
    let mut v = vec![0f32; dim];
    for i in 0..half {
        let omega = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * omega;
        v[i] = a.cos() as f32;
        v[half + i] = a.sin() as f32;
    }
    Tensor::new([dim], v).expect("length matches")
}

fn check_t(t: usize, max_t: usize) -> Result<()> {
    if t == 0 || t > max_t {
        return Err(Error::TimestepOutOfRange { t, max: max_t });
    }
    Ok(())
}

fn linear<'t>(bound: &Bound<'t, '_>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let w = bound.get(&format!("{prefix}.w"))?;
    let b = bound.get(&format!("{prefix}.b"))?;
    let s = x.shape();
    let rows: usize = s[..s.len() - 1].iter().product();
    let out = w.shape()[1];
    let y = x.reshape([rows, s[s.len() - 1]])?.matmul(w)?;
    let y = y.add(b.reshape([1, out])?.expand(0, rows)?)?;
    let mut os = s;
    *os.last_mut().unwrap() = out;
    y.reshape(os)
}

/// Conditioning vectors `[N, dim]` for per-item timesteps.
pub fn timestep_embed<'t>(bound: &Bound<'t, '_>, config: &DiTConfig, ts: &[usize]) -> Result<Var<'t>> {
    let mut data = Vec::with_capacity(ts.len() * config.freq_dim);
    for &t in ts {
        check_t(t, config.max_t)?;
        data.extend(timestep_features(t, config.freq_dim).into_data());
    }
    let tape = bound.vars()[0].tape();
    let f = tape.constant(Tensor::new([ts.len(), config.freq_dim], data)?);
    let h = linear(bound, "t_embed.0", f)?.silu()?;
    linear(bound, "t_embed.2", h)
}

/// `[N, D] → [N, L, D]`.
fn per_token<'t>(v: Var<'t>, l: usize) -> Result<Var<'t>> {
    let s = v.shape();
    v.reshape([s[0], 1, s[1]])?.expand(1, l)
}

/// `LN(x)·(1 + scale) + shift`.
fn modulate<'t>(x: Var<'t>, shift: Var<'t>, scale: Var<'t>) -> Result<Var<'t>> {
    x.layer_norm(LN_EPS)?.mul(scale.add_scalar(1.0)?)?.add(shift)
}

fn attention<'t>(bound: &Bound<'t, '_>, prefix: &str, x: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let (n, l, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let qkv = linear(bound, &format!("{prefix}.qkv"), x)?
        .reshape([n, l, 3, heads, dh])?
        .transpose(&[2, 0, 3, 1, 4])?;
    let part = |i: usize| qkv.slice(0, i, i + 1)?.reshape([n * heads, l, dh]);
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let scores = q.matmul(k.transpose(&[0, 2, 1])?)?.scalar_scale(1.0 / (dh as f64).sqrt())?;
    let out = scores
        .softmax(2)?
        .matmul(v)?
        .reshape([n, heads, l, dh])?
        .transpose(&[0, 2, 1, 3])?
        .reshape([n, l, d])?;
    linear(bound, &format!("{prefix}.proj"), out)
}

/// One adaLN-Zero block: tokens `[N, L, D]`, conditioning `[N, D]`.
pub fn adaln_block<'t>(bound: &Bound<'t, '_>, config: &DiTConfig, index: usize, x: Var<'t>, c: Var<'t>) -> Result<Var<'t>> {
    let (xs, cs) = (x.shape(), c.shape());
    let d = config.dim;
    if xs.len() != 3 || xs[2] != d || cs != [xs[0], d] {
        return Err(Error::ShapeMismatch {
            op: "adaln_block",
            lhs: xs,
            rhs: cs,
        });
    }
    let l = xs[1];
    let b = format!("blocks.{index}");
    let m = linear(bound, &format!("{b}.ada"), c.silu()?)?;
    let chunk = |i: usize| per_token(m.slice(1, i * d, (i + 1) * d)?, l);
    let (shift1, scale1, gate1) = (chunk(0)?, chunk(1)?, chunk(2)?);
    let (shift2, scale2, gate2) = (chunk(3)?, chunk(4)?, chunk(5)?);
    let a = attention(bound, &format!("{b}.attn"), modulate(x, shift1, scale1)?, config.heads)?;
    let x = x.add(gate1.mul(a)?)?;
    let h = linear(bound, &format!("{b}.mlp.fc1"), modulate(x, shift2, scale2)?)?.gelu()?;
    let h = linear(bound, &format!("{b}.mlp.fc2"), h)?;
    x.add(gate2.mul(h)?)
}

/// Full network: `z_t [N, 4, h, w]`, optional mask latent of the same shape
/// (required iff the config is conditional), timesteps `ts` of length N.
pub fn forward<'t>(
    bound: &Bound<'t, '_>,
    config: &DiTConfig,
    z_t: Var<'t>,
    mask: Option<Var<'t>>,
    ts: &[usize],
) -> Result<Var<'t>> {
    let zs = z_t.shape();
    if zs.len() != 4 || zs[1] != config.out_channels || zs[2..] != config.latent_size || zs[0] != ts.len() {
        return Err(Error::InvalidShape {
            op: "dit forward",
            shape: zs,
            reason: format!(
                "expected [{}, {}, {}, {}]",
                ts.len(),
                config.out_channels,
                config.latent_size[0],
                config.latent_size[1]
            ),
        });
    }
    let input = match (mask, config.conditional()) {
        (Some(m), true) => {
            if m.shape() != zs {
                return Err(Error::ShapeMismatch {
                    op: "concat_condition",
                    lhs: zs,
                    rhs: m.shape(),
                });
            }
            concat(&[z_t, m], 1)?
        }
        (None, false) => z_t,
        (Some(_), false) => return Err(Error::invalid("unconditional model given a mask")),
        (None, true) => return Err(Error::invalid("conditional model requires a mask")),
    };
    let (n, l, d, p) = (zs[0], config.tokens(), config.dim, config.patch);
    let tokens = linear(bound, "x_embed", patchify_var(input, p)?)?;
    let pos = bound.get("pos")?.reshape([1, l, d])?.expand(0, n)?;
    let mut x = tokens.add(pos)?;
    let c = timestep_embed(bound, config, ts)?;
    for i in 0..config.depth {
        x = adaln_block(bound, config, i, x, c)?;
    }
    let m = linear(bound, "final.ada", c.silu()?)?;
    let shift = per_token(m.slice(1, 0, d)?, l)?;
    let scale = per_token(m.slice(1, d, 2 * d)?, l)?;
    let out = linear(bound, "final.linear", modulate(x, shift, scale)?)?;
    unpatchify_var(out, config.out_channels, zs[2], zs[3], p)
}
