use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiseBatch, DifferentiableDenoiser, NoisePredictor};
use crate::error::{structural, validation, Result};
use crate::nn::{init_normal, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Number of resolution levels (residual blocks per side).
pub const LEVELS: usize = 6;

/// How the diffusion step enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeEncoding {
    #[default]
    Sinusoidal,
    Learned,
}

/// Architecture of the texture UNet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Texture channels predicted (and noised).
    pub channels_out: usize,
    /// Extra conditioning image channels concatenated to the input.
    pub context_channels: usize,
    /// Output channels of the six residual blocks, outermost first.
    pub widths: [usize; LEVELS],
    pub cond_dim: usize,
    /// Width of the condition and timestep embeddings.
    pub embed_dim: usize,
    pub time_encoding: TimeEncoding,
    /// Diffusion step count; sizes the learned time table.
    pub diffusion_steps: usize,
    /// Level (0-based) carrying spatial self-attention on both sides.
    pub attention_level: Option<usize>,
    pub max_groups: usize,
    /// Add a per-channel output bias computed from the spatial mean of
    /// `y_t` and the embedding. Group normalization hides a texture's
    /// overall level from the convolutional path; this head sees it.
    #[serde(default)]
    pub global_mean: bool,
}

impl UNetConfig {
    /// Desk-scale defaults: widths (16, 16, 32, 32, 64, 64), 128-wide
    /// embeddings, attention at the fifth level.
    pub fn desk(cond_dim: usize, context_channels: usize) -> Self {
        UNetConfig {
            channels_out: 3,
            context_channels,
            widths: [16, 16, 32, 32, 64, 64],
            cond_dim,
            embed_dim: 128,
            time_encoding: TimeEncoding::Sinusoidal,
            diffusion_steps: 100,
            attention_level: Some(4),
            max_groups: 8,
            global_mean: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels_out == 0 || self.widths.contains(&0) || self.embed_dim == 0 || self.max_groups == 0 {
            return Err(validation!("network widths must be positive"));
        }
        if self.time_encoding == TimeEncoding::Sinusoidal && self.embed_dim % 2 != 0 {
            return Err(validation!("sinusoidal time encoding needs an even embedding width"));
        }
        if let Some(a) = self.attention_level {
            if a >= LEVELS {
                return Err(validation!("attention level {a} outside 0..{LEVELS}"));
            }
        }
        Ok(())
    }

    /// Spatial size must survive five halvings.
    pub fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let m = 1 << (LEVELS - 1);
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(structural!("texture size {h}x{w} is not a positive multiple of {m}"));
        }
        Ok(())
    }
}

fn groups_for(c: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    norm: Norm,
    q: Dense,
    k: Dense,
    v: Dense,
    out: Dense,
}

#[derive(Debug, Clone)]
struct Level {
    block: ResBlock,
    attention: Option<Attention>,
    /// Strided conv after encoder blocks, conv after upsampling in the decoder.
    resample: Option<Conv>,
}

#[derive(Debug, Clone)]
struct Layout {
    conv_in: Conv,
    time_table: Option<ParamId>,
    time_mlp: [Dense; 2],
    cond_mlp: [Dense; 2],
    down: Vec<Level>,
    mid: ResBlock,
    up: Vec<Level>,
    out_norm: Norm,
    out_conv: Conv,
    /// Mean input, embedding input, output.
    global_head: Option<[Dense; 3]>,
}

struct Builder<'a, T, R: ?Sized> {
    params: ParamStore<T>,
    rng: &'a mut R,
    max_groups: usize,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Dense {
        let w = init_normal(&[fout, fin], fin, 1.0, self.rng);
        Dense {
            w: self.params.add(format!("{name}.weight"), w),
            b: self.params.add(format!("{name}.bias"), Tensor::zeros(&[fout])),
        }
    }

    /// Residual branches start as the identity.
    fn zero_dense(&mut self, name: &str, fin: usize, fout: usize) -> Dense {
        Dense {
            w: self.params.add(format!("{name}.weight"), Tensor::zeros(&[fout, fin])),
            b: self.params.add(format!("{name}.bias"), Tensor::zeros(&[fout])),
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> Conv {
        let w = if zero {
            Tensor::zeros(&[cout, cin, k, k])
        } else {
            init_normal(&[cout, cin, k, k], cin * k * k, 1.0, self.rng)
        };
        Conv {
            w: self.params.add(format!("{name}.weight"), w),
            b: self.params.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad: k / 2,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.params.add(format!("{name}.gamma"), Tensor::full(&[c], T::one())),
            beta: self.params.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            groups: groups_for(c, self.max_groups),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, embed: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, false),
            emb: self.dense(&format!("{name}.emb"), embed, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, true),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, false)),
        }
    }

    fn attention(&mut self, name: &str, c: usize) -> Attention {
        Attention {
            norm: self.norm(&format!("{name}.norm"), c),
            q: self.dense(&format!("{name}.q"), c, c),
            k: self.dense(&format!("{name}.k"), c, c),
            v: self.dense(&format!("{name}.v"), c, c),
            out: self.zero_dense(&format!("{name}.out"), c, c),
        }
    }
}

/// Per-channel spatial mean, `[N, C, H, W] -> [N, C]`.
fn channel_means<T: Scalar>(y: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = y.dims4()?;
    let inv = T::lit(1.0 / (h * w) as f64);
    let data = y
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor::new(&[n, c], data)
}

/// Conditional UNet predicting the noise in a texture.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    config: UNetConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> UNet<T> {
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: ParamStore::new(),
            rng,
            max_groups: config.max_groups,
        };
        let e = config.embed_dim;
        let w = config.widths;
        let cin = config.channels_out + config.context_channels;
        let conv_in = b.conv("conv_in", cin, w[0], 3, 1, false);
        let time_table = (config.time_encoding == TimeEncoding::Learned).then(|| {
            let t = init_normal(&[config.diffusion_steps + 1, e], 1, 1.0, b.rng);
            b.params.add("time.table", t)
        });
        let time_mlp = [b.dense("time.fc1", e, e), b.dense("time.fc2", e, e)];
        let cond_mlp = [b.dense("cond.fc1", config.cond_dim, e), b.dense("cond.fc2", e, e)];
        let mut down = Vec::with_capacity(LEVELS);
        let mut c = w[0];
        for (i, &wi) in w.iter().enumerate() {
            let block = b.block(&format!("down{i}"), c, wi, e);
            let attention = (config.attention_level == Some(i)).then(|| b.attention(&format!("down{i}.attn"), wi));
            let resample = (i + 1 < LEVELS).then(|| b.conv(&format!("down{i}.downsample"), wi, wi, 3, 2, false));
            down.push(Level {
                block,
                attention,
                resample,
            });
            c = wi;
        }
        let mid = b.block("mid", c, c, e);
        let mut up = Vec::with_capacity(LEVELS);
        for i in (0..LEVELS).rev() {
            let block = b.block(&format!("up{i}"), c + w[i], w[i], e);
            let attention = (config.attention_level == Some(i)).then(|| b.attention(&format!("up{i}.attn"), w[i]));
            let resample = (i > 0).then(|| b.conv(&format!("up{i}.upsample"), w[i], w[i], 3, 1, false));
            up.push(Level {
                block,
                attention,
                resample,
            });
            c = w[i];
        }
        let out_norm = b.norm("out.norm", c);
        let out_conv = b.conv("out.conv", c, config.channels_out, 3, 1, true);
        let global_head = config.global_mean.then(|| {
            [
                b.dense("global.mean", config.channels_out, e),
                b.dense("global.emb", e, e),
                b.zero_dense("global.out", e, config.channels_out),
            ]
        });
        let layout = Layout {
            conv_in,
            time_table,
            time_mlp,
            cond_mlp,
            down,
            mid,
            up,
            out_norm,
            out_conv,
            global_head,
        };
        Ok(UNet {
            config,
            params: b.params,
            layout,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// Same architecture and values in another scalar type.
    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn sinusoid(&self, steps: &[usize]) -> Tensor<T> {
        let e = self.config.embed_dim;
        let half = e / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp())
            .collect();
        let mut data = Vec::with_capacity(steps.len() * e);
        for &t in steps {
            let t = t as f64;
            data.extend(freqs.iter().map(|f| T::lit((t * f).sin())));
            data.extend(freqs.iter().map(|f| T::lit((t * f).cos())));
        }
        Tensor::new(&[steps.len(), e], data).expect("sized")
    }

    fn dense(&self, g: &mut Graph<T>, x: Var, d: Dense) -> Result<Var> {
        let w = g.param(&self.params, d.w);
        let b = g.param(&self.params, d.b);
        g.linear(x, w, Some(b))
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, c: Conv) -> Result<Var> {
        let w = g.param(&self.params, c.w);
        let b = g.param(&self.params, c.b);
        g.conv2d(x, w, Some(b), c.stride, c.pad)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, n: Norm) -> Result<Var> {
        let gamma = g.param(&self.params, n.gamma);
        let beta = g.param(&self.params, n.beta);
        g.group_norm(x, gamma, beta, n.groups)
    }

    fn res_block(&self, g: &mut Graph<T>, x: Var, emb: Var, r: &ResBlock) -> Result<Var> {
        let h = self.norm(g, x, r.norm1)?;
        let h = g.silu(h);
        let h = self.conv(g, h, r.conv1)?;
        let shift = self.dense(g, emb, r.emb)?;
        let h = g.add_channel_bias(h, shift)?;
        let h = self.norm(g, h, r.norm2)?;
        let h = g.silu(h);
        let h = self.conv(g, h, r.conv2)?;
        let skip = match r.skip {
            Some(c) => self.conv(g, x, c)?,
            None => x,
        };
        g.add(skip, h)
    }

    fn attention(&self, g: &mut Graph<T>, x: Var, a: &Attention) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if h * w < 2 {
            return Ok(x);
        }
        let n = self.norm(g, x, a.norm)?;
        let tokens = g.to_tokens(n)?;
        let q = self.dense(g, tokens, a.q)?;
        let k = self.dense(g, tokens, a.k)?;
        let v = self.dense(g, tokens, a.v)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, T::lit(1.0 / (c as f64).sqrt()));
        let attn = g.softmax_last(scores);
        let mixed = g.bmm(attn, v, false)?;
        let out = self.dense(g, mixed, a.out)?;
        let out = g.from_tokens(out, h, w)?;
        g.add(x, out)
    }

    fn embedding(&self, g: &mut Graph<T>, batch: &DenoiseBatch<T>) -> Result<Var> {
        let steps = &batch.steps;
        let t = match self.layout.time_table {
            Some(table) => {
                if let Some(&bad) = steps.iter().find(|&&s| s > self.config.diffusion_steps) {
                    return Err(validation!("step {bad} beyond the learned time table"));
                }
                let table = g.param(&self.params, table);
                g.embedding(table, steps)?
            }
            None => g.input(self.sinusoid(steps)),
        };
        let t = self.dense(g, t, self.layout.time_mlp[0])?;
        let t = g.silu(t);
        let t = self.dense(g, t, self.layout.time_mlp[1])?;
        let c = g.input(batch.cond.clone());
        let c = self.dense(g, c, self.layout.cond_mlp[0])?;
        let c = g.silu(c);
        let c = self.dense(g, c, self.layout.cond_mlp[1])?;
        let e = g.add(t, c)?;
        Ok(g.silu(e))
    }
}

impl<T: Scalar> NoisePredictor<T> for UNet<T> {
    fn predict(&self, batch: &DenoiseBatch<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.build(&mut g, batch)?;
        Ok(g.take_value(out))
    }
}

impl<T: Scalar> DifferentiableDenoiser<T> for UNet<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn build(&self, g: &mut Graph<T>, batch: &DenoiseBatch<T>) -> Result<Var> {
        batch.check()?;
        let (_, c, h, w) = batch.y_t.dims4()?;
        self.config.check_resolution(h, w)?;
        if c != self.config.channels_out {
            return Err(structural!("network expects {} texture channels, got {c}", self.config.channels_out));
        }
        let ctx_c = batch.context.as_ref().map_or(0, |t| t.shape()[1]);
        if ctx_c != self.config.context_channels {
            return Err(structural!(
                "network expects {} context channels, got {ctx_c}",
                self.config.context_channels
            ));
        }
        if batch.cond.shape()[1] != self.config.cond_dim {
            return Err(structural!(
                "network expects conditions of length {}, got {}",
                self.config.cond_dim,
                batch.cond.shape()[1]
            ));
        }
        let emb = self.embedding(g, batch)?;
        let mut x = g.input(batch.y_t.clone());
        if let Some(ctx) = &batch.context {
            let ctx = g.input(ctx.clone());
            x = g.concat_channels(x, ctx)?;
        }
        let mut h = self.conv(g, x, self.layout.conv_in)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for level in &self.layout.down {
            h = self.res_block(g, h, emb, &level.block)?;
            if let Some(a) = &level.attention {
                h = self.attention(g, h, a)?;
            }
            skips.push(h);
            if let Some(c) = level.resample {
                h = self.conv(g, h, c)?;
            }
        }
        h = self.res_block(g, h, emb, &self.layout.mid)?;
        for level in &self.layout.up {
            let skip = skips.pop().expect("one skip per level");
            h = g.concat_channels(h, skip)?;
            h = self.res_block(g, h, emb, &level.block)?;
            if let Some(a) = &level.attention {
                h = self.attention(g, h, a)?;
            }
            if let Some(c) = level.resample {
                h = g.upsample2x(h)?;
                h = self.conv(g, h, c)?;
            }
        }
        let h = self.norm(g, h, self.layout.out_norm)?;
        let h = g.silu(h);
        let out = self.conv(g, h, self.layout.out_conv)?;
        match &self.layout.global_head {
            Some([mean, emb_in, head]) => {
                let m = g.input(channel_means(&batch.y_t)?);
                let a = self.dense(g, m, *mean)?;
                let b = self.dense(g, emb, *emb_in)?;
                let z = g.add(a, b)?;
                let z = g.silu(z);
                let bias = self.dense(g, z, *head)?;
                g.add_channel_bias(out, bias)
            }
            None => Ok(out),
        }
    }
}
