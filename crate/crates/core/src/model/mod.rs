//! Siamese encoder-decoder for pixelwise change probability.
//!
//! Layout for `L` levels with encoder widths `e` and decoder widths `d`, and
//! `m = 2` for concatenation or `m = 1` for absolute difference:
//!
//! * encoder level `l`: two `k x k` conv + ReLU blocks to `e[l]` channels,
//!   then 2x2 max pooling except after the last level. Skips are the
//!   pre-pool activations; both images go through the same weights.
//! * decoder level 0: two conv blocks to `d[0]` on the fused bottleneck
//!   (`m * e[L-1]` channels).
//! * decoder level `l >= 1`: a bias-free 2x2 stride-2 transpose conv from
//!   `d[l-1]` to `d[l]`; the fused skip of encoder level `L-1-l`
//!   (`m * e[L-1-l]` channels), optionally attention-gated by the upsampled
//!   signal; `[skip ‖ up]`; two conv blocks to `d[l]`.
//! * head: 1x1 conv to one channel, then sigmoid.
//!
//! An attention gate with skip `x` (`F_x` channels) and gating signal `g`
//! (`F_g` channels) uses `F_int = max(1, F_g / 2)` intermediate channels:
//! `α = σ(ψ(ReLU(W_x x + b + W_g g)) + b_ψ)` and the output is `x ⊙ α`.
//!
//! Parameter count, writing `c(i, o) = i·o·k² + o` for a conv layer:
//!
//! ```text
//! Σ_l [c(in_l, e[l]) + c(e[l], e[l])]                    in_0 = C, in_l = e[l-1]
//! + c(m·e[L-1], d[0]) + c(d[0], d[0])
//! + Σ_{l≥1} [4·d[l-1]·d[l] + c(m·e[L-1-l] + d[l], d[l]) + c(d[l], d[l])]
//! + d[L-1] + 1
//! + gated · Σ_{l≥1} [F_int·(m·e[L-1-l] + 1) + F_int·d[l] + F_int + 1]
//! ```

mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{Fusion, ModelConfig};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvSlot {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct GateSlot {
    wx: ConvSlot,
    wg: usize,
    psi: ConvSlot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    encoder: Vec<[ConvSlot; 2]>,
    decoder: Vec<[ConvSlot; 2]>,
    up: Vec<Option<usize>>,
    gates: Vec<Option<GateSlot>>,
    head: ConvSlot,
}

/// Name, shape, fan-in and RNG stream of every learnable tensor, in storage order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    fan_in: usize,
    stream: u64,
    is_bias: bool,
}

struct Planner {
    specs: Vec<ParamSpec>,
}

impl Planner {
    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: usize, stream: u64, is_bias: bool) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            fan_in,
            stream,
            is_bias,
        });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stream: u64) -> ConvSlot {
        ConvSlot {
            weight: self.push(
                format!("{name}.weight"),
                vec![c_out, c_in, k, k],
                c_in * k * k,
                stream,
                false,
            ),
            bias: self.push(format!("{name}.bias"), vec![c_out], 0, stream, true),
        }
    }
}

fn plan(config: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let (e, d, k) = (&config.encoder_filters, &config.decoder_filters, config.kernel);
    let l = e.len();
    let m = config.fusion.width_factor();
    let mut p = Planner { specs: Vec::new() };

    let mut encoder = Vec::with_capacity(l);
    for lvl in 0..l {
        let c_in = if lvl == 0 { config.input_channels } else { e[lvl - 1] };
        let s = 10 * lvl as u64;
        encoder.push([
            p.conv(&format!("enc{lvl}.conv0"), c_in, e[lvl], k, s),
            p.conv(&format!("enc{lvl}.conv1"), e[lvl], e[lvl], k, s + 1),
        ]);
    }

    let mut decoder = Vec::with_capacity(l);
    let mut up = Vec::with_capacity(l);
    let mut gates = Vec::with_capacity(l);
    for lvl in 0..l {
        let s = 200 + 10 * lvl as u64;
        let c_in = if lvl == 0 {
            up.push(None);
            gates.push(None);
            m * e[l - 1]
        } else {
            up.push(Some(p.push(
                format!("dec{lvl}.up.weight"),
                vec![d[lvl - 1], d[lvl], 2, 2],
                d[lvl - 1],
                100 + lvl as u64,
                false,
            )));
            let skip = m * e[l - 1 - lvl];
            gates.push(config.gated.then(|| {
                let f_int = (d[lvl] / 2).max(1);
                let gs = 1000 + 10 * lvl as u64;
                GateSlot {
                    wx: p.conv(&format!("dec{lvl}.gate.wx"), skip, f_int, 1, gs),
                    wg: p.push(
                        format!("dec{lvl}.gate.wg.weight"),
                        vec![f_int, d[lvl], 1, 1],
                        d[lvl],
                        gs + 1,
                        false,
                    ),
                    psi: p.conv(&format!("dec{lvl}.gate.psi"), f_int, 1, 1, gs + 2),
                }
            }));
            skip + d[lvl]
        };
        decoder.push([
            p.conv(&format!("dec{lvl}.conv0"), c_in, d[lvl], k, s),
            p.conv(&format!("dec{lvl}.conv1"), d[lvl], d[lvl], k, s + 1),
        ]);
    }
    let head = p.conv("head", d[l - 1], 1, 1, 300);
    (
        Layout {
            encoder,
            decoder,
            up,
            gates,
            head,
        },
        p.specs,
    )
}

/// Parameter tensor shapes for `config`, in storage order.
pub fn parameter_specs(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    Ok(plan(config).1)
}

/// Number of learnable scalars; the Siamese encoder is counted once.
pub fn count_params(config: &ModelConfig) -> usize {
    plan(config).1.iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

/// Weights of one attention gate.
#[derive(Debug, Clone)]
pub struct AttentionGateParams<T: Float> {
    /// `[F_int x F_x x 1 x 1]`
    pub wx: Tensor<T>,
    /// `[F_int]`
    pub bias: Tensor<T>,
    /// `[F_int x F_g x 1 x 1]`
    pub wg: Tensor<T>,
    /// `[1 x F_int x 1 x 1]`
    pub psi: Tensor<T>,
    /// `[1]`
    pub psi_bias: Tensor<T>,
}

/// `x ⊙ σ(ψ(ReLU(W_x x + b + W_g g)) + b_ψ)` with the single-channel coefficient map broadcast over `x`'s channels.
pub fn attention_gate<T: Float>(x: &Tensor<T>, g: &Tensor<T>, params: &AttentionGateParams<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 || g.rank() != 3 || x.shape()[1..] != g.shape()[1..] {
        return Err(Error::shape(
            "attention_gate",
            format!("skip {:?} and gating signal {:?} are not aligned", x.shape(), g.shape()),
        ));
    }
    let alpha = gate_coefficients(x, g, params)?;
    x.mul(&alpha.expand_channels(x.shape()[0])?)
}

/// The gate's `[1 x H x W]` coefficient map `α`.
pub fn gate_coefficients<T: Float>(x: &Tensor<T>, g: &Tensor<T>, params: &AttentionGateParams<T>) -> Result<Tensor<T>> {
    let no_bias = Tensor::zeros(&[params.wg.shape()[0]]);
    let hidden = x
        .conv2d(&params.wx, &params.bias, 0)?
        .add(&g.conv2d(&params.wg, &no_bias, 0)?)?
        .relu();
    Ok(hidden.conv2d(&params.psi, &params.psi_bias, 0)?.sigmoid())
}

/// Combines per-level features from the two branches.
pub fn fuse_skips<T: Float>(a: &[Tensor<T>], b: &[Tensor<T>], fusion: Fusion) -> Result<Vec<Tensor<T>>> {
    if a.len() != b.len() {
        return Err(Error::shape("fuse_skips", format!("{} vs {} levels", a.len(), b.len())));
    }
    a.iter().zip(b).map(|(a, b)| fuse(a, b, fusion)).collect()
}

fn fuse<T: Float>(a: &Tensor<T>, b: &Tensor<T>, fusion: Fusion) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "fuse_skips",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    match fusion {
        Fusion::Concatenate => Tensor::concat(&[a.clone(), b.clone()]),
        Fusion::AbsDifference => Ok(a.sub(b)?.abs()),
    }
}

/// Overrides used to probe the decoder wiring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Treat every gate coefficient as exactly 1.
    pub force_open_gates: bool,
    /// Replace every fused skip with zeros.
    pub zero_skips: bool,
}

/// Encoder output for one image.
#[derive(Debug, Clone)]
pub struct Encoded<T: Float> {
    /// Pre-pool activations of levels `0..L-1`.
    pub skips: Vec<Tensor<T>>,
    pub bottleneck: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ModelState<T: Float> {
    config: ModelConfig,
    layout: Layout,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor<T>>,
}

/// Fresh model: conv weights uniform in `±sqrt(6 / fan_in)`, zero biases.
///
/// Every tensor draws from its own stream of a seed-keyed ChaCha generator, so
/// gated and ungated builds with equal ladders and seed share all non-gate weights.
pub fn build<T: Float>(config: &ModelConfig, seed: u64) -> Result<ModelState<T>> {
    config.validate()?;
    let (layout, specs) = plan(config);
    let params = specs
        .iter()
        .map(|s| {
            let n: usize = s.shape.iter().product();
            let data = if s.is_bias {
                vec![T::zero(); n]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(s.stream);
                let bound = (6.0 / s.fan_in as f64).sqrt();
                (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
            };
            Tensor::param(&s.shape, data)
        })
        .collect::<Result<_>>()?;
    Ok(ModelState {
        config: config.clone(),
        layout,
        specs,
        params,
    })
}

impl<T: Float> ModelState<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn parameters(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn named_parameters(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.specs.iter().map(|s| s.name.as_str()).zip(&self.params)
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor<T>> {
        self.named_parameters().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Same model reading its weights from `params`, used as-is.
    pub fn with_parameters(&self, params: Vec<Tensor<T>>) -> Result<Self> {
        if params.len() != self.specs.len() {
            return Err(Error::invalid(
                "parameters",
                format!("expected {} tensors, got {}", self.specs.len(), params.len()),
            ));
        }
        for (s, p) in self.specs.iter().zip(&params) {
            if p.shape() != s.shape.as_slice() {
                return Err(Error::shape(
                    "parameters",
                    format!("{} must be {:?}, got {:?}", s.name, s.shape, p.shape()),
                ));
            }
        }
        Ok(ModelState { params, ..self.clone() })
    }

    /// Replaces every weight with fresh gradient-tracking leaves holding `values`.
    pub fn set_parameters(&mut self, values: Vec<Vec<T>>) -> Result<()> {
        let params = self
            .specs
            .iter()
            .zip(values)
            .map(|(s, v)| {
                Tensor::param(&s.shape, v).map_err(|e| Error::invalid("parameters", format!("{}: {e}", s.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        *self = self.with_parameters(params)?;
        Ok(())
    }

    /// Replaces a single named tensor's values.
    pub fn set_parameter(&mut self, name: &str, values: Vec<T>) -> Result<()> {
        let i = self
            .specs
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::invalid("parameter", format!("no parameter named `{name}`")))?;
        self.params[i] = Tensor::param(&self.specs[i].shape, values)?;
        Ok(())
    }

    fn conv_block(&self, x: &Tensor<T>, slot: ConvSlot, padding: usize) -> Result<Tensor<T>> {
        Ok(x.conv2d(&self.params[slot.weight], &self.params[slot.bias], padding)?
            .relu())
    }

    fn double_conv(&self, x: &Tensor<T>, slots: &[ConvSlot; 2]) -> Result<Tensor<T>> {
        let pad = self.config.kernel / 2;
        let y = self.conv_block(x, slots[0], pad)?;
        self.conv_block(&y, slots[1], pad)
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<()> {
        match *image.shape() {
            [c, h, w] if c == self.config.input_channels => self.config.check_spatial(h, w),
            _ => Err(Error::shape(
                "model input",
                format!(
                    "expected [{} x H x W], got {:?}",
                    self.config.input_channels,
                    image.shape()
                ),
            )),
        }
    }

    pub fn encode(&self, image: &Tensor<T>) -> Result<Encoded<T>> {
        self.check_input(image)?;
        let last = self.layout.encoder.len() - 1;
        let mut skips = Vec::with_capacity(last);
        let mut x = image.clone();
        for (lvl, slots) in self.layout.encoder.iter().enumerate() {
            let y = self.double_conv(&x, slots)?;
            if lvl == last {
                return Ok(Encoded { skips, bottleneck: y });
            }
            x = y.maxpool2d()?;
            skips.push(y);
        }
        unreachable!("config has at least two levels")
    }

    /// Gate weights of decoder level `level` (`1..L`), if the model is gated.
    pub fn gate_params(&self, level: usize) -> Option<AttentionGateParams<T>> {
        let g = (*self.layout.gates.get(level)?)?;
        Some(AttentionGateParams {
            wx: self.params[g.wx.weight].clone(),
            bias: self.params[g.wx.bias].clone(),
            wg: self.params[g.wg].clone(),
            psi: self.params[g.psi.weight].clone(),
            psi_bias: self.params[g.psi.bias].clone(),
        })
    }

    /// `[1 x H x W]` change probabilities for an image pair.
    pub fn forward(&self, t1: &Tensor<T>, t2: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(t1, t2, ForwardOptions::default())
    }

    pub fn forward_with(&self, t1: &Tensor<T>, t2: &Tensor<T>, opts: ForwardOptions) -> Result<Tensor<T>> {
        if t1.shape() != t2.shape() {
            return Err(Error::shape(
                "forward",
                format!("t1 {:?} vs t2 {:?}", t1.shape(), t2.shape()),
            ));
        }
        let a = self.encode(t1)?;
        let b = self.encode(t2)?;
        let fusion = self.config.fusion;
        let skips = fuse_skips(&a.skips, &b.skips, fusion)?;
        let bottleneck = fuse(&a.bottleneck, &b.bottleneck, fusion)?;

        let levels = self.layout.decoder.len();
        let mut d = self.double_conv(&bottleneck, &self.layout.decoder[0])?;
        for lvl in 1..levels {
            let kernel = &self.params[self.layout.up[lvl].expect("levels >= 1 upsample")];
            let up = d.conv_transpose2d(kernel)?;
            let mut skip = skips[levels - 1 - lvl].clone();
            if opts.zero_skips {
                skip = Tensor::zeros(skip.shape());
            }
            if !opts.force_open_gates {
                if let Some(gate) = self.gate_params(lvl) {
                    skip = attention_gate(&skip, &up, &gate)?;
                }
            }
            d = self.double_conv(&Tensor::concat(&[skip, up])?, &self.layout.decoder[lvl])?;
        }
        let head = self.layout.head;
        Ok(d.conv2d(&self.params[head.weight], &self.params[head.bias], 0)?
            .sigmoid())
    }
}
