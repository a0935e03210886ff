//! A miniature text-conditioned UNet.
//!
//! ```text
//! x (H×W×3) ─ encoder.0 ─ encoder.1 ─ middle ─┐
//!             │ 16ch /2   │ 32ch /4           │
//!             │           └──── skip ─────────┤ concat, up ×2
//!             │                          decoder.0 (16ch, H/2)
//!             └─────────── skip ──────────────┤ concat, up ×2, concat x
//!                                        decoder.1 (16ch, H) ─ conv_out ─ ε̂
//! ```
//!
//! Every block is `conv3x3 + bias + time projection → SiLU → self-attention
//! → cross-attention over the text embedding`, both attentions residual and
//! single-head. Parameter names follow `encoder.<i>.<sub>`, `middle.<sub>`,
//! `decoder.<i>.<sub>` so that roles are decidable from names alone.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::schedule::gaussian_image;
use super::tape::{Tape, Var};
use super::{
    Backend, BackendSpec, HashingTextEncoder, LossAndGradients, NoiseSchedule, ParameterSnapshot,
    Tensor,
};
use crate::error::{Error, Result};
use crate::types::{ImageTensor, Prompt, TextEmbedding, CHANNELS};

const ENC0: usize = 16;
const ENC1: usize = 32;
const MID: usize = 32;
const DEC0: usize = 16;
const DEC1: usize = 16;
const TIME_DIM: usize = 16;

/// How a parameter is initialised.
#[derive(Clone, Copy)]
enum Init {
    Zeros,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled { fan_in: usize, gain: f64 },
}

struct ParamDef {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn architecture(text_dims: usize) -> Vec<ParamDef> {
    let mut defs = Vec::new();
    let mut block = |prefix: &str, cin: usize, c: usize| {
        let p = |sub: &str| format!("{prefix}.{sub}");
        defs.push(ParamDef {
            name: p("conv.weight"),
            shape: vec![3, 3, cin, c],
            init: Init::Scaled { fan_in: 9 * cin, gain: 1.4 },
        });
        defs.push(ParamDef { name: p("conv.bias"), shape: vec![c], init: Init::Zeros });
        defs.push(ParamDef {
            name: p("time.weight"),
            shape: vec![TIME_DIM, c],
            init: Init::Scaled { fan_in: TIME_DIM, gain: 1.0 },
        });
        for m in ["q", "k", "v", "o"] {
            defs.push(ParamDef {
                name: p(&format!("selfattn.{m}")),
                shape: vec![c, c],
                init: Init::Scaled { fan_in: c, gain: 1.0 },
            });
        }
        for (m, rows) in [("q", c), ("k", text_dims), ("v", text_dims), ("o", c)] {
            defs.push(ParamDef {
                name: p(&format!("crossattn.{m}")),
                shape: vec![rows, c],
                init: Init::Scaled { fan_in: rows, gain: 1.0 },
            });
        }
    };
    block("encoder.0", CHANNELS, ENC0);
    block("encoder.1", ENC0, ENC1);
    block("middle", ENC1, MID);
    block("decoder.0", MID + ENC1, DEC0);
    block("decoder.1", DEC0 + ENC0 + CHANNELS, DEC1);
    defs.push(ParamDef {
        name: "decoder.1.conv_out.weight".into(),
        shape: vec![3, 3, DEC1, CHANNELS],
        init: Init::Scaled { fan_in: 9 * DEC1, gain: 0.5 },
    });
    defs.push(ParamDef {
        name: "decoder.1.conv_out.bias".into(),
        shape: vec![CHANNELS],
        init: Init::Zeros,
    });
    defs
}

/// The reference backend: deterministic on CPU given `(spec, seed)`.
#[derive(Clone, Debug)]
pub struct ToyBackend {
    spec: BackendSpec,
    schedule: NoiseSchedule,
    text: HashingTextEncoder,
    pretrained: ParameterSnapshot,
}

impl ToyBackend {
    pub fn new(spec: BackendSpec, seed: u64) -> Result<Self> {
        if !spec.image_height.is_multiple_of(4) || !spec.image_width.is_multiple_of(4) || spec.image_height < 8 {
            return Err(Error::Config("toy backend needs image sides divisible by 4".into()));
        }
        if spec.diffusion_steps == 0 {
            return Err(Error::Config("diffusion_steps must be positive".into()));
        }
        let schedule = NoiseSchedule::linear(spec.diffusion_steps, spec.beta_start, spec.beta_end);
        let text = HashingTextEncoder::new(
            spec.embedding_tokens,
            spec.embedding_dims,
            spec.vocab_size,
            seed,
        );

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = BTreeMap::new();
        for def in architecture(spec.embedding_dims) {
            let n: usize = def.shape.iter().product();
            let data = match def.init {
                Init::Zeros => vec![0.0; n],
                Init::Scaled { fan_in, gain } => {
                    let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).unwrap();
                    (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
                }
            };
            entries.insert(def.name, Tensor::new(def.shape, data)?);
        }
        let pretrained = ParameterSnapshot::from_named(entries)?;
        Ok(ToyBackend { spec, schedule, text, pretrained })
    }

    /// The default toy backend with seed 0.
    pub fn standard() -> Self {
        Self::new(BackendSpec::toy(), 0).expect("toy spec is valid")
    }

    fn check_params(&self, params: &ParameterSnapshot) -> Result<()> {
        self.pretrained.check_compatible(params)
    }

    fn register(&self, tape: &mut Tape, params: &ParameterSnapshot) -> BTreeMap<String, Var> {
        params
            .iter()
            .map(|(name, tensor, _)| {
                let cols = *tensor.shape.last().unwrap_or(&1);
                let rows = tensor.len() / cols.max(1);
                let m = Array2::from_shape_fn((rows, cols), |(r, c)| tensor.data[r * cols + c] as f64);
                (name.to_owned(), tape.leaf(m))
            })
            .collect()
    }

    fn forward(
        &self,
        tape: &mut Tape,
        p: &BTreeMap<String, Var>,
        x: Var,
        timestep: usize,
        text: Var,
    ) -> Var {
        let (h, w) = (self.spec.image_height, self.spec.image_width);
        let temb = tape.leaf(time_embedding(timestep));
        let net = Net { p, temb, text };

        let e0 = net.block(tape, "encoder.0", x, h, w, 2, ENC0);
        let e1 = net.block(tape, "encoder.1", e0, h / 2, w / 2, 2, ENC1);
        let m = net.block(tape, "middle", e1, h / 4, w / 4, 1, MID);

        let cat = tape.concat_cols(m, e1);
        let up = tape.upsample2x(cat, h / 4, w / 4);
        let d0 = net.block(tape, "decoder.0", up, h / 2, w / 2, 1, DEC0);

        let cat = tape.concat_cols(d0, e0);
        let up = tape.upsample2x(cat, h / 2, w / 2);
        let up = tape.concat_cols(up, x);
        let d1 = net.block(tape, "decoder.1", up, h, w, 1, DEC1);

        net.conv(tape, "decoder.1.conv_out", d1, h, w, 1)
    }

    fn image_matrix(&self, image: &ImageTensor) -> Array2<f64> {
        let n = image.height() * image.width();
        Array2::from_shape_fn((n, CHANNELS), |(r, c)| image.data()[r * CHANNELS + c] as f64)
    }

    fn embedding_matrix(embedding: &TextEmbedding) -> Array2<f64> {
        let (l, d) = embedding.shape();
        Array2::from_shape_fn((l, d), |(r, c)| embedding.data()[r * d + c] as f64)
    }

    fn check_inputs(
        &self,
        params: &ParameterSnapshot,
        image: &ImageTensor,
        timestep: usize,
        embedding: &TextEmbedding,
    ) -> Result<()> {
        self.check_params(params)?;
        self.spec.check_image(image)?;
        self.spec.check_timestep(timestep)?;
        self.spec.check_embedding(embedding)
    }
}

struct Net<'a> {
    p: &'a BTreeMap<String, Var>,
    temb: Var,
    text: Var,
}

impl Net<'_> {
    fn param(&self, name: &str) -> Var {
        self.p[name]
    }

    fn conv(&self, tape: &mut Tape, prefix: &str, x: Var, h: usize, w: usize, stride: usize) -> Var {
        let cols = tape.im2col(x, h, w, stride);
        let y = tape.matmul(cols, self.param(&format!("{prefix}.weight")));
        tape.add_row(y, self.param(&format!("{prefix}.bias")))
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape,
        prefix: &str,
        x: Var,
        h: usize,
        w: usize,
        stride: usize,
        channels: usize,
    ) -> Var {
        let y = self.conv(tape, &format!("{prefix}.conv"), x, h, w, stride);
        let t = tape.matmul(self.temb, self.param(&format!("{prefix}.time.weight")));
        let y = tape.add_row(y, t);
        let y = tape.silu(y);
        let y = self.attention(tape, &format!("{prefix}.selfattn"), y, None, channels);
        self.attention(tape, &format!("{prefix}.crossattn"), y, Some(self.text), channels)
    }

    /// Residual single-head attention; keys and values come from `context`
    /// when given, otherwise from `x` itself.
    fn attention(&self, tape: &mut Tape, prefix: &str, x: Var, context: Option<Var>, channels: usize) -> Var {
        let ctx = context.unwrap_or(x);
        let q = tape.matmul(x, self.param(&format!("{prefix}.q")));
        let k = tape.matmul(ctx, self.param(&format!("{prefix}.k")));
        let v = tape.matmul(ctx, self.param(&format!("{prefix}.v")));
        let scores = tape.matmul_t(q, k);
        let scores = tape.scale(scores, 1.0 / (channels as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        let mixed = tape.matmul(attn, v);
        let out = tape.matmul(mixed, self.param(&format!("{prefix}.o")));
        tape.add(x, out)
    }
}

fn time_embedding(t: usize) -> Array2<f64> {
    let half = TIME_DIM / 2;
    Array2::from_shape_fn((1, TIME_DIM), |(_, i)| {
        let freq = (-(1000f64.ln()) * (i % half) as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        if i < half {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl Backend for ToyBackend {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn pretrained(&self) -> &ParameterSnapshot {
        &self.pretrained
    }

    fn encode_text(&self, prompt: &Prompt) -> Result<TextEmbedding> {
        self.text.encode(prompt.text())
    }

    fn unconditional_embedding(&self) -> TextEmbedding {
        self.text.unconditional()
    }

    fn predict_noise(
        &self,
        params: &ParameterSnapshot,
        noisy_image: &ImageTensor,
        timestep: usize,
        embedding: &TextEmbedding,
    ) -> Result<ImageTensor> {
        self.check_inputs(params, noisy_image, timestep, embedding)?;
        let mut tape = Tape::new();
        let p = self.register(&mut tape, params);
        let x = tape.leaf(self.image_matrix(noisy_image));
        let e = tape.leaf(Self::embedding_matrix(embedding));
        let out = self.forward(&mut tape, &p, x, timestep, e);
        let data: Vec<f32> = tape.value(out).iter().map(|&v| v as f32).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("noise prediction is not finite".into()));
        }
        ImageTensor::new(noisy_image.height(), noisy_image.width(), data)
    }

    fn loss_and_gradients(
        &self,
        params: &ParameterSnapshot,
        embedding: &TextEmbedding,
        image: &ImageTensor,
        noise_seed: u64,
        timestep: usize,
    ) -> Result<LossAndGradients> {
        self.check_inputs(params, image, timestep, embedding)?;
        let noise = gaussian_image(noise_seed, image.height(), image.width());
        let noisy = self.schedule.add_noise(image, &noise, timestep)?;

        let mut tape = Tape::new();
        let p = self.register(&mut tape, params);
        let x = tape.leaf(self.image_matrix(&noisy));
        let e = tape.leaf(Self::embedding_matrix(embedding));
        let pred = self.forward(&mut tape, &p, x, timestep, e);
        let root = tape.mse(pred, self.image_matrix(&noise));
        let loss = tape.value(root)[[0, 0]];
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss is {loss}")));
        }

        let grads = tape.backward(root);
        let params = p
            .iter()
            .map(|(name, &var)| {
                let g = match grads.get(var) {
                    Some(g) => g.iter().copied().collect(),
                    None => vec![0.0; tape.value(var).len()],
                };
                (name.clone(), g)
            })
            .collect();
        let embedding = match grads.get(e) {
            Some(g) => g.iter().copied().collect(),
            None => vec![0.0; embedding.data().len()],
        };
        Ok(LossAndGradients { loss, params, embedding })
    }
}
