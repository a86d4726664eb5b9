//! The compressive denoising autoencoder.
//!
//! ```text
//! NetInput (3,T,H,W)
//!   → token generation: 3×3×3 conv, 3 → C
//!   → M encoder blocks → N decoder blocks
//!   → channel norm → 1×1×1 projection C → 1 → task squashing
//! ```
//!
//! A block factorizes space and time: a per-frame 3×3 convolution, then
//! multi-head self-attention across the T positions of each pixel, then a
//! channel MLP. Each of the three is pre-normalized and residual, and the
//! last projection of each branch starts at zero so a fresh block is the
//! identity.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use super::params::{ParamSet, Partition};
use super::tape::{NodeId, Tape};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::sensor::NetInput;
use crate::tensor::{Real, Tensor};

pub const DEPTH_MIN: f64 = 1.0;
pub const DEPTH_MAX: f64 = 80.0;

const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Reconstruction,
    Edge,
    Depth,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Reconstruction => "recon",
            HeadKind::Edge => "edge",
            HeadKind::Depth => "depth",
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recon" | "reconstruction" => Ok(HeadKind::Reconstruction),
            "edge" => Ok(HeadKind::Edge),
            "depth" => Ok(HeadKind::Depth),
            other => Err(Error::Config(format!("unknown head kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cr: usize,
    pub height: usize,
    pub width: usize,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            encoder_depth: 4,
            decoder_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            cr: 8,
            height: 32,
            width: 32,
            head: HeadKind::Reconstruction,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("cr", self.cr),
            ("height", self.height),
            ("width", self.width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if 2 * self.decoder_depth >= self.encoder_depth {
            log::warn!(
                "decoder depth {} is not below half the encoder depth {}",
                self.decoder_depth,
                self.encoder_depth
            );
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("channels", self.channels),
            ("encoder_depth", self.encoder_depth),
            ("decoder_depth", self.decoder_depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("cr", self.cr),
            ("height", self.height),
            ("width", self.width),
        ] {
            writeln!(s, "{k} = {v}").unwrap();
        }
        writeln!(s, "head = {}", self.head.as_str()).unwrap();
        s
    }

    /// Consume model keys from `kv`, keeping defaults for absent ones.
    pub fn take_from(kv: &mut KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        macro_rules! field {
            ($name:ident) => {
                if let Some(v) = kv.take_parsed(stringify!($name))? {
                    cfg.$name = v;
                }
            };
        }
        field!(channels);
        field!(encoder_depth);
        field!(decoder_depth);
        field!(heads);
        field!(mlp_ratio);
        field!(cr);
        field!(height);
        field!(width);
        field!(head);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = Self::take_from(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }
}

/// Closed-form parameter count.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let c = cfg.channels;
    let hidden = cfg.mlp_ratio * c;
    let tokengen = c * INPUT_CHANNELS * 27 + c;
    let block = 3 * 2 * c // three norms
        + c * c * 9 + c // spatial conv
        + 4 * (c * c + c) - c // q, k, v, out; k has no bias
        + (c * hidden + hidden) + (hidden * c + c);
    let head = 2 * c + c + 1;
    tokengen + (cfg.encoder_depth + cfg.decoder_depth) * block + head
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Xavier { fan_in: usize, fan_out: usize },
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    partition: Partition,
    init: Init,
}

fn block_slots(prefix: &str, c: usize, hidden: usize, partition: Partition, out: &mut Vec<Slot>) {
    let mut add = |suffix: &str, shape: Vec<usize>, init: Init| {
        out.push(Slot {
            name: format!("{prefix}.{suffix}"),
            shape,
            partition,
            init,
        })
    };
    let xavier = |fan_in, fan_out| Init::Xavier { fan_in, fan_out };
    add("norm1.gamma", vec![c], Init::Ones);
    add("norm1.beta", vec![c], Init::Zeros);
    add("spatial.weight", vec![c, c, 1, 3, 3], Init::Zeros);
    add("spatial.bias", vec![c], Init::Zeros);
    add("norm2.gamma", vec![c], Init::Ones);
    add("norm2.beta", vec![c], Init::Zeros);
    // keys carry no bias: a shared key offset cancels in the softmax
    add("attn.q.weight", vec![c, c], xavier(c, c));
    add("attn.q.bias", vec![c], Init::Zeros);
    add("attn.k.weight", vec![c, c], xavier(c, c));
    add("attn.v.weight", vec![c, c], xavier(c, c));
    add("attn.v.bias", vec![c], Init::Zeros);
    add("attn.out.weight", vec![c, c], Init::Zeros);
    add("attn.out.bias", vec![c], Init::Zeros);
    add("norm3.gamma", vec![c], Init::Ones);
    add("norm3.beta", vec![c], Init::Zeros);
    add("mlp.fc1.weight", vec![hidden, c], xavier(c, hidden));
    add("mlp.fc1.bias", vec![hidden], Init::Zeros);
    add("mlp.fc2.weight", vec![c, hidden], Init::Zeros);
    add("mlp.fc2.bias", vec![c], Init::Zeros);
}

fn head_slots(c: usize) -> Vec<Slot> {
    vec![
        Slot {
            name: "head.norm.gamma".into(),
            shape: vec![c],
            partition: Partition::Head,
            init: Init::Ones,
        },
        Slot {
            name: "head.norm.beta".into(),
            shape: vec![c],
            partition: Partition::Head,
            init: Init::Zeros,
        },
        Slot {
            name: "head.proj.weight".into(),
            shape: vec![1, c],
            partition: Partition::Head,
            init: Init::Xavier { fan_in: c, fan_out: 1 },
        },
        Slot {
            name: "head.proj.bias".into(),
            shape: vec![1],
            partition: Partition::Head,
            init: Init::Zeros,
        },
    ]
}

fn layout(cfg: &ModelConfig) -> Vec<Slot> {
    let c = cfg.channels;
    let hidden = cfg.mlp_ratio * c;
    let mut slots = vec![
        Slot {
            name: "tokengen.weight".into(),
            shape: vec![c, INPUT_CHANNELS, 3, 3, 3],
            partition: Partition::Encoder,
            init: Init::Xavier {
                fan_in: INPUT_CHANNELS * 27,
                fan_out: c * 27,
            },
        },
        Slot {
            name: "tokengen.bias".into(),
            shape: vec![c],
            partition: Partition::Encoder,
            init: Init::Zeros,
        },
    ];
    for i in 0..cfg.encoder_depth {
        block_slots(&format!("enc.{i}"), c, hidden, Partition::Encoder, &mut slots);
    }
    for i in 0..cfg.decoder_depth {
        block_slots(&format!("dec.{i}"), c, hidden, Partition::Decoder, &mut slots);
    }
    slots.extend(head_slots(c));
    slots
}

/// Parameter names and shapes for `cfg`, in layout order.
pub(crate) fn layout_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|s| (s.name, s.shape)).collect()
}

fn init_tensor<T: Real>(slot: &Slot, stream: &mut RandomStream) -> Tensor<T> {
    let n: usize = slot.shape.iter().product();
    let data = match slot.init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::Xavier { fan_in, fan_out } => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| T::lit(stream.uniform_range(-bound, bound))).collect()
        }
    };
    Tensor::from_vec(&slot.shape, data).unwrap()
}

pub struct Model<T: Real> {
    cfg: ModelConfig,
    params: ParamSet<T>,
    frozen: BTreeSet<Partition>,
    recording: Option<(Tape<T>, NodeId)>,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            frozen: self.frozen.clone(),
            recording: None,
        }
    }
}

impl<T: Real> Model<T> {
    /// Build with weights drawn from `stream` in parameter order.
    pub fn build(cfg: ModelConfig, stream: &mut RandomStream) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        for slot in layout(&cfg) {
            let t = init_tensor(&slot, stream);
            params.insert(&slot.name, t, slot.partition);
        }
        debug_assert_eq!(params.count(), param_count(&cfg));
        Ok(Self {
            cfg,
            params,
            frozen: BTreeSet::new(),
            recording: None,
        })
    }

    /// Wrap existing parameters; names, shapes and partitions must match `cfg`.
    pub fn from_params(cfg: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        let slots = layout(&cfg);
        if slots.len() != params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                slots.len(),
                params.len()
            )));
        }
        for (i, slot) in slots.iter().enumerate() {
            let (name, entry) = params.at(i);
            if name != slot.name || entry.tensor.shape() != slot.shape || entry.partition != slot.partition {
                return Err(Error::Data(format!(
                    "parameter {i}: expected {} {:?} ({}), found {name} {:?} ({})",
                    slot.name,
                    slot.shape,
                    slot.partition,
                    entry.tensor.shape(),
                    entry.partition
                )));
            }
        }
        Ok(Self {
            cfg,
            params,
            frozen: BTreeSet::new(),
            recording: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Swap in a freshly initialized head of another kind.
    pub fn replace_head(&mut self, kind: HeadKind, stream: &mut RandomStream) {
        self.params.remove_partition(Partition::Head);
        for slot in head_slots(self.cfg.channels) {
            let t = init_tensor(&slot, stream);
            self.params.insert(&slot.name, t, slot.partition);
        }
        self.cfg.head = kind;
        self.recording = None;
    }

    /// Mark partitions as frozen; replaces any previous freeze set.
    pub fn freeze(&mut self, tags: &[&str]) -> Result<()> {
        let mut set = BTreeSet::new();
        for tag in tags {
            set.insert(tag.parse::<Partition>()?);
        }
        self.frozen = set;
        Ok(())
    }

    pub fn is_frozen(&self, p: Partition) -> bool {
        self.frozen.contains(&p)
    }

    pub fn frozen(&self) -> impl Iterator<Item = Partition> + '_ {
        self.frozen.iter().copied()
    }

    fn record(&self, tape: &mut Tape<T>, input: &NetInput) -> Result<NodeId> {
        let cfg = &self.cfg;
        if input.h() != cfg.height || input.w() != cfg.width {
            return Err(Error::Shape(format!(
                "input is {}x{}, model expects {}x{}",
                input.h(),
                input.w(),
                cfg.height,
                cfg.width
            )));
        }
        let p: Vec<NodeId> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, (_, e))| tape.param(i, e.tensor.clone()))
            .collect();
        let mut next = 0usize;
        let mut take = || {
            next += 1;
            p[next - 1]
        };
        let check = |tape: &Tape<T>, id: NodeId, layer: &str| -> Result<()> {
            if tape.value(id).all_finite() {
                Ok(())
            } else {
                Err(Error::Numeric(format!("non-finite activation after {layer}")))
            }
        };

        let x = tape.input(input.channels.cast());
        let (w, b) = (take(), take());
        let mut x = tape.conv(x, w, b);
        check(tape, x, "tokengen")?;
        for i in 0..cfg.encoder_depth + cfg.decoder_depth {
            let (g1, b1, sw, sb, g2, b2) = (take(), take(), take(), take(), take(), take());
            let (qw, qb, kw, vw, vb, ow, ob) = (take(), take(), take(), take(), take(), take(), take());
            let (g3, b3, f1w, f1b, f2w, f2b) = (take(), take(), take(), take(), take(), take());

            let h = tape.layer_norm(x, g1, b1);
            let h = tape.conv(h, sw, sb);
            x = tape.add(x, h);

            let h = tape.layer_norm(x, g2, b2);
            let q = tape.linear(h, qw, Some(qb));
            let k = tape.linear(h, kw, None);
            let v = tape.linear(h, vw, Some(vb));
            let a = tape.temporal_attention(q, k, v, cfg.heads);
            let h = tape.linear(a, ow, Some(ob));
            x = tape.add(x, h);

            let h = tape.layer_norm(x, g3, b3);
            let h = tape.linear(h, f1w, Some(f1b));
            let h = tape.gelu(h);
            let h = tape.linear(h, f2w, Some(f2b));
            x = tape.add(x, h);

            let name = if i < cfg.encoder_depth {
                format!("encoder block {i}")
            } else {
                format!("decoder block {}", i - cfg.encoder_depth)
            };
            check(tape, x, &name)?;
        }
        let (g, b, pw, pb) = (take(), take(), take(), take());
        let h = tape.layer_norm(x, g, b);
        let z = tape.linear(h, pw, Some(pb));
        let out = match cfg.head {
            HeadKind::Reconstruction => tape.sigmoid(z),
            HeadKind::Edge => z,
            HeadKind::Depth => {
                let s = tape.sigmoid(z);
                tape.affine(s, T::lit(DEPTH_MAX - DEPTH_MIN), T::lit(DEPTH_MIN))
            }
        };
        check(tape, out, "head")?;
        Ok(out)
    }

    fn output_of(tape: &Tape<T>, id: NodeId) -> Tensor<T> {
        let v = tape.value(id);
        let s = v.shape();
        v.clone().reshape(&[s[1], s[2], s[3]]).unwrap()
    }

    /// Forward pass that records the tape for a later [`Model::backward`].
    pub fn forward(&mut self, input: &NetInput) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.record(&mut tape, input)?;
        let y = Self::output_of(&tape, out);
        self.recording = Some((tape, out));
        Ok(y)
    }

    /// Forward pass without keeping the tape.
    pub fn infer(&self, input: &NetInput) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.record(&mut tape, input)?;
        Ok(Self::output_of(&tape, out))
    }

    /// Gradients of the loss w.r.t. every parameter, given `∂L/∂output`.
    /// Consumes the recorded forward pass.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<ParamSet<T>> {
        let (tape, root) = self
            .recording
            .take()
            .ok_or_else(|| Error::Usage("backward called without a recorded forward pass".into()))?;
        let out_shape = tape.value(root).shape().to_vec();
        if grad_out.shape() != &out_shape[1..] {
            return Err(Error::Shape(format!(
                "output gradient {:?} vs output {:?}",
                grad_out.shape(),
                &out_shape[1..]
            )));
        }
        let seed = grad_out.clone().reshape(&out_shape)?;
        let mut grads = self.params.zeros_like();
        for (idx, g) in tape.backward(root, seed) {
            grads.at_mut(idx).tensor.add_assign(&g);
        }
        Ok(grads)
    }
}
