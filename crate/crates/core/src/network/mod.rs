//! Dual-decoder U-shaped segmentation network.
//!
//! One encoder feeds two decoders that differ only in how they up-sample:
//! decoder A uses 2×2 stride-2 transposed convolutions, decoder B uses
//! nearest-neighbour up-sampling followed by a 3×3 convolution. Each decoder
//! ends in a single-channel 1×1 convolution producing logits.
//!
//! All weights live in one flat `Vec<f64>`; [`Layout`] maps layers onto it so
//! the optimizer and checkpoints can treat parameters as a single vector.

mod layers;
mod optim;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_model::{BinaryMask, ImageSlice, ProbabilityMap};
use crate::error::{Error, Result};
use layers::Tensor;

pub use optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Number of 2× down-sampling steps.
    pub depth: usize,
    /// Channels at full resolution; doubled at every level.
    pub base_channels: usize,
}

impl Architecture {
    pub fn new(depth: usize, base_channels: usize) -> Self {
        Self { depth, base_channels }
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if height == 0 || width == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return Err(Error::ShapeDepthMismatch {
                height,
                width,
                depth: self.depth,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Decoder {
    A,
    B,
}

#[derive(Debug, Clone)]
struct Slot {
    weight: Range<usize>,
    bias: Range<usize>,
    fan_in: usize,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    up: Slot,
    convs: [Slot; 2],
}

#[derive(Debug, Clone)]
struct DecoderLayout {
    kind: Decoder,
    /// Indexed by the level the block outputs at (0 = full resolution).
    levels: Vec<DecoderLevel>,
    head: Slot,
}

/// Offsets of every layer inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<[Slot; 2]>,
    decoders: [DecoderLayout; 2],
    len: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let mut cursor = 0;
        let mut slot = |weights: usize, biases: usize, fan_in: usize| {
            let weight = cursor..cursor + weights;
            cursor += weights;
            let bias = cursor..cursor + biases;
            cursor += biases;
            Slot { weight, bias, fan_in }
        };
        let mut encoder = Vec::with_capacity(arch.depth + 1);
        for level in 0..=arch.depth {
            let cout = arch.channels(level);
            let cin = if level == 0 { 1 } else { arch.channels(level - 1) };
            encoder.push([
                slot(cout * cin * 9, cout, cin * 9),
                slot(cout * cout * 9, cout, cout * 9),
            ]);
        }
        let mut decoder = |kind: Decoder| {
            let mut levels = Vec::with_capacity(arch.depth);
            for level in 0..arch.depth {
                let c = arch.channels(level);
                let cin = arch.channels(level + 1);
                let up = match kind {
                    Decoder::A => slot(c * 4 * cin, c, cin),
                    Decoder::B => slot(c * cin * 9, c, cin * 9),
                };
                levels.push(DecoderLevel {
                    up,
                    convs: [slot(c * 2 * c * 9, c, 2 * c * 9), slot(c * c * 9, c, c * 9)],
                });
            }
            let c0 = arch.channels(0);
            DecoderLayout {
                kind,
                levels,
                head: slot(c0, 1, c0),
            }
        };
        let a = decoder(Decoder::A);
        let b = decoder(Decoder::B);
        Self {
            encoder,
            decoders: [a, b],
            len: cursor,
        }
    }

    fn slots(&self) -> impl Iterator<Item = &Slot> {
        let enc = self.encoder.iter().flat_map(|pair| pair.iter());
        let dec = self.decoders.iter().flat_map(|d| {
            d.levels
                .iter()
                .flat_map(|l| std::iter::once(&l.up).chain(l.convs.iter()))
                .chain(std::iter::once(&d.head))
        });
        enc.chain(dec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamState {
    Uninitialized,
    Initialized,
    Trained,
}

/// Encoder and both decoders' weights plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParameters {
    arch: Architecture,
    state: ParamState,
    values: Vec<f64>,
}

impl NetworkParameters {
    /// All-zero weights, flagged uninitialized.
    pub fn zeros(arch: Architecture) -> Self {
        let len = Layout::new(&arch).len;
        Self {
            arch,
            state: ParamState::Uninitialized,
            values: vec![0.0; len],
        }
    }

    /// He-normal weights, zero biases. Decoders draw independently of each
    /// other and of the encoder.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let layout = Layout::new(&arch);
        let mut values = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in layout.slots() {
            let std = (2.0 / slot.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in &mut values[slot.weight.clone()] {
                *v = normal.sample(&mut rng);
            }
        }
        Self {
            arch,
            state: ParamState::Initialized,
            values,
        }
    }

    pub fn from_values(arch: Architecture, state: ParamState, values: Vec<f64>) -> Result<Self> {
        let expected = Layout::new(&arch).len;
        if values.len() != expected {
            return Err(Error::Checkpoint(format!(
                "parameter vector holds {} values, architecture needs {expected}",
                values.len()
            )));
        }
        Ok(Self { arch, state, values })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn state(&self) -> ParamState {
        self.state
    }

    pub fn set_state(&mut self, state: ParamState) {
        self.state = state;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Range of the encoder's parameters within [`values`](Self::values).
    pub fn encoder_range(&self) -> Range<usize> {
        0..self.decoder_ranges()[0].start
    }

    /// Ranges of decoder A and decoder B parameters.
    pub fn decoder_ranges(&self) -> [Range<usize>; 2] {
        let layout = Layout::new(&self.arch);
        let start_a = layout.decoders[0].levels[0].up.weight.start;
        let start_b = layout.decoders[1].levels[0].up.weight.start;
        [start_a..start_b, start_b..layout.len]
    }
}

/// Logits and probabilities of both decoders at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutputs {
    pub logits_a: Vec<f64>,
    pub logits_b: Vec<f64>,
    pub p_a: ProbabilityMap,
    pub p_b: ProbabilityMap,
}

struct Block {
    input: Tensor,
    hidden: Tensor,
    output: Tensor,
}

struct DecoderTape {
    /// Per level, outermost first in execution order (deepest level first).
    up_inputs: Vec<Tensor>,
    /// Nearest-up-sampled inputs (decoder B only).
    up_sampled: Vec<Option<Tensor>>,
    blocks: Vec<Block>,
}

/// Activations recorded by [`forward_with_tape`] for [`backward`].
pub struct Tape {
    h: usize,
    w: usize,
    encoder: Vec<Block>,
    pool_argmax: Vec<Vec<u32>>,
    decoders: [DecoderTape; 2],
    p_a: Vec<f64>,
    p_b: Vec<f64>,
}

fn slot_params<'a>(values: &'a [f64], slot: &Slot) -> (&'a [f64], &'a [f64]) {
    (&values[slot.weight.clone()], &values[slot.bias.clone()])
}

fn block_forward(values: &[f64], convs: &[Slot; 2], input: Tensor) -> Block {
    let (w1, b1) = slot_params(values, &convs[0]);
    let mut hidden = layers::conv3_forward(&input, w1, b1);
    layers::relu_inplace(&mut hidden);
    let (w2, b2) = slot_params(values, &convs[1]);
    let mut output = layers::conv3_forward(&hidden, w2, b2);
    layers::relu_inplace(&mut output);
    Block {
        input,
        hidden,
        output,
    }
}

fn block_backward(
    values: &[f64],
    convs: &[Slot; 2],
    block: &Block,
    mut dout: Tensor,
    grad: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor> {
    layers::relu_backward_inplace(&block.output, &mut dout);
    let mut dhidden = {
        let (dw, db) = split_grad(grad, &convs[1]);
        layers::conv3_backward(
            &block.hidden,
            &values[convs[1].weight.clone()],
            &dout,
            dw,
            db,
            true,
        )
        .expect("input grad requested")
    };
    layers::relu_backward_inplace(&block.hidden, &mut dhidden);
    let (dw, db) = split_grad(grad, &convs[0]);
    layers::conv3_backward(
        &block.input,
        &values[convs[0].weight.clone()],
        &dhidden,
        dw,
        db,
        need_input_grad,
    )
}

/// Disjoint mutable views of a slot's weight and bias gradients.
fn split_grad<'a>(grad: &'a mut [f64], slot: &Slot) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(slot.weight.end, slot.bias.start);
    let (w, rest) = grad[slot.weight.start..slot.bias.end].split_at_mut(slot.weight.len());
    (w, rest)
}

fn run_forward(params: &NetworkParameters, image: &ImageSlice) -> Result<(DecoderOutputs, Tape)> {
    let arch = params.arch;
    let (h, w) = image.shape();
    arch.check_input(h, w)?;
    let layout = Layout::new(&arch);
    let values = &params.values;

    let mut encoder = Vec::with_capacity(arch.depth + 1);
    let mut pool_argmax = Vec::with_capacity(arch.depth);
    let mut x = Tensor::from_vec(1, h, w, image.pixels().to_vec());
    for level in 0..=arch.depth {
        let block = block_forward(values, &layout.encoder[level], x);
        if level < arch.depth {
            let (pooled, argmax) = layers::maxpool2_forward(&block.output);
            pool_argmax.push(argmax);
            x = pooled;
        } else {
            x = Tensor::zeros(0, 0, 0);
        }
        encoder.push(block);
    }

    let mut logits = Vec::with_capacity(2);
    let mut tapes = Vec::with_capacity(2);
    for dec in &layout.decoders {
        let mut current = encoder[arch.depth].output.clone();
        let mut up_inputs = Vec::with_capacity(arch.depth);
        let mut up_sampled = Vec::with_capacity(arch.depth);
        let mut blocks = Vec::with_capacity(arch.depth);
        for level in (0..arch.depth).rev() {
            let lvl = &dec.levels[level];
            let (uw, ub) = slot_params(values, &lvl.up);
            let (up, sampled) = match dec.kind {
                Decoder::A => (layers::convt2_forward(&current, uw, ub), None),
                Decoder::B => {
                    let s = layers::upsample2_forward(&current);
                    (layers::conv3_forward(&s, uw, ub), Some(s))
                }
            };
            let cat = layers::concat(&up, &encoder[level].output);
            let block = block_forward(values, &lvl.convs, cat);
            up_inputs.push(std::mem::replace(&mut current, block.output.clone()));
            up_sampled.push(sampled);
            blocks.push(block);
        }
        let (hw_, hb) = slot_params(values, &dec.head);
        logits.push(layers::conv1_forward(&current, hw_, hb[0]));
        tapes.push(DecoderTape {
            up_inputs,
            up_sampled,
            blocks,
        });
    }

    let logits_b = logits.pop().expect("two decoders");
    let logits_a = logits.pop().expect("two decoders");
    let p_a = ProbabilityMap::from_logits(h, w, &logits_a);
    let p_b = ProbabilityMap::from_logits(h, w, &logits_b);
    let tape_b = tapes.pop().expect("two decoders");
    let tape_a = tapes.pop().expect("two decoders");
    let tape = Tape {
        h,
        w,
        encoder,
        pool_argmax,
        decoders: [tape_a, tape_b],
        p_a: p_a.pixels().to_vec(),
        p_b: p_b.pixels().to_vec(),
    };
    Ok((
        DecoderOutputs {
            logits_a,
            logits_b,
            p_a,
            p_b,
        },
        tape,
    ))
}

/// Runs the encoder and both decoders on one slice.
pub fn forward(params: &NetworkParameters, image: &ImageSlice) -> Result<DecoderOutputs> {
    run_forward(params, image).map(|(out, _)| out)
}

/// Like [`forward`], also recording what [`backward`] needs.
pub fn forward_with_tape(params: &NetworkParameters, image: &ImageSlice) -> Result<(DecoderOutputs, Tape)> {
    run_forward(params, image)
}

/// Gradient of a scalar loss with respect to every parameter, given the
/// loss gradient with respect to each decoder's probabilities.
pub fn backward(params: &NetworkParameters, tape: &Tape, d_p_a: &[f64], d_p_b: &[f64]) -> Vec<f64> {
    let arch = params.arch;
    let layout = Layout::new(&arch);
    let values = &params.values;
    let mut grad = vec![0.0; layout.len];
    let hw = tape.h * tape.w;
    assert_eq!(d_p_a.len(), hw);
    assert_eq!(d_p_b.len(), hw);

    let mut d_bottleneck = Tensor::zeros(
        arch.channels(arch.depth),
        tape.h >> arch.depth,
        tape.w >> arch.depth,
    );
    let mut d_skips: Vec<Tensor> = (0..arch.depth)
        .map(|l| Tensor::zeros(arch.channels(l), tape.h >> l, tape.w >> l))
        .collect();

    for (di, dec) in layout.decoders.iter().enumerate() {
        let dtape = &tape.decoders[di];
        let (probs, d_p) = if di == 0 {
            (&tape.p_a, d_p_a)
        } else {
            (&tape.p_b, d_p_b)
        };
        let d_logits: Vec<f64> = d_p.iter().zip(probs).map(|(g, p)| g * p * (1.0 - p)).collect();
        let head_in = &dtape.blocks.last().expect("depth >= 1").output;
        let mut d_current = {
            let (dw, db) = split_grad(&mut grad, &dec.head);
            layers::conv1_backward(
                head_in,
                &values[dec.head.weight.clone()],
                &d_logits,
                dw,
                &mut db[0],
            )
        };
        // Blocks were recorded deepest level first.
        for (level, (lvl, d_skip_acc)) in dec.levels.iter().zip(d_skips.iter_mut()).enumerate() {
            let idx = arch.depth - 1 - level;
            let block = &dtape.blocks[idx];
            let d_cat = block_backward(values, &lvl.convs, block, d_current, &mut grad, true)
                .expect("input grad requested");
            let (d_up, d_skip) = layers::split(d_cat, arch.channels(level));
            for (a, b) in d_skip_acc.data.iter_mut().zip(&d_skip.data) {
                *a += b;
            }
            let up_in = &dtape.up_inputs[idx];
            let (dw, db) = split_grad(&mut grad, &lvl.up);
            let uw = &values[lvl.up.weight.clone()];
            d_current = match dec.kind {
                Decoder::A => layers::convt2_backward(up_in, uw, &d_up, dw, db),
                Decoder::B => {
                    let sampled = dtape.up_sampled[idx].as_ref().expect("decoder B records samples");
                    let d_sampled = layers::conv3_backward(sampled, uw, &d_up, dw, db, true)
                        .expect("input grad requested");
                    layers::upsample2_backward(&d_sampled)
                }
            };
        }
        for (a, b) in d_bottleneck.data.iter_mut().zip(&d_current.data) {
            *a += b;
        }
    }

    let mut d_out = d_bottleneck;
    for level in (0..=arch.depth).rev() {
        if level < arch.depth {
            let below = &tape.encoder[level].output;
            let mut d =
                layers::maxpool2_backward(&d_out, &tape.pool_argmax[level], below.c, below.h, below.w);
            for (a, b) in d.data.iter_mut().zip(&d_skips[level].data) {
                *a += b;
            }
            d_out = d;
        }
        let need_input = level > 0;
        match block_backward(
            values,
            &layout.encoder[level],
            &tape.encoder[level],
            d_out,
            &mut grad,
            need_input,
        ) {
            Some(d_in) => d_out = d_in,
            None => break,
        }
    }
    grad
}

/// `pixel = 1` iff `p > threshold` (strict).
pub fn binarize(p: &ProbabilityMap, threshold: f64) -> BinaryMask {
    binarize_values(p.height(), p.width(), p.pixels(), threshold)
}

pub(crate) fn binarize_values(height: usize, width: usize, values: &[f64], threshold: f64) -> BinaryMask {
    BinaryMask::from_raw(
        height,
        width,
        values.iter().map(|&v| u8::from(v > threshold)).collect(),
    )
}
