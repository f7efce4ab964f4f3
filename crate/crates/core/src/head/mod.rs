//! DETR-style detection head whose object queries are mixed by a Mamba2
//! block before deformable cross-attention onto the BEV grid.
//!
//! The query sweep follows the fixed query index, which makes the mixing
//! causal in that index. `bidirectional` averages a forward and a reversed
//! sweep instead.

mod detection;
mod loss;
mod matching;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use detection::{read_detections_csv, write_detections_csv, Detection, DetectionSet};
pub use loss::{detection_loss, LossTerms, LossWeights};
pub use matching::{assignment_cost, hungarian, match_predictions, Assignment, MatchWeights};

use crate::error::{Error, Result};
use crate::fusion::radial_offsets;
use crate::numerics::layers::{Activation, LayerNorm, Linear, NormConfig};
use crate::numerics::{ParamId, ParamStore, Scalar, ShapedArray, Tape, Var};
use crate::ssd::{Mamba2Block, Mamba2Config};

/// Width of the per-query box code `(u, v, ln l, ln w, sin, cos, vx, vy)`.
pub const BOX_CODE: usize = 8;

/// Initial placement of the query reference points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefInit {
    /// Row-major cell centers of a `⌈√Q⌉`-wide square lattice.
    #[default]
    Lattice,
    /// Uniform in `[0.05, 0.95]²`.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub num_queries: usize,
    pub layers: usize,
    /// Object classes, not counting the background class.
    pub num_classes: usize,
    pub attn_heads: usize,
    pub attn_points: usize,
    /// Radius in cells of the outermost initial sampling point.
    pub attn_radius: f64,
    pub ffn_hidden: usize,
    pub activation: Activation,
    pub bidirectional: bool,
    pub ref_init: RefInit,
    /// Train the initial reference points; otherwise they stay fixed and
    /// only the per-layer refinement moves them.
    pub learn_refs: bool,
    /// Standard deviation of the initial positional embeddings.
    pub pos_init_std: f64,
    /// Largest distance in cells the refinement may move a reference point
    /// from its initial position along each axis; 0 leaves it unbounded.
    pub max_shift: f64,
    pub matching: MatchWeights,
    pub loss: LossWeights,
    /// `d_model` must equal the BEV channel count.
    pub mamba: Mamba2Config,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_queries: 256,
            layers: 3,
            num_classes: 2,
            attn_heads: 4,
            attn_points: 4,
            attn_radius: 2.0,
            ffn_hidden: 64,
            activation: Activation::Silu,
            bidirectional: false,
            ref_init: RefInit::Lattice,
            learn_refs: false,
            max_shift: 3.0,
            pos_init_std: 1.0,
            matching: MatchWeights::default(),
            loss: LossWeights::default(),
            mamba: Mamba2Config {
                d_model: 16,
                nheads: 2,
                d_state: 8,
                ..Default::default()
            },
        }
    }
}

impl HeadConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_queries == 0 || self.layers == 0 || self.num_classes == 0 {
            return bad("head: num_queries, layers and num_classes must be >= 1".into());
        }
        if self.attn_heads == 0 || self.attn_points == 0 || channels % self.attn_heads != 0 {
            return bad(format!("head: {channels} channels not divisible into {} heads", self.attn_heads));
        }
        if !(self.max_shift >= 0.0) {
            return bad(format!("head: max_shift must be >= 0, got {}", self.max_shift));
        }
        if !(self.attn_radius > 0.0) {
            return bad(format!("head: attn_radius must be positive, got {}", self.attn_radius));
        }
        if self.ffn_hidden == 0 {
            return bad("head: ffn_hidden must be >= 1".into());
        }
        if self.mamba.d_model != channels {
            return bad(format!("head: mamba.d_model {} != {channels} channels", self.mamba.d_model));
        }
        self.mamba.validate()
    }

    pub fn background(&self) -> usize {
        self.num_classes
    }
}

/// Residual Mamba2 mixing over the query sequence followed by layer norm.
#[derive(Clone, Debug)]
pub struct QueryMixer {
    pub block: Mamba2Block,
    pub ln: LayerNorm,
    pub bidirectional: bool,
}

impl QueryMixer {
    /// `LN(q + mamba(q + pos))` for `q, pos [Q, C]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, q: Var, pos: Var) -> Result<Var> {
        let x = tape.add(q, pos)?;
        let n = tape.shape(q)[0];
        let mixed = if self.bidirectional {
            let fwd: Rc<[usize]> = (0..n).collect();
            let rev: Rc<[usize]> = (0..n).rev().collect();
            self.block.forward_multi_order(tape, x, &[fwd, rev])?
        } else {
            self.block.forward(tape, x)?
        };
        let r = tape.add(q, mixed)?;
        self.ln.forward(tape, r)
    }
}

/// Multi-head deformable attention from queries onto a BEV grid.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub heads: usize,
    pub points: usize,
    pub value: Linear,
    /// `C -> M·K·2` offsets in cells, laid out `[head][point][row, col]`.
    pub offsets: Linear,
    /// `C -> M·K` logits, softmax over the `K` points of each head.
    pub attn: Linear,
    pub out: Linear,
}

impl CrossAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        points: usize,
        radius: f64,
        rng: &mut R,
    ) -> Self {
        let offsets = Linear::new(ps, &format!("{name}.offsets"), channels, heads * points * 2, true, rng);
        *ps.get_mut(offsets.w) = ShapedArray::zeros(&[channels, heads * points * 2]);
        *ps.get_mut(offsets.b.unwrap()) = radial_offsets(1, heads, points, radius);
        let attn = Linear::new(ps, &format!("{name}.attn"), channels, heads * points, true, rng);
        *ps.get_mut(attn.w) = ShapedArray::zeros(&[channels, heads * points]);
        *ps.get_mut(attn.b.unwrap()) = ShapedArray::zeros(&[heads * points]);
        Self {
            heads,
            points,
            value: Linear::new(ps, &format!("{name}.value"), channels, channels, true, rng),
            offsets,
            attn,
            out: Linear::new(ps, &format!("{name}.out"), channels, channels, true, rng),
        }
    }

    /// `query [Q, C]`, `refs [Q, 2]` normalized `(u, v)` with `u` along
    /// columns, `bev [H, W, C]`. Returns `[Q, C]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, query: Var, refs: Var, bev: Var) -> Result<Var> {
        let bs = tape.shape(bev).to_vec();
        let q = tape.shape(query)[0];
        if bs.len() != 3 || tape.shape(refs) != [q, 2] {
            return Err(Error::dim("cross_attention", &bs, tape.shape(refs)));
        }
        let (h, w) = (bs[0], bs[1]);
        if h != w {
            return Err(Error::arg("cross_attention", format!("square grid required, got {h}x{w}")));
        }
        let (m, k) = (self.heads, self.points);
        let v = self.value.forward(tape, bev)?;
        let off = self.offsets.forward(tape, query)?;
        // (row, col) = (v·H − ½, u·W − ½) repeated for every head and point
        let cols: Rc<[usize]> = (0..m * k * 2).map(|i| 1 - i % 2).collect();
        let base = tape.gather_cols(refs, cols)?;
        let base = tape.scale(base, T::of(h as f64));
        let base = tape.add_scalar(base, T::of(-0.5));
        let loc = tape.add(base, off)?;
        let logits = self.attn.forward(tape, query)?;
        let logits = tape.reshape(logits, &[q * m, k])?;
        let a = tape.softmax_last(logits)?;
        let a = tape.reshape(a, &[q, m * k])?;
        let s = tape.deform_sample(v, loc, a, m, k)?;
        self.out.forward(tape, s)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub mix: QueryMixer,
    pub cross: CrossAttention,
    pub ln_cross: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ln_ffn: LayerNorm,
    /// `C -> 8` box code; the first two entries refine the reference logits.
    pub reg: Linear,
}

/// Learned queries, positional embeddings and reference points, decoder
/// layers and the classification branch.
#[derive(Clone, Debug)]
pub struct DetrHead {
    pub cfg: HeadConfig,
    pub channels: usize,
    pub query: ParamId,
    pub pos: ParamId,
    /// Inverse-sigmoid of the initial normalized reference points `[Q, 2]`.
    pub ref_logit: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub cls: Linear,
}

/// Raw head outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[Q, K+1]`, background last.
    pub logits: Var,
    /// `[Q, 8]` box codes with normalized centers.
    pub boxes: Var,
}

impl DetrHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cfg: &HeadConfig,
        norm: &NormConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(channels)?;
        let nq = cfg.num_queries;
        let query = ps.add(format!("{name}.query"), ShapedArray::zeros(&[nq, channels]));
        let pos = ps.add(format!("{name}.pos"), ShapedArray::randn(&[nq, channels], cfg.pos_init_std, rng));
        let refs = match cfg.ref_init {
            RefInit::Random => ShapedArray::<f64>::uniform(&[nq, 2], 0.05, 0.95, rng),
            RefInit::Lattice => {
                let g = (1..).find(|g| g * g >= nq).expect("finite");
                ShapedArray::from_fn(&[nq, 2], |i| {
                    let (q, axis) = (i / 2, i % 2);
                    let cell = if axis == 0 { q % g } else { q / g };
                    (cell as f64 + 0.5) / g as f64
                })
            }
        };
        let logits = refs.map(|p| (p / (1.0 - p)).ln()).cast();
        let ref_logit = if cfg.learn_refs {
            ps.add(format!("{name}.ref_logit"), logits)
        } else {
            ps.add_buffer(format!("{name}.ref_logit"), logits)
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let n = format!("{name}.layer{i}");
            layers.push(DecoderLayer {
                mix: QueryMixer {
                    block: Mamba2Block::new(ps, &format!("{n}.mamba"), &cfg.mamba, rng)?,
                    ln: LayerNorm::new(ps, &format!("{n}.ln_mix"), channels, norm.ln_eps),
                    bidirectional: cfg.bidirectional,
                },
                cross: CrossAttention::new(ps, &format!("{n}.cross"), channels, cfg.attn_heads, cfg.attn_points, cfg.attn_radius, rng),
                ln_cross: LayerNorm::new(ps, &format!("{n}.ln_cross"), channels, norm.ln_eps),
                ffn_in: Linear::new(ps, &format!("{n}.ffn_in"), channels, cfg.ffn_hidden, true, rng),
                ffn_out: Linear::new(ps, &format!("{n}.ffn_out"), cfg.ffn_hidden, channels, true, rng),
                ln_ffn: LayerNorm::new(ps, &format!("{n}.ln_ffn"), channels, norm.ln_eps),
                reg: Linear::new(ps, &format!("{n}.reg"), channels, BOX_CODE, true, rng),
            });
            let reg = &layers[i].reg;
            *ps.get_mut(reg.w) = ShapedArray::zeros(&[channels, BOX_CODE]);
            *ps.get_mut(reg.b.expect("biased")) = ShapedArray::zeros(&[BOX_CODE]);
        }
        let cls = Linear::new(ps, &format!("{name}.cls"), channels, cfg.num_classes + 1, true, rng);
        Ok(Self {
            cfg: cfg.clone(),
            channels,
            query,
            pos,
            ref_logit,
            layers,
            cls,
        })
    }

    /// Decode `bev [H, W, C]` into class logits and box codes for every query.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bev: Var) -> Result<HeadOutput> {
        let bs = tape.shape(bev).to_vec();
        if bs.len() != 3 || bs[2] != self.channels {
            return Err(Error::dim("detr_head", &bs, &[self.channels]));
        }
        let mut q = tape.param(self.query);
        let pos = tape.param(self.pos);
        let ref_logit = tape.param(self.ref_logit);
        let ref0 = tape.sigmoid(ref_logit);
        // refinement accumulates in logit space; bounded mode squashes it
        // into ±max_shift cells around the initial point
        let span = 2.0 * self.cfg.max_shift / bs[0] as f64;
        let place = |tape: &mut Tape<T>, acc: Option<Var>| -> Result<Var> {
            match acc {
                None => Ok(ref0),
                Some(a) if span > 0.0 => {
                    let s = tape.sigmoid(a);
                    let s = tape.add_scalar(s, T::of(-0.5));
                    let s = tape.scale(s, T::of(span));
                    tape.add(ref0, s)
                }
                Some(a) => {
                    let l = tape.add(ref_logit, a)?;
                    Ok(tape.sigmoid(l))
                }
            }
        };
        let mut acc: Option<Var> = None;
        let mut reg = None;
        for layer in &self.layers {
            q = layer.mix.forward(tape, q, pos)?;
            let refs = place(tape, acc)?;
            let qp = tape.add(q, pos)?;
            let a = layer.cross.forward(tape, qp, refs, bev)?;
            let r = tape.add(q, a)?;
            q = layer.ln_cross.forward(tape, r)?;
            let f = layer.ffn_in.forward(tape, q)?;
            let f = self.cfg.activation.apply(tape, f);
            let f = layer.ffn_out.forward(tape, f)?;
            let r = tape.add(q, f)?;
            q = layer.ln_ffn.forward(tape, r)?;
            let code = layer.reg.forward(tape, q)?;
            let dxy = tape.slice_last(code, 0, 2)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, dxy)?,
                None => dxy,
            });
            reg = Some(code);
        }
        let centers = place(tape, acc)?;
        let rest = tape.slice_last(reg.expect("at least one layer"), 2, BOX_CODE - 2)?;
        let boxes = tape.concat_last(&[centers, rest])?;
        let logits = self.cls.forward(tape, q)?;
        Ok(HeadOutput { logits, boxes })
    }

    /// Class probabilities `[Q][K+1]` and normalized centers of an output.
    pub fn probs_and_centers<T: Scalar>(&self, tape: &Tape<T>, out: &HeadOutput) -> Result<(Vec<Vec<f64>>, Vec<[f64; 2]>)> {
        let p = crate::numerics::kernels::softmax_last(tape.value(out.logits))?;
        let probs = (0..p.rows()).map(|r| p.row(r).iter().map(|v| v.as_f64()).collect()).collect();
        let b = tape.value(out.boxes);
        let centers = (0..b.rows()).map(|r| [b.row(r)[0].as_f64(), b.row(r)[1].as_f64()]).collect();
        Ok((probs, centers))
    }

    /// Metric detections for one frame. The score is the highest object-class
    /// probability and the class its argmax.
    pub fn detections<T: Scalar>(&self, tape: &Tape<T>, out: &HeadOutput, range: f64, frame: usize) -> Result<DetectionSet> {
        let (probs, _) = self.probs_and_centers(tape, out)?;
        let b = tape.value(out.boxes);
        let k = self.cfg.num_classes;
        let boxes = probs
            .iter()
            .enumerate()
            .map(|(r, p)| {
                let (class, score) = p[..k]
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, v)| if v > best.1 { (c, v) } else { best });
                let code: Vec<f64> = b.row(r).iter().map(|v| v.as_f64()).collect();
                Detection::decode(&code, range, class, score)
            })
            .collect();
        Ok(DetectionSet::new(frame, boxes))
    }
}

#[cfg(test)]
mod tests;
