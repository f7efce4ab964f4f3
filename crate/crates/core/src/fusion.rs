//! Temporal fusion of the current BEV grid with an aligned historical grid.
//!
//! The main path mixes the two grids with a two-branch convolution block,
//! sweeps the mixed grid in four directions with one shared Mamba2 block,
//! re-merges, and adds the dropout-regularized result to the current grid.
//! Baseline modes replace the mixer or the whole path for ablations.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bevseq::{build_layout, ego_align, remerge_tape, AlignConfig, BevGrid, DirectionalLayout, EgoPose};
use crate::error::{Error, Result};
use crate::numerics::layers::{Activation, BatchNorm, Conv2d, LayerNorm, Linear, NormConfig};
use crate::numerics::{Mode, ParamStore, Scalar, ShapedArray, Tape, Var};
use crate::ssd::{Mamba2Block, Mamba2Config};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    TemporalMamba,
    DeformableTsaBaseline,
    ConcatBaseline,
    None,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::TemporalMamba => "temporal_mamba",
            FusionMode::DeformableTsaBaseline => "deformable_tsa_baseline",
            FusionMode::ConcatBaseline => "concat_baseline",
            FusionMode::None => "none",
        }
    }

    pub fn uses_history(self) -> bool {
        self != FusionMode::None
    }
}

/// How the current and historical grids enter the convolution block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// Channel concatenation, `2C` input channels.
    #[default]
    Concat,
    /// Elementwise sum, `C` input channels.
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Spatial kernel of the second convolution branch (3 or 5).
    pub kernel: usize,
    /// Number of scan directions (1 or 4).
    pub directions: usize,
    /// Drop probability on the fused branch before the skip addition.
    pub dropout: f64,
    pub share_direction_weights: bool,
    /// Start the sweep output projection at zero so the block begins as the
    /// identity on the current grid.
    pub zero_init_out: bool,
    pub combine: Combine,
    pub activation: Activation,
    pub align: AlignConfig,
    pub tsa_heads: usize,
    pub tsa_points: usize,
    pub mamba: Mamba2Config,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::TemporalMamba,
            kernel: 3,
            directions: 4,
            dropout: 0.1,
            share_direction_weights: true,
            zero_init_out: true,
            combine: Combine::Concat,
            activation: Activation::Silu,
            align: AlignConfig::default(),
            tsa_heads: 4,
            tsa_points: 4,
            mamba: Mamba2Config {
                d_model: 16,
                nheads: 2,
                d_state: 8,
                ..Default::default()
            },
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.kernel != 3 && self.kernel != 5 {
            return Err(Error::Config(format!("fusion.kernel must be 3 or 5, got {}", self.kernel)));
        }
        if self.directions != 1 && self.directions != 4 {
            return Err(Error::Config(format!("fusion.directions must be 1 or 4, got {}", self.directions)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("fusion.dropout must be in [0, 1), got {}", self.dropout)));
        }
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::Config(format!("BEV channels must be even and >= 2, got {channels}")));
        }
        if self.tsa_heads == 0 || self.tsa_points == 0 || channels % self.tsa_heads != 0 {
            return Err(Error::Config(format!(
                "need tsa_heads >= 1 dividing {channels} and tsa_points >= 1, got {} and {}",
                self.tsa_heads, self.tsa_points
            )));
        }
        self.mamba.validate()
    }
}

/// Two parallel convolution branches over the combined grids, each with its
/// own batch normalization and `C/2` outputs, then activation, a linear map
/// and layer normalization.
#[derive(Clone, Debug)]
pub struct ConvFuse {
    pub combine: Combine,
    pub activation: Activation,
    pub branch_a: Conv2d,
    pub bn_a: BatchNorm,
    pub branch_b: Conv2d,
    pub bn_b: BatchNorm,
    pub post: Linear,
    pub ln: LayerNorm,
}

impl ConvFuse {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cfg: &FusionConfig,
        norm: &NormConfig,
        rng: &mut R,
    ) -> Self {
        let cin = match cfg.combine {
            Combine::Concat => 2 * channels,
            Combine::Add => channels,
        };
        let half = channels / 2;
        Self {
            combine: cfg.combine,
            activation: cfg.activation,
            branch_a: Conv2d::new(ps, &format!("{name}.branch_a"), 1, cin, half, rng),
            bn_a: BatchNorm::new(ps, &format!("{name}.bn_a"), half, norm),
            branch_b: Conv2d::new(ps, &format!("{name}.branch_b"), cfg.kernel, cin, half, rng),
            bn_b: BatchNorm::new(ps, &format!("{name}.bn_b"), half, norm),
            post: Linear::new(ps, &format!("{name}.post"), channels, channels, true, rng),
            ln: LayerNorm::new(ps, &format!("{name}.ln"), channels, norm.ln_eps),
        }
    }

    /// `cur, hist [H, W, C]` to `[H, W, C]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, cur: Var, hist: Var, mode: Mode) -> Result<Var> {
        if tape.shape(cur) != tape.shape(hist) || tape.shape(cur).len() != 3 {
            return Err(Error::dim("conv_fuse", tape.shape(cur), tape.shape(hist)));
        }
        let x = match self.combine {
            Combine::Concat => tape.concat_last(&[cur, hist])?,
            Combine::Add => tape.add(cur, hist)?,
        };
        let a = self.branch_a.forward(tape, x)?;
        let a = self.bn_a.forward(tape, a, mode)?;
        let b = self.branch_b.forward(tape, x)?;
        let b = self.bn_b.forward(tape, b, mode)?;
        let f = tape.concat_last(&[a, b])?;
        let f = self.activation.apply(tape, f);
        let f = self.post.forward(tape, f)?;
        self.ln.forward(tape, f)
    }
}

/// Projection into the Mamba2 width, directional sweep(s), re-merge and
/// projection back.
#[derive(Clone, Debug)]
pub struct DirectionalSweep {
    pub proj_in: Linear,
    /// One block when weights are shared, otherwise one per direction.
    pub blocks: Vec<Mamba2Block>,
    pub proj_out: Linear,
    pub directions: usize,
}

impl DirectionalSweep {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cfg: &FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.mamba.d_model;
        let nblocks = if cfg.share_direction_weights { 1 } else { cfg.directions };
        let blocks = (0..nblocks)
            .map(|i| Mamba2Block::new(ps, &format!("{name}.mamba{i}"), &cfg.mamba, rng))
            .collect::<Result<_>>()?;
        let proj_in = Linear::new(ps, &format!("{name}.proj_in"), channels, d, true, rng);
        let proj_out = Linear::new(ps, &format!("{name}.proj_out"), d, channels, true, rng);
        if cfg.zero_init_out {
            *ps.get_mut(proj_out.w) = ShapedArray::zeros(&[d, channels]);
            *ps.get_mut(proj_out.b.expect("biased")) = ShapedArray::zeros(&[channels]);
        }
        Ok(Self {
            proj_in,
            blocks,
            proj_out,
            directions: cfg.directions,
        })
    }

    /// `z [H·W, C]` in grid order to `[H·W, C]` in grid order.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, z: Var, layout: &DirectionalLayout) -> Result<Var> {
        let x = self.proj_in.forward(tape, z)?;
        let orders = layout.orders(self.directions)?;
        let y = if self.blocks.len() == 1 {
            self.blocks[0].forward_multi_order(tape, x, &orders)?
        } else {
            let mut seqs = Vec::with_capacity(orders.len());
            for (blk, order) in self.blocks.iter().zip(&orders) {
                let s = tape.gather_rows(x, order.clone())?;
                seqs.push(blk.forward(tape, s)?);
            }
            remerge_tape(tape, &seqs, layout)?
        };
        self.proj_out.forward(tape, y)
    }
}

/// Initial sampling offsets in cells, laid out `[group][head][point][row, col]`:
/// head `m` looks along angle `2πm/M`, point `k` at radius `radius·(k+1)/K`.
pub(crate) fn radial_offsets<T: Scalar>(groups: usize, heads: usize, points: usize, radius: f64) -> ShapedArray<T> {
    ShapedArray::from_fn(&[groups * heads * points * 2], |i| {
        let (m, k, axis) = ((i / (points * 2)) % heads, (i / 2) % points, i % 2);
        let ang = 2.0 * PI * m as f64 / heads as f64;
        let r = radius * (k + 1) as f64 / points as f64;
        T::of(if axis == 0 { r * ang.sin() } else { r * ang.cos() })
    })
}

/// Per-cell deformable attention over the current and historical grids.
#[derive(Clone, Debug)]
pub struct DeformableTsa {
    pub heads: usize,
    pub points: usize,
    pub value: Linear,
    /// `2C -> 2·M·K·2` offsets in cells, laid out `[frame][head][point][row, col]`.
    pub offsets: Linear,
    /// `2C -> M·2K` logits, laid out `[head][frame][point]`.
    pub attn: Linear,
    pub out: Linear,
}

impl DeformableTsa {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        points: usize,
        rng: &mut R,
    ) -> Self {
        let offsets = Linear::new(ps, &format!("{name}.offsets"), 2 * channels, 2 * heads * points * 2, true, rng);
        *ps.get_mut(offsets.w) = ShapedArray::zeros(&[2 * channels, 2 * heads * points * 2]);
        *ps.get_mut(offsets.b.unwrap()) = radial_offsets(2, heads, points, 0.5 * points as f64);
        Self {
            heads,
            points,
            value: Linear::new(ps, &format!("{name}.value"), channels, channels, true, rng),
            offsets,
            attn: Linear::new(ps, &format!("{name}.attn"), 2 * channels, heads * 2 * points, true, rng),
            out: Linear::new(ps, &format!("{name}.out"), channels, channels, true, rng),
        }
    }

    /// `cur, hist [H, W, C]` to `[H·W, C]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, cur: Var, hist: Var) -> Result<Var> {
        let s = tape.shape(cur).to_vec();
        if s.len() != 3 || tape.shape(hist) != s.as_slice() {
            return Err(Error::dim("deformable_tsa", &s, tape.shape(hist)));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (m, k) = (self.heads, self.points);
        let l = h * w;
        let q_cur = tape.reshape(cur, &[l, c])?;
        let q_hist = tape.reshape(hist, &[l, c])?;
        let cat = tape.concat_last(&[q_cur, q_hist])?;
        let off = self.offsets.forward(tape, cat)?;
        let base = ShapedArray::from_fn(&[l, m * k * 2], |i| {
            let cell = i / (m * k * 2);
            T::of(if i % 2 == 0 { (cell / w) as f64 } else { (cell % w) as f64 })
        });
        let base = tape.constant(base);
        let logits = self.attn.forward(tape, cat)?;
        let logits = tape.reshape(logits, &[l * m, 2 * k])?;
        let weights = tape.softmax_last(logits)?;
        let weights = tape.reshape(weights, &[l, m * 2 * k])?;
        let mut acc = None;
        for (f, grid) in [cur, hist].into_iter().enumerate() {
            let v = self.value.forward(tape, grid)?;
            let loc = tape.slice_last(off, f * m * k * 2, m * k * 2)?;
            let loc = tape.add(loc, base)?;
            let cols: Rc<[usize]> = (0..m).flat_map(|mm| (0..k).map(move |kk| mm * 2 * k + f * k + kk)).collect();
            let a = tape.gather_cols(weights, cols)?;
            let sampled = tape.deform_sample(v, loc, a, m, k)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, sampled)?,
                None => sampled,
            });
        }
        self.out.forward(tape, acc.unwrap())
    }
}

/// Concatenation followed by a linear map back to `C` channels and layer
/// normalization.
#[derive(Clone, Debug)]
pub struct ConcatMix {
    pub lin: Linear,
    pub ln: LayerNorm,
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Conv(ConvFuse),
    Concat(ConcatMix),
}

/// One temporal fusion block in any [`FusionMode`].
#[derive(Clone, Debug)]
pub struct TemporalFusion {
    pub cfg: FusionConfig,
    pub channels: usize,
    pub layout: DirectionalLayout,
    pub mixer: Option<Mixer>,
    pub sweep: Option<DirectionalSweep>,
    pub tsa: Option<DeformableTsa>,
}

impl TemporalFusion {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        grid: usize,
        cfg: &FusionConfig,
        norm: &NormConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(channels)?;
        let layout = build_layout(grid, grid)?;
        let (mut mixer, mut sweep, mut tsa) = (None, None, None);
        match cfg.mode {
            FusionMode::TemporalMamba => {
                mixer = Some(Mixer::Conv(ConvFuse::new(ps, &format!("{name}.fuse"), channels, cfg, norm, rng)));
                sweep = Some(DirectionalSweep::new(ps, &format!("{name}.sweep"), channels, cfg, rng)?);
            }
            FusionMode::ConcatBaseline => {
                mixer = Some(Mixer::Concat(ConcatMix {
                    lin: Linear::new(ps, &format!("{name}.concat"), 2 * channels, channels, true, rng),
                    ln: LayerNorm::new(ps, &format!("{name}.concat_ln"), channels, norm.ln_eps),
                }));
                sweep = Some(DirectionalSweep::new(ps, &format!("{name}.sweep"), channels, cfg, rng)?);
            }
            FusionMode::DeformableTsaBaseline => {
                tsa = Some(DeformableTsa::new(ps, &format!("{name}.tsa"), channels, cfg.tsa_heads, cfg.tsa_points, rng));
            }
            FusionMode::None => {}
        }
        Ok(Self {
            cfg: cfg.clone(),
            channels,
            layout,
            mixer,
            sweep,
            tsa,
        })
    }

    /// The fused branch before dropout and the skip addition: `[H, W, C]`.
    pub fn fused_branch<T: Scalar>(&self, tape: &mut Tape<T>, cur: Var, hist: Var, mode: Mode) -> Result<Option<Var>> {
        let s = tape.shape(cur).to_vec();
        if s != [self.layout.h, self.layout.w, self.channels] || tape.shape(hist) != s.as_slice() {
            return Err(Error::dim("temporal_fusion", &s, tape.shape(hist)));
        }
        let l = self.layout.len();
        let z = match (&self.mixer, &self.tsa) {
            (Some(Mixer::Conv(cf)), _) => {
                let z = cf.forward(tape, cur, hist, mode)?;
                tape.reshape(z, &[l, self.channels])?
            }
            (Some(Mixer::Concat(cm)), _) => {
                let cat = tape.concat_last(&[cur, hist])?;
                let cat = tape.reshape(cat, &[l, 2 * self.channels])?;
                let z = cm.lin.forward(tape, cat)?;
                cm.ln.forward(tape, z)?
            }
            (None, Some(tsa)) => {
                let y = tsa.forward(tape, cur, hist)?;
                return Ok(Some(tape.reshape(y, &s)?));
            }
            (None, None) => return Ok(None),
        };
        let sweep = self.sweep.as_ref().expect("mixer modes carry a sweep");
        let y = sweep.forward(tape, z, &self.layout)?;
        Ok(Some(tape.reshape(y, &s)?))
    }

    /// Align `hist` into the current frame, fuse, and add the dropout-
    /// regularized fused branch to `cur`. `hist = None` uses `cur` as its
    /// own history.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        cur: Var,
        hist: Option<&BevGrid<T>>,
        delta: &EgoPose,
        mode: Mode,
        seed: u64,
    ) -> Result<Var> {
        if !self.cfg.mode.uses_history() {
            return Ok(cur);
        }
        let hist = match hist {
            Some(g) => {
                let aligned = ego_align(g, delta, self.cfg.align)?;
                tape.constant(aligned.data)
            }
            None => cur,
        };
        let fused = self.fused_branch(tape, cur, hist, mode)?.expect("history modes fuse");
        let fused = tape.dropout(fused, self.cfg.dropout, mode, seed)?;
        tape.add(cur, fused)
    }
}
