//! Temporal fusion followed by the detection head, run over a sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::scene::Sequence;
use crate::bevseq::{BevGrid, EgoPose};
use crate::error::{Error, Result};
use crate::fusion::TemporalFusion;
use crate::head::{DetectionSet, DetrHead, HeadOutput};
use crate::numerics::container::{encode_record, read_file, write_file};
use crate::numerics::{Mode, ParamStore, Tape, Var};

/// Parameter layout of a detector; values live in a separate store.
#[derive(Clone, Debug)]
pub struct Model {
    pub fusion: TemporalFusion,
    pub head: DetrHead,
    pub range: f64,
}

/// Fused grid of the previous frame and the current pose relative to it.
#[derive(Clone, Debug)]
pub struct History {
    pub grid: BevGrid<f32>,
    pub delta: EgoPose,
}

impl Model {
    /// Build the layers and their initial values from `cfg.train.seed`.
    pub fn new(cfg: &Config) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let mut ps = ParamStore::new();
        let c = cfg.scene.channels;
        let fusion = TemporalFusion::new(&mut ps, "fusion", c, cfg.scene.grid, &cfg.fusion, &cfg.norm, &mut rng)?;
        let head = DetrHead::new(&mut ps, "head", c, &cfg.head, &cfg.norm, &mut rng)?;
        Ok((
            Self {
                fusion,
                head,
                range: cfg.scene.range,
            },
            ps,
        ))
    }

    /// Fuse every frame but the last recurrently in evaluation mode, each
    /// taking the previous fused grid as history. `None` when the fusion
    /// mode ignores history or the sequence has a single frame.
    pub fn history(&self, ps: &ParamStore<f32>, seq: &Sequence) -> Result<Option<History>> {
        let n = seq.frames.len();
        if !self.fusion.cfg.mode.uses_history() || n < 2 {
            return Ok(None);
        }
        let mut prev: Option<BevGrid<f32>> = None;
        for t in 0..n - 1 {
            let f = &seq.frames[t];
            let delta = if t > 0 { f.pose.relative_to(&seq.frames[t - 1].pose) } else { EgoPose::default() };
            let mut tape = Tape::inference(ps);
            let cur = tape.constant(f.bev.data.clone());
            let fused = self.fusion.forward(&mut tape, cur, prev.as_ref(), &delta, Mode::Eval, 0)?;
            prev = Some(BevGrid {
                data: tape.value(fused).clone(),
                resolution: f.bev.resolution,
                range: f.bev.range,
            });
        }
        Ok(prev.map(|grid| History {
            grid,
            delta: seq.current().pose.relative_to(&seq.frames[n - 2].pose),
        }))
    }

    /// Fuse the current frame with `hist` and decode it.
    pub fn forward(
        &self,
        tape: &mut Tape<'_, f32>,
        seq: &Sequence,
        hist: Option<&History>,
        mode: Mode,
        seed: u64,
    ) -> Result<(Var, HeadOutput)> {
        let cur = tape.constant(seq.current().bev.data.clone());
        let (grid, delta) = match hist {
            Some(h) => (Some(&h.grid), h.delta),
            None => (None, EgoPose::default()),
        };
        let fused = self.fusion.forward(tape, cur, grid, &delta, mode, seed)?;
        let out = self.head.forward(tape, fused)?;
        Ok((fused, out))
    }

    /// Detections and fused grid for the current frame of `seq`.
    pub fn predict(&self, ps: &ParamStore<f32>, seq: &Sequence, frame: usize) -> Result<(DetectionSet, BevGrid<f32>)> {
        let hist = self.history(ps, seq)?;
        let mut tape = Tape::inference(ps);
        let (fused, out) = self.forward(&mut tape, seq, hist.as_ref(), Mode::Eval, 0)?;
        let dets = self.head.detections(&tape, &out, self.range, frame)?;
        let cur = &seq.current().bev;
        let grid = BevGrid {
            data: tape.value(fused).clone(),
            resolution: cur.resolution,
            range: cur.range,
        };
        Ok((dets, grid))
    }
}

/// Store the configuration and every named parameter and buffer in one
/// tensor container. The configuration travels as a byte record.
pub fn save_checkpoint(path: &std::path::Path, cfg: &Config, ps: &ParamStore<f32>) -> Result<()> {
    let mut out = Vec::new();
    let text = cfg.to_toml().into_bytes();
    let bytes = crate::numerics::ShapedArray::<f32>::new(vec![text.len()], text.iter().map(|&b| b as f32).collect())?;
    encode_record(Some("config.toml"), &bytes, &mut out);
    for e in ps.entries() {
        encode_record(Some(&e.name), &e.value, &mut out);
    }
    write_file(path, &out)
}

/// Rebuild the model from a checkpoint's configuration and load its values.
pub fn load_checkpoint(path: &std::path::Path) -> Result<(Config, Model, ParamStore<f32>)> {
    let mut recs = read_file(path)?.into_iter();
    let cfg = match recs.next() {
        Some((Some(name), a)) if name == "config.toml" => {
            let bytes: Vec<u8> = a.to::<f32>().data().iter().map(|&v| v as u8).collect();
            let text = String::from_utf8(bytes).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
            Config::from_toml(&text)?
        }
        _ => return Err(Error::Format("checkpoint: missing config.toml record".into())),
    };
    let (model, mut ps) = Model::new(&cfg)?;
    let mut seen = 0;
    for (name, a) in recs {
        let name = name.ok_or_else(|| Error::Format("checkpoint: unnamed record".into()))?;
        let id = ps.find(&name).ok_or_else(|| Error::Format(format!("checkpoint: unknown parameter {name}")))?;
        let v = a.to::<f32>();
        if v.shape() != ps.get(id).shape() {
            return Err(Error::Format(format!("checkpoint: {name} has shape {:?}, expected {:?}", v.shape(), ps.get(id).shape())));
        }
        *ps.get_mut(id) = v;
        seen += 1;
    }
    if seen != ps.len() {
        return Err(Error::Format(format!("checkpoint: {seen} of {} parameters present", ps.len())));
    }
    Ok((cfg, model, ps))
}
