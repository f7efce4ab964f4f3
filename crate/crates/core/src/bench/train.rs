//! Training and evaluation loops over a [`SceneSource`].

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::metrics::{evaluate, MetricsReport};
use super::model::Model;
use super::optim::AdamW;
use super::scene::{SceneSource, Sequence, Split};
use crate::error::{Error, Result};
use crate::head::{detection_loss, match_predictions, DetectionSet};
use crate::numerics::{Mode, ParamStore, Tape};

/// Loss terms of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub cls: f64,
    pub center: f64,
    pub size: f64,
    pub yaw: f64,
    pub velocity: f64,
}

/// A model with its trained values and loss history.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub params: ParamStore<f32>,
    pub losses: Vec<LossRecord>,
}

fn dropout_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (step as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// One optimizer step on the current frame of `seq`.
pub fn train_step(
    cfg: &Config,
    model: &Model,
    ps: &mut ParamStore<f32>,
    opt: &mut AdamW,
    seq: &Sequence,
    epoch: usize,
    step: usize,
) -> Result<LossRecord> {
    let hist = model.history(ps, seq)?;
    let gt = &seq.current().gt.boxes;
    let range = cfg.scene.range;
    let (rec, grads, buffers) = {
        let mut tape = Tape::new(ps);
        let (_, out) = model.forward(&mut tape, seq, hist.as_ref(), Mode::Train, dropout_seed(cfg.train.seed, step))?;
        let (probs, centers) = model.head.probs_and_centers(&tape, &out)?;
        let assignment = match_predictions(&probs, &centers, gt, range, cfg.head.matching)?;
        let terms = detection_loss(&mut tape, &out, gt, &assignment, range, &cfg.head.loss)?;
        let loss = tape.value(terms.total).data()[0] as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, step, loss });
        }
        let rec = LossRecord {
            epoch,
            step,
            loss,
            cls: terms.cls,
            center: terms.center,
            size: terms.size,
            yaw: terms.yaw,
            velocity: terms.velocity,
        };
        (rec, tape.backward(terms.total)?, tape.take_buffer_updates())
    };
    opt.step(ps, &grads).map_err(|e| match e {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            step,
            loss: f64::NAN,
        },
        e => e,
    })?;
    for (id, v) in buffers {
        *ps.get_mut(id) = v;
    }
    Ok(rec)
}

/// Train from a fresh initialization for `cfg.train.epochs` passes over
/// `source`, visiting sequences in a seeded order each epoch. `on_step`
/// sees every record as it is produced.
pub fn train(cfg: &Config, source: &SceneSource, mut on_step: impl FnMut(&LossRecord)) -> Result<Trained> {
    let (model, mut params) = Model::new(cfg)?;
    let mut opt = AdamW::new(&params, &cfg.train);
    let mut losses = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.train.epochs {
        let mut order: Vec<usize> = (0..source.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        for i in order {
            let seq = source.get(i)?;
            let rec = train_step(cfg, &model, &mut params, &mut opt, &seq, epoch, step)?;
            on_step(&rec);
            losses.push(rec);
            step += 1;
        }
    }
    Ok(Trained { model, params, losses })
}

/// Current-frame predictions, ground truth and occlusion flags of every
/// sequence, frame ids set to the sequence index. Work is split over
/// `threads` contiguous ranges; the output is independent of the split.
pub fn predict_all(
    cfg: &Config,
    ps: &ParamStore<f32>,
    source: &SceneSource,
    threads: usize,
) -> Result<(Vec<DetectionSet>, Vec<DetectionSet>, Vec<Vec<bool>>)> {
    let n = source.len();
    let run = |range: std::ops::Range<usize>| -> Result<Vec<(DetectionSet, DetectionSet, Vec<bool>)>> {
        let (model, _) = Model::new(cfg)?;
        range
            .map(|i| {
                let seq = source.get(i)?;
                let (dets, _) = model.predict(ps, &seq, i)?;
                let cur = seq.current();
                Ok((dets, DetectionSet::new(i, cur.gt.boxes.clone()), cur.occluded.clone()))
            })
            .collect()
    };
    let threads = threads.clamp(1, n.max(1));
    let parts: Vec<_> = if threads == 1 {
        vec![run(0..n)?]
    } else {
        let per = n.div_ceil(threads);
        std::thread::scope(|s| {
            let hs: Vec<_> = (0..threads).map(|t| s.spawn(move || run(t * per..((t + 1) * per).min(n)))).collect();
            hs.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect::<Result<Vec<_>>>()
        })?
    };
    let mut out = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (p, g, o) in parts.into_iter().flatten() {
        out.0.push(p);
        out.1.push(g);
        out.2.push(o);
    }
    Ok(out)
}

/// Metrics of `ps` on the current frames of `source`.
pub fn evaluate_model(cfg: &Config, ps: &ParamStore<f32>, source: &SceneSource) -> Result<MetricsReport> {
    let (preds, gts, occ) = predict_all(cfg, ps, source, cfg.train.threads)?;
    evaluate(&preds, &gts, &occ, &cfg.class_names(), cfg.train.recall_threshold)
}

/// CSV with header `epoch,step,loss,cls,center,size,yaw,velocity`.
pub fn write_loss_csv<W: Write>(records: &[LossRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["epoch", "step", "loss", "cls", "center", "size", "yaw", "velocity"]).map_err(err)?;
    for r in records {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Train on `cfg.train.train_sequences` synthetic training sequences and
/// evaluate on `cfg.train.eval_sequences` held-out ones.
pub fn fit_synthetic(cfg: &Config, on_step: impl FnMut(&LossRecord)) -> Result<(Trained, MetricsReport)> {
    let train_src = SceneSource::Synthetic {
        cfg: cfg.scene.clone(),
        split: Split::Train,
        count: cfg.train.train_sequences,
    };
    let eval_src = SceneSource::Synthetic {
        cfg: cfg.scene.clone(),
        split: Split::Eval,
        count: cfg.train.eval_sequences,
    };
    let trained = train(cfg, &train_src, on_step)?;
    let report = evaluate_model(cfg, &trained.params, &eval_src)?;
    Ok((trained, report))
}
