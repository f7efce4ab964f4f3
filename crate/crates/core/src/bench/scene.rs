//! Seeded synthetic BEV sequences standing in for a camera front-end.
//!
//! Objects move with constant velocity plus positional jitter in a world
//! frame while the ego vehicle drives a constant-curvature arc. Each frame
//! stamps every visible object as an oriented Gaussian blob carrying a class
//! signature, then adds white noise.

use std::borrow::Cow;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bevseq::{check_extent, wrap_angle, BevGrid, EgoPose};
use crate::error::{Error, Result};
use crate::head::{Detection, DetectionSet};
use crate::numerics::container::{decode_records, AnyArray, encode_record, read_file, write_file};
use crate::numerics::ShapedArray;

/// One object class of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub length: f64,
    pub width: f64,
    /// Objects per sequence, drawn uniformly from `[count_min, count_max]`.
    pub count_min: usize,
    pub count_max: usize,
    /// Speed in m/s, drawn uniformly; heading follows the motion.
    pub speed_min: f64,
    pub speed_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Half extent of the square BEV window in meters.
    pub range: f64,
    /// Cells per side.
    pub grid: usize,
    /// Meters per cell.
    pub resolution: f64,
    pub channels: usize,
    /// Historical frames before the current one.
    pub history: usize,
    /// Seconds between frames.
    pub frame_dt: f64,
    pub classes: Vec<ClassSpec>,
    /// Current-frame object centers are drawn from `[-spawn_extent, spawn_extent]²`.
    pub spawn_extent: f64,
    /// Probability that an object stamps nothing in a given frame.
    pub occlusion: f64,
    pub ego_speed_min: f64,
    pub ego_speed_max: f64,
    /// Maximum absolute ego yaw rate in rad/s.
    pub ego_yaw_rate: f64,
    /// Standard deviation of the per-cell white noise.
    pub noise: f64,
    /// Standard deviation of the per-frame positional jitter in meters.
    pub position_noise: f64,
    /// Lower bound on blob standard deviations in meters.
    pub min_sigma: f64,
    pub amplitude: f64,
    /// Also write `(cos, sin)` of the heading on the last two channels.
    pub heading_channels: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            range: 51.2,
            grid: 50,
            resolution: 2.048,
            channels: 16,
            history: 3,
            frame_dt: 0.5,
            classes: vec![
                ClassSpec {
                    name: "small".into(),
                    length: 0.5,
                    width: 0.5,
                    count_min: 2,
                    count_max: 6,
                    speed_min: 0.0,
                    speed_max: 2.0,
                },
                ClassSpec {
                    name: "large".into(),
                    length: 9.0,
                    width: 3.0,
                    count_min: 1,
                    count_max: 3,
                    speed_min: 0.0,
                    speed_max: 8.0,
                },
            ],
            spawn_extent: 44.0,
            occlusion: 0.3,
            ego_speed_min: 0.0,
            ego_speed_max: 6.0,
            ego_yaw_rate: 0.2,
            noise: 0.1,
            position_noise: 0.05,
            min_sigma: 1.0,
            amplitude: 1.0,
            heading_channels: false,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn frames(&self) -> usize {
        self.history + 1
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scene: {m}")));
        check_extent(self.grid, self.resolution, self.range)?;
        if !(0.0..1.0).contains(&self.occlusion) {
            return bad(format!("occlusion must be in [0, 1), got {}", self.occlusion));
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        let extra = if self.heading_channels { 2 } else { 0 };
        if self.channels < self.classes.len() + extra {
            return bad(format!("{} channels cannot hold {} class signatures and {extra} heading channels", self.channels, self.classes.len()));
        }
        if !(self.frame_dt > 0.0) {
            return bad(format!("frame_dt must be positive, got {}", self.frame_dt));
        }
        if !(self.spawn_extent >= 0.0 && self.spawn_extent <= self.range) {
            return bad(format!("spawn_extent {} places objects outside range {}", self.spawn_extent, self.range));
        }
        for c in &self.classes {
            if !(c.length > 0.0 && c.width > 0.0) || c.count_min > c.count_max || !(0.0 <= c.speed_min && c.speed_min <= c.speed_max) {
                return bad(format!("class {}: invalid size, count or speed range", c.name));
            }
        }
        let nonneg = [self.ego_speed_min, self.ego_yaw_rate, self.noise, self.position_noise, self.min_sigma];
        if nonneg.iter().any(|v| !(*v >= 0.0)) || self.ego_speed_min > self.ego_speed_max || !(self.min_sigma > 0.0) {
            return bad("ego motion, noise and sigma settings must be non-negative ranges".into());
        }
        Ok(())
    }
}

/// One time step of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// World pose of the ego vehicle.
    pub pose: EgoPose,
    pub bev: BevGrid<f32>,
    /// Ground truth in this frame's ego coordinates, score 1.
    pub gt: DetectionSet,
    /// Per gt box: whether it stamped nothing in this frame.
    pub occluded: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn current(&self) -> &Frame {
        self.frames.last().expect("sequences have at least one frame")
    }
}

/// Which random stream a sequence index draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn stream(self, index: usize) -> u64 {
        match self {
            Split::Train => index as u64,
            Split::Eval => (1 << 40) + index as u64,
        }
    }
}

struct Object {
    class: usize,
    /// World position at the current (last) frame.
    pos: (f64, f64),
    vel: (f64, f64),
    yaw: f64,
}

/// Generate sequence `index` of `split`. Every sequence depends only on
/// `(cfg, split, index)`.
pub fn gen_scene(cfg: &SceneConfig, split: Split, index: usize) -> Result<Sequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split.stream(index));
    let nf = cfg.frames();
    let dt = cfg.frame_dt;

    let speed = uniform(&mut rng, cfg.ego_speed_min, cfg.ego_speed_max);
    let rate = uniform(&mut rng, -cfg.ego_yaw_rate, cfg.ego_yaw_rate);
    let mut pose = EgoPose::new(0.0, 0.0, uniform(&mut rng, -std::f64::consts::PI, std::f64::consts::PI));
    let mut poses = Vec::with_capacity(nf);
    for _ in 0..nf {
        poses.push(pose);
        let yaw = pose.yaw + rate * dt;
        pose = EgoPose::new(pose.x + speed * dt * yaw.cos(), pose.y + speed * dt * yaw.sin(), yaw);
    }
    let last = poses[nf - 1];

    let mut objects = Vec::new();
    for (class, spec) in cfg.classes.iter().enumerate() {
        let n = rng.random_range(spec.count_min..=spec.count_max);
        for _ in 0..n {
            let e = cfg.spawn_extent;
            let local = (uniform(&mut rng, -e, e), uniform(&mut rng, -e, e));
            let heading = uniform(&mut rng, -std::f64::consts::PI, std::f64::consts::PI);
            let v = uniform(&mut rng, spec.speed_min, spec.speed_max);
            let yaw = wrap_angle(heading + last.yaw);
            objects.push(Object {
                class,
                pos: last.apply(local.0, local.1),
                vel: (v * yaw.cos(), v * yaw.sin()),
                yaw,
            });
        }
    }

    let mut frames = Vec::with_capacity(nf);
    for (t, pose) in poses.iter().enumerate() {
        let back = (nf - 1 - t) as f64 * dt;
        let mut bev = BevGrid::<f32>::zeros(cfg.grid, cfg.channels, cfg.resolution, cfg.range)?;
        let mut boxes = Vec::new();
        let mut occluded = Vec::new();
        let (s, c) = pose.yaw.sin_cos();
        for o in &objects {
            let jx: f64 = StandardNormal.sample(&mut rng);
            let jy: f64 = StandardNormal.sample(&mut rng);
            let hidden = rng.random::<f64>() < cfg.occlusion;
            let wx = o.pos.0 - o.vel.0 * back + cfg.position_noise * jx;
            let wy = o.pos.1 - o.vel.1 * back + cfg.position_noise * jy;
            let (x, y) = pose.apply_inverse(wx, wy);
            if x.abs() > cfg.range || y.abs() > cfg.range {
                continue;
            }
            let spec = &cfg.classes[o.class];
            let det = Detection {
                cx: x,
                cy: y,
                l: spec.length,
                w: spec.width,
                yaw: wrap_angle(o.yaw - pose.yaw),
                vx: c * o.vel.0 + s * o.vel.1,
                vy: -s * o.vel.0 + c * o.vel.1,
                class: o.class,
                score: 1.0,
            };
            if !hidden {
                stamp(&mut bev, cfg, &det);
            }
            boxes.push(det);
            occluded.push(hidden);
        }
        for v in bev.data.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += (cfg.noise * z) as f32;
        }
        frames.push(Frame {
            pose: *pose,
            bev,
            gt: DetectionSet::new(t, boxes),
            occluded,
        });
    }
    Ok(Sequence { frames })
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Add the oriented blob of `det` to `bev` on every channel `q` with
/// `q % classes == class`, plus `(cos, sin)` of its yaw on the last two
/// channels when heading channels are enabled.
fn stamp(bev: &mut BevGrid<f32>, cfg: &SceneConfig, det: &Detection) {
    let k = cfg.num_classes();
    let ch = cfg.channels;
    let sl = (det.l / 2.0).max(cfg.min_sigma);
    let sw = (det.w / 2.0).max(cfg.min_sigma);
    let reach = 3.0 * sl.max(sw);
    let (s, c) = det.yaw.sin_cos();
    let (r0, c0) = bev.to_cell(det.cx - reach, det.cy - reach);
    let (r1, c1) = bev.to_cell(det.cx + reach, det.cy + reach);
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64) as usize;
    let (h, w) = (bev.h(), bev.w());
    let rows = clamp(r0.floor(), h)..=clamp(r1.ceil(), h);
    for i in rows {
        for j in clamp(c0.floor(), w)..=clamp(c1.ceil(), w) {
            let (x, y) = bev.cell_center(i, j);
            let (dx, dy) = (x - det.cx, y - det.cy);
            let a = c * dx + s * dy;
            let b = -s * dx + c * dy;
            let g = cfg.amplitude * (-0.5 * (a * a / (sl * sl) + b * b / (sw * sw))).exp();
            let base = (i * w + j) * ch;
            let cell = &mut bev.data.data_mut()[base..base + ch];
            let sig = if cfg.heading_channels { ch - 2 } else { ch };
            for (q, v) in cell[..sig].iter_mut().enumerate() {
                if q % k == det.class {
                    *v += g as f32;
                }
            }
            if cfg.heading_channels {
                cell[ch - 2] += (g * c) as f32;
                cell[ch - 1] += (g * s) as f32;
            }
        }
    }
}

/// Generate sequences `0..count` of `split` on up to `threads` threads.
/// The result does not depend on the thread count.
pub fn gen_sequences(cfg: &SceneConfig, split: Split, count: usize, threads: usize) -> Result<Vec<Sequence>> {
    let threads = threads.clamp(1, count.max(1));
    if threads == 1 {
        return (0..count).map(|i| gen_scene(cfg, split, i)).collect();
    }
    let per = count.div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| scope.spawn(move || (t * per..((t + 1) * per).min(count)).map(|i| gen_scene(cfg, split, i)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(count);
        for h in handles {
            out.extend(h.join().expect("generator thread panicked")?);
        }
        Ok(out)
    })
}

/// Sequences either generated on demand or loaded from disk.
#[derive(Clone, Debug)]
pub enum SceneSource {
    Synthetic { cfg: SceneConfig, split: Split, count: usize },
    Loaded(Vec<Sequence>),
}

impl SceneSource {
    pub fn len(&self) -> usize {
        match self {
            SceneSource::Synthetic { count, .. } => *count,
            SceneSource::Loaded(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> Result<Cow<'_, Sequence>> {
        match self {
            SceneSource::Synthetic { cfg, split, count } => {
                if index >= *count {
                    return Err(Error::arg("SceneSource", format!("index {index} >= {count}")));
                }
                Ok(Cow::Owned(gen_scene(cfg, *split, index)?))
            }
            SceneSource::Loaded(v) => v
                .get(index)
                .map(Cow::Borrowed)
                .ok_or_else(|| Error::arg("SceneSource", format!("index {index} >= {}", v.len()))),
        }
    }
}

const GT_COLS: usize = 10;

/// Serialize sequences into one tensor container: a `meta` record
/// `[sequences, frames]`, then per frame `bev`, `pose` and `gt` records.
/// Ground-truth rows are `cx, cy, l, w, yaw, vx, vy, class, score, occluded`.
pub fn encode_dataset(seqs: &[Sequence]) -> Result<Vec<u8>> {
    let nf = seqs.first().map_or(0, |s| s.frames.len());
    if seqs.iter().any(|s| s.frames.len() != nf) {
        return Err(Error::arg("encode_dataset", "sequences differ in length"));
    }
    let mut out = Vec::new();
    let meta = ShapedArray::<f64>::new(vec![2], vec![seqs.len() as f64, nf as f64])?;
    encode_record(Some("meta"), &meta, &mut out);
    for (i, s) in seqs.iter().enumerate() {
        for (t, f) in s.frames.iter().enumerate() {
            let p = format!("seq{i}.frame{t}");
            let res = ShapedArray::<f64>::new(vec![2], vec![f.bev.resolution, f.bev.range])?;
            encode_record(Some(&format!("{p}.grid")), &res, &mut out);
            encode_record(Some(&format!("{p}.bev")), &f.bev.data, &mut out);
            let pose = ShapedArray::<f64>::new(vec![3], vec![f.pose.x, f.pose.y, f.pose.yaw])?;
            encode_record(Some(&format!("{p}.pose")), &pose, &mut out);
            let mut rows = Vec::with_capacity(f.gt.len() * GT_COLS);
            for (b, &occ) in f.gt.boxes.iter().zip(&f.occluded) {
                rows.extend([b.cx, b.cy, b.l, b.w, b.yaw, b.vx, b.vy, b.class as f64, b.score, occ as u8 as f64]);
            }
            let gt = ShapedArray::<f64>::new(vec![f.gt.len(), GT_COLS], rows)?;
            encode_record(Some(&format!("{p}.gt")), &gt, &mut out);
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Sequence>> {
    dataset_from_records(decode_records(bytes)?)
}

fn dataset_from_records(recs: Vec<(Option<String>, AnyArray)>) -> Result<Vec<Sequence>> {
    let mut it = recs.into_iter();
    let mut next = |want: &str| -> Result<AnyArray> {
        match it.next() {
            Some((Some(name), a)) if name == want => Ok(a),
            Some((name, _)) => Err(Error::Format(format!("dataset: expected record {want}, found {name:?}"))),
            None => Err(Error::Format(format!("dataset: missing record {want}"))),
        }
    };
    let meta = next("meta")?.to::<f64>();
    if meta.shape() != [2] {
        return Err(Error::Format("dataset: malformed meta record".into()));
    }
    let (ns, nf) = (meta.data()[0] as usize, meta.data()[1] as usize);
    let mut seqs = Vec::with_capacity(ns);
    for i in 0..ns {
        let mut frames = Vec::with_capacity(nf);
        for t in 0..nf {
            let p = format!("seq{i}.frame{t}");
            let grid = next(&format!("{p}.grid"))?.to::<f64>();
            let bev = next(&format!("{p}.bev"))?.to::<f32>();
            let bev = BevGrid::new(bev, grid.data()[0], grid.data()[1]).map_err(|e| Error::Format(e.to_string()))?;
            let pose = next(&format!("{p}.pose"))?.to::<f64>();
            let gt = next(&format!("{p}.gt"))?.to::<f64>();
            if pose.shape() != [3] || gt.shape().len() != 2 || gt.shape()[1] != GT_COLS {
                return Err(Error::Format(format!("dataset: malformed pose or gt in {p}")));
            }
            let (mut boxes, mut occluded) = (Vec::new(), Vec::new());
            for r in 0..gt.rows() {
                let v = gt.row(r);
                boxes.push(Detection {
                    cx: v[0],
                    cy: v[1],
                    l: v[2],
                    w: v[3],
                    yaw: v[4],
                    vx: v[5],
                    vy: v[6],
                    class: v[7] as usize,
                    score: v[8],
                });
                occluded.push(v[9] != 0.0);
            }
            let pd = pose.data();
            frames.push(Frame {
                pose: EgoPose::new(pd[0], pd[1], pd[2]),
                bev,
                gt: DetectionSet::new(t, boxes),
                occluded,
            });
        }
        seqs.push(Sequence { frames });
    }
    if it.next().is_some() {
        return Err(Error::Format("dataset: trailing records".into()));
    }
    Ok(seqs)
}

pub fn save_dataset(path: &Path, seqs: &[Sequence]) -> Result<()> {
    write_file(path, &encode_dataset(seqs)?)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sequence>> {
    dataset_from_records(read_file(path)?)
}
