//! Center-distance detection metrics in the nuScenes style.

use std::f64::consts::PI;
use std::io::Write;

use serde::Serialize;

use crate::bevseq::wrap_angle;
use crate::error::{Error, Result};
use crate::head::{Detection, DetectionSet};

/// Center-distance thresholds in meters for AP.
pub const DISTANCES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold whose matches feed the true-positive errors.
pub const TP_DISTANCE: f64 = 2.0;
const MIN_RECALL: f64 = 0.1;
const MIN_PRECISION: f64 = 0.1;

/// Greedy matching of one class: predictions in descending score order take
/// the nearest unmatched ground truth of the same frame within `d`.
/// Returns per-prediction `(score, matched gt)` in processing order and the
/// number of ground-truth boxes. Ground truth is addressed as
/// `(frame slot, box index)`.
fn greedy_match(preds: &[DetectionSet], gts: &[DetectionSet], class: usize, d: f64) -> (Vec<(usize, usize, Option<usize>)>, usize) {
    let npos = gts.iter().map(|g| g.boxes.iter().filter(|b| b.class == class).count()).sum();
    let mut order: Vec<(usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(f, s)| s.boxes.iter().enumerate().filter(|(_, b)| b.class == class).map(move |(i, _)| (f, i)))
        .collect();
    order.sort_by(|a, b| preds[b.0].boxes[b.1].score.total_cmp(&preds[a.0].boxes[a.1].score));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut out = Vec::with_capacity(order.len());
    for (f, i) in order {
        let p = &preds[f].boxes[i];
        let best = gts[f]
            .boxes
            .iter()
            .enumerate()
            .filter(|(j, g)| g.class == class && !taken[f][*j])
            .map(|(j, g)| (j, p.center_distance(g)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let hit = match best {
            Some((j, dist)) if dist <= d => {
                taken[f][j] = true;
                Some(j)
            }
            _ => None,
        };
        out.push((f, i, hit));
    }
    (out, npos)
}

fn check_pairing(preds: &[DetectionSet], gts: &[DetectionSet]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::arg("metrics", format!("{} prediction frames vs {} gt frames", preds.len(), gts.len())));
    }
    if let Some((p, g)) = preds.iter().zip(gts).find(|(p, g)| p.frame != g.frame) {
        return Err(Error::arg("metrics", format!("frame {} paired with gt frame {}", p.frame, g.frame)));
    }
    Ok(())
}

/// Piecewise-linear interpolation with constant extension on the left and
/// `right` beyond the last sample. `xp` must be non-decreasing.
pub fn interp(x: f64, xp: &[f64], fp: &[f64], right: f64) -> f64 {
    let n = xp.len();
    if x < xp[0] {
        return fp[0];
    }
    if x == xp[n - 1] {
        return fp[n - 1];
    }
    if x > xp[n - 1] {
        return right;
    }
    let j = xp.partition_point(|&v| v <= x) - 1;
    let slope = (fp[j + 1] - fp[j]) / (xp[j + 1] - xp[j]);
    slope * (x - xp[j]) + fp[j]
}

/// Average precision of `class` at center distance `d`: precision sampled at
/// 101 recall points, the part above recall 0.1 and precision 0.1 averaged
/// and rescaled to `[0, 1]`. Frames pair up by position.
pub fn ap_by_distance(preds: &[DetectionSet], gts: &[DetectionSet], class: usize, d: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::arg("ap_by_distance", format!("distance threshold must be positive, got {d}")));
    }
    check_pairing(preds, gts)?;
    let (matches, npos) = greedy_match(preds, gts, class, d);
    if npos == 0 || matches.is_empty() {
        return Ok(0.0);
    }
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut rec, mut prec) = (Vec::with_capacity(matches.len()), Vec::with_capacity(matches.len()));
    for (_, _, hit) in &matches {
        if hit.is_some() {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        prec.push(tp / (tp + fp));
        rec.push(tp / npos as f64);
    }
    let first = (100.0 * MIN_RECALL).round() as usize + 1;
    // sum of max(p, floor) minus the floor keeps a perfect curve at exactly 1
    let n = (100 - first + 1) as f64;
    let s: f64 = (first..=100)
        .map(|k| interp(k as f64 / 100.0, &rec, &prec, 0.0).max(MIN_PRECISION))
        .sum();
    Ok(((s - n * MIN_PRECISION) / (n * (1.0 - MIN_PRECISION))).clamp(0.0, 1.0))
}

/// Mean true-positive errors of one class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TpErrors {
    /// Center distance in meters.
    pub ate: f64,
    /// `1 − IoU` after aligning centers and orientation.
    pub ase: f64,
    /// Absolute yaw difference wrapped to `[0, π]`.
    pub aoe: f64,
    /// Velocity difference norm in m/s.
    pub ave: f64,
    pub matches: usize,
    /// No matches: every error is reported as 1.
    pub flagged: bool,
}

pub fn scale_error(a: &Detection, b: &Detection) -> f64 {
    let inter = a.l.min(b.l) * a.w.min(b.w);
    let union = a.l * a.w + b.l * b.w - inter;
    1.0 - inter / union
}

pub fn yaw_error(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b).abs();
    d.min(PI)
}

/// Errors over the matched pairs of `class` at [`TP_DISTANCE`].
pub fn tp_errors(preds: &[DetectionSet], gts: &[DetectionSet], class: usize) -> Result<TpErrors> {
    check_pairing(preds, gts)?;
    let (matches, _) = greedy_match(preds, gts, class, TP_DISTANCE);
    let mut sums = [0.0; 4];
    let mut n = 0usize;
    for (f, i, hit) in matches {
        if let Some(j) = hit {
            let (p, g) = (&preds[f].boxes[i], &gts[f].boxes[j]);
            sums[0] += p.center_distance(g);
            sums[1] += scale_error(p, g);
            sums[2] += yaw_error(p.yaw, g.yaw);
            sums[3] += (p.vx - g.vx).hypot(p.vy - g.vy);
            n += 1;
        }
    }
    if n == 0 {
        return Ok(TpErrors {
            ate: 1.0,
            ase: 1.0,
            aoe: 1.0,
            ave: 1.0,
            matches: 0,
            flagged: true,
        });
    }
    let m = n as f64;
    Ok(TpErrors {
        ate: sums[0] / m,
        ase: sums[1] / m,
        aoe: sums[2] / m,
        ave: sums[3] / m,
        matches: n,
        flagged: false,
    })
}

fn check_errors(errors: &[f64]) -> Result<()> {
    if let Some(e) = errors.iter().find(|e| !(**e >= 0.0)) {
        return Err(Error::arg("nds", format!("error terms must be non-negative, got {e}")));
    }
    Ok(())
}

/// Detection score over mAP and the four errors `[ATE, ASE, AOE, AVE]`,
/// divisor 9.
pub fn nds(map: f64, errors: [f64; 4]) -> Result<f64> {
    check_errors(&errors)?;
    Ok((5.0 * map + errors.iter().map(|e| 1.0 - e.min(1.0)).sum::<f64>()) / 9.0)
}

/// The ten-divisor score with the attribute error fixed at its worst value.
pub fn nds10(map: f64, errors: [f64; 4]) -> Result<f64> {
    check_errors(&errors)?;
    Ok((5.0 * map + errors.iter().map(|e| 1.0 - e.min(1.0)).sum::<f64>()) / 10.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub name: String,
    /// AP at each of [`DISTANCES`].
    pub ap: [f64; 4],
    pub tp: TpErrors,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub nds: f64,
    pub nds10: f64,
    /// Fraction of occluded ground truth matched at [`TP_DISTANCE`] by a
    /// prediction scoring at least the recall threshold; `None` without
    /// occluded objects.
    pub occluded_recall: Option<f64>,
    /// The same recall over visible objects.
    pub visible_recall: Option<f64>,
    pub frames: usize,
    pub gt_boxes: usize,
}

/// Full report over paired frames. `occluded[i][j]` flags gt box `j` of
/// frame `i`.
pub fn evaluate(
    preds: &[DetectionSet],
    gts: &[DetectionSet],
    occluded: &[Vec<bool>],
    class_names: &[String],
    recall_threshold: f64,
) -> Result<MetricsReport> {
    check_pairing(preds, gts)?;
    if occluded.len() != gts.len() || occluded.iter().zip(gts).any(|(o, g)| o.len() != g.len()) {
        return Err(Error::arg("evaluate", "occlusion flags do not match ground truth"));
    }
    let mut classes = Vec::with_capacity(class_names.len());
    for (c, name) in class_names.iter().enumerate() {
        let mut ap = [0.0; 4];
        for (a, &d) in ap.iter_mut().zip(&DISTANCES) {
            *a = ap_by_distance(preds, gts, c, d)?;
        }
        classes.push(ClassMetrics {
            name: name.clone(),
            ap,
            tp: tp_errors(preds, gts, c)?,
        });
    }
    let k = classes.len().max(1) as f64;
    let map = classes.iter().map(|c| c.ap.iter().sum::<f64>() / 4.0).sum::<f64>() / k;
    let mean = |f: fn(&TpErrors) -> f64| classes.iter().map(|c| f(&c.tp)).sum::<f64>() / k;
    let (mate, mase, maoe, mave) = (mean(|t| t.ate), mean(|t| t.ase), mean(|t| t.aoe), mean(|t| t.ave));
    let errors = [mate, mase, maoe, mave];

    let kept: Vec<DetectionSet> = preds
        .iter()
        .map(|p| DetectionSet::new(p.frame, p.boxes.iter().filter(|b| b.score >= recall_threshold).copied().collect()))
        .collect();
    let (mut hit, mut total) = ([0usize; 2], [0usize; 2]);
    for c in 0..class_names.len() {
        let (matches, _) = greedy_match(&kept, gts, c, TP_DISTANCE);
        let mut found: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        for (f, _, m) in matches {
            if let Some(j) = m {
                found[f][j] = true;
            }
        }
        for (f, g) in gts.iter().enumerate() {
            for (j, b) in g.boxes.iter().enumerate() {
                if b.class == c {
                    let o = occluded[f][j] as usize;
                    total[o] += 1;
                    hit[o] += found[f][j] as usize;
                }
            }
        }
    }
    let ratio = |h: usize, t: usize| (t > 0).then(|| h as f64 / t as f64);
    Ok(MetricsReport {
        map,
        mate,
        mase,
        maoe,
        mave,
        nds: nds(map, errors)?,
        nds10: nds10(map, errors)?,
        occluded_recall: ratio(hit[1], total[1]),
        visible_recall: ratio(hit[0], total[0]),
        frames: gts.len(),
        gt_boxes: gts.iter().map(DetectionSet::len).sum(),
        classes,
    })
}

impl MetricsReport {
    /// Long-format CSV `metric,class,value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut row = |m: &str, c: &str, v: String| w.write_record([m, c, &v]).map_err(|e| Error::Format(e.to_string()));
        row("metric", "class", "value".into())?;
        for c in &self.classes {
            for (d, ap) in DISTANCES.iter().zip(&c.ap) {
                row(&format!("ap@{d:.1}"), &c.name, format!("{ap}"))?;
            }
            row("ate", &c.name, format!("{}", c.tp.ate))?;
            row("ase", &c.name, format!("{}", c.tp.ase))?;
            row("aoe", &c.name, format!("{}", c.tp.aoe))?;
            row("ave", &c.name, format!("{}", c.tp.ave))?;
            row("tp_matches", &c.name, format!("{}", c.tp.matches))?;
            row("tp_flagged", &c.name, format!("{}", c.tp.flagged))?;
        }
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v}"));
        for (m, v) in [
            ("mAP", format!("{}", self.map)),
            ("mATE", format!("{}", self.mate)),
            ("mASE", format!("{}", self.mase)),
            ("mAOE", format!("{}", self.maoe)),
            ("mAVE", format!("{}", self.mave)),
            ("NDS", format!("{}", self.nds)),
            ("NDS10_mAAE1", format!("{}", self.nds10)),
            ("occluded_recall", opt(self.occluded_recall)),
            ("visible_recall", opt(self.visible_recall)),
            ("frames", format!("{}", self.frames)),
            ("gt_boxes", format!("{}", self.gt_boxes)),
        ] {
            row(m, "all", v)?;
        }
        drop(row);
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(cx: f64, cy: f64, class: usize, score: f64) -> Detection {
        Detection {
            cx,
            cy,
            l: 4.0,
            w: 2.0,
            yaw: 0.3,
            vx: 1.0,
            vy: -2.0,
            class,
            score,
        }
    }

    /// numpy.interp on the sampled grid, evaluated by hand.
    #[test]
    fn interp_matches_reference_semantics() {
        let xp = [0.5, 0.5];
        let fp = [1.0, 0.5];
        assert_eq!(interp(0.2, &xp, &fp, 0.0), 1.0);
        assert_eq!(interp(0.5, &xp, &fp, 0.0), 0.5);
        assert_eq!(interp(0.6, &xp, &fp, 0.0), 0.0);
        let xp = [0.0, 1.0, 2.0];
        let fp = [0.0, 10.0, 30.0];
        assert_eq!(interp(1.5, &xp, &fp, -1.0), 20.0);
        assert_eq!(interp(1.0, &xp, &fp, -1.0), 10.0);
    }

    #[test]
    fn hand_fixture_ap() {
        let gt = vec![DetectionSet::new(0, vec![boxed(0.0, 0.0, 0, 1.0), boxed(20.0, 0.0, 0, 1.0)])];
        let pred = vec![DetectionSet::new(0, vec![boxed(0.1, 0.0, 0, 0.9), boxed(-30.0, 0.0, 0, 0.8)])];
        // recall 1/2 at precision 1 then 1/2: bins 0.11..0.49 hold 1, bin 0.50 holds 1/2
        let expect = (39.0 * 0.9 + 0.4) / 90.0 / 0.9;
        assert!((ap_by_distance(&pred, &gt, 0, 2.0).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 35.5 / 81.0).abs() < 1e-15);
    }

    #[test]
    fn trivial_ap_cases() {
        let gt = vec![DetectionSet::new(0, vec![boxed(1.0, 1.0, 0, 1.0)])];
        assert_eq!(ap_by_distance(&gt, &gt, 0, 0.5).unwrap(), 1.0);
        assert_eq!(ap_by_distance(&[DetectionSet::new(0, vec![])], &gt, 0, 0.5).unwrap(), 0.0);
        assert!(ap_by_distance(&gt, &gt, 0, 0.0).is_err());
        assert!(ap_by_distance(&gt, &[], 0, 1.0).is_err());
    }

    #[test]
    fn threshold_is_inclusive() {
        let gt = vec![DetectionSet::new(0, vec![boxed(0.0, 0.0, 0, 1.0)])];
        let pred = vec![DetectionSet::new(0, vec![boxed(1.0, 0.0, 0, 0.5)])];
        assert_eq!(ap_by_distance(&pred, &gt, 0, 1.0).unwrap(), 1.0);
        assert_eq!(ap_by_distance(&pred, &gt, 0, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn classes_and_frames_do_not_cross_match() {
        let gt = vec![DetectionSet::new(0, vec![boxed(0.0, 0.0, 0, 1.0)]), DetectionSet::new(1, vec![])];
        let other_class = vec![DetectionSet::new(0, vec![boxed(0.0, 0.0, 1, 1.0)]), DetectionSet::new(1, vec![])];
        assert_eq!(ap_by_distance(&other_class, &gt, 0, 4.0).unwrap(), 0.0);
        let other_frame = vec![DetectionSet::new(0, vec![]), DetectionSet::new(1, vec![boxed(0.0, 0.0, 0, 1.0)])];
        assert_eq!(ap_by_distance(&other_frame, &gt, 0, 4.0).unwrap(), 0.0);
    }

    #[test]
    fn nds_examples() {
        assert_eq!(nds(1.0, [0.0; 4]).unwrap(), 1.0);
        assert_eq!(nds(0.0, [1.0, 2.0, 1.0, 5.0]).unwrap(), 0.0);
        assert!((nds(0.4, [0.5; 4]).unwrap() - 4.0 / 9.0).abs() < 1e-15);
        assert!((nds10(0.4, [0.5; 4]).unwrap() - 0.4).abs() < 1e-15);
        assert!(nds(0.5, [0.1, -0.1, 0.0, 0.0]).is_err());
    }

    #[test]
    fn tp_error_examples() {
        let g = boxed(5.0, 5.0, 0, 1.0);
        let gt = vec![DetectionSet::new(0, vec![g])];
        let exact = tp_errors(&gt, &gt, 0).unwrap();
        assert_eq!((exact.ate, exact.ase, exact.aoe, exact.ave), (0.0, 0.0, 0.0, 0.0));
        let mut p = g;
        p.yaw += PI / 2.0;
        p.vx += 0.3;
        p.vy += 0.4;
        let e = tp_errors(&[DetectionSet::new(0, vec![p])], &gt, 0).unwrap();
        assert!((e.aoe - PI / 2.0).abs() < 1e-12);
        assert!((e.ave - 0.5).abs() < 1e-12);
        let none = tp_errors(&[DetectionSet::new(0, vec![])], &gt, 0).unwrap();
        assert!(none.flagged && none.ate == 1.0 && none.ave == 1.0);
        assert_eq!(yaw_error(3.0, -3.0), 2.0 * PI - 6.0);
        let mut half = g;
        half.l = 2.0;
        assert!((scale_error(&g, &half) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gt_as_predictions_is_perfect() {
        let gt = vec![
            DetectionSet::new(0, vec![boxed(0.0, 0.0, 0, 1.0), boxed(10.0, 3.0, 1, 1.0)]),
            DetectionSet::new(1, vec![boxed(-7.0, 2.0, 1, 1.0)]),
        ];
        let occ = vec![vec![false, true], vec![false]];
        let r = evaluate(&gt, &gt, &occ, &["a".into(), "b".into()], 0.5).unwrap();
        assert_eq!((r.map, r.nds), (1.0, 1.0));
        assert_eq!((r.mate, r.mase, r.maoe, r.mave), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.nds10, 0.9);
        assert_eq!((r.occluded_recall, r.visible_recall), (Some(1.0), Some(1.0)));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("metric,class,value\nap@0.5,a,1\n"));
        assert!(text.contains("NDS,all,1\n"));
    }
}
