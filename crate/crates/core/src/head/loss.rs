use serde::{Deserialize, Serialize};

use super::detection::Detection;
use super::matching::Assignment;
use super::{HeadOutput, BOX_CODE};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, ShapedArray, Tape, Var};

/// Weights of the detection loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    /// Cross-entropy weight of the background class relative to 1 for objects.
    pub background: f64,
    /// L1 on centers, per meter.
    pub center: f64,
    /// L1 on log sizes.
    pub size: f64,
    /// L1 on `(sin, cos)` of yaw.
    pub yaw: f64,
    /// L1 on velocity in m/s.
    pub velocity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            background: 0.1,
            center: 0.25,
            size: 1.0,
            yaw: 2.0,
            velocity: 2.0,
        }
    }
}

/// Scalar loss on the tape plus the weighted value of each term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cls: f64,
    pub center: f64,
    pub size: f64,
    pub yaw: f64,
    pub velocity: f64,
}

/// Weighted cross-entropy over all queries (unmatched ones target the
/// background class) plus L1 regression on matched pairs, averaged over the
/// number of ground-truth boxes.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &HeadOutput,
    gt: &[Detection],
    assignment: &Assignment,
    range: f64,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let ls = tape.shape(out.logits).to_vec();
    let (q, k1) = (ls[0], ls[1]);
    if assignment.num_queries != q || tape.shape(out.boxes) != [q, BOX_CODE] {
        return Err(Error::dim("detection_loss", &ls, &[assignment.num_queries, BOX_CODE]));
    }
    if let Some(g) = gt.iter().find(|g| g.class + 1 >= k1) {
        return Err(Error::arg("detection_loss", format!("gt class {} >= {} object classes", g.class, k1 - 1)));
    }
    let background = k1 - 1;
    let targets = assignment.class_targets(gt, background);
    let mut cw = vec![T::one(); k1];
    cw[background] = T::of(weights.background);
    let ce = tape.cross_entropy(out.logits, &targets, &cw)?;
    let ce = tape.scale(ce, T::of(weights.cls));
    let cls = tape.value(ce).data()[0].as_f64();
    let mut terms = LossTerms {
        total: ce,
        cls,
        center: 0.0,
        size: 0.0,
        yaw: 0.0,
        velocity: 0.0,
    };
    if assignment.pairs.is_empty() {
        return Ok(terms);
    }
    let n = assignment.pairs.len();
    let rows: std::rc::Rc<[usize]> = assignment.pairs.iter().map(|&(p, _)| p).collect();
    let pred = tape.gather_rows(out.boxes, rows)?;
    let target = ShapedArray::from_fn(&[n, BOX_CODE], |i| {
        T::of(gt[assignment.pairs[i / BOX_CODE].1].encode(range)[i % BOX_CODE])
    });
    let target = tape.constant(target);
    let diff = tape.sub(pred, target)?;
    let l1 = tape.abs(diff);
    let norm = gt.len().max(1) as f64;
    let mut total = ce;
    let per_meter = weights.center * 2.0 * range;
    for (slot, start, w) in [(0, 0, per_meter), (1, 2, weights.size), (2, 4, weights.yaw), (3, 6, weights.velocity)] {
        let mask = ShapedArray::from_fn(&[n, BOX_CODE], |i| {
            let c = i % BOX_CODE;
            T::of(if c >= start && c < start + 2 { w / norm } else { 0.0 })
        });
        let t = tape.dot_const(l1, &mask)?;
        let v = tape.value(t).data()[0].as_f64();
        match slot {
            0 => terms.center = v,
            1 => terms.size = v,
            2 => terms.yaw = v,
            _ => terms.velocity = v,
        }
        total = tape.add(total, t)?;
    }
    terms.total = total;
    Ok(terms)
}
