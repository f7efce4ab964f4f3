use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::bevseq::wrap_angle;
use crate::error::{Error, Result};

/// One planar box: center and velocity in meters in the ego frame, size in
/// meters, yaw in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub l: f64,
    pub w: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub class: usize,
    pub score: f64,
}

impl Detection {
    pub fn center_distance(&self, other: &Detection) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }

    /// Regression target `(u, v, ln l, ln w, sin, cos, vx, vy)` with the
    /// center normalized to `[0, 1]²` over `[-range, range]²`.
    pub fn encode(&self, range: f64) -> [f64; 8] {
        [
            (self.cx + range) / (2.0 * range),
            (self.cy + range) / (2.0 * range),
            self.l.ln(),
            self.w.ln(),
            self.yaw.sin(),
            self.yaw.cos(),
            self.vx,
            self.vy,
        ]
    }

    /// Inverse of [`Detection::encode`].
    pub fn decode(code: &[f64], range: f64, class: usize, score: f64) -> Self {
        Self {
            cx: code[0] * 2.0 * range - range,
            cy: code[1] * 2.0 * range - range,
            l: code[2].exp(),
            w: code[3].exp(),
            yaw: wrap_angle(code[4].atan2(code[5])),
            vx: code[6],
            vy: code[7],
            class,
            score,
        }
    }
}

/// The boxes of one frame, ground truth or predicted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionSet {
    pub frame: usize,
    pub boxes: Vec<Detection>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    frame: usize,
    cx: f64,
    cy: f64,
    l: f64,
    w: f64,
    yaw: f64,
    vx: f64,
    vy: f64,
    class: usize,
    score: f64,
}

impl DetectionSet {
    pub fn new(frame: usize, boxes: Vec<Detection>) -> Self {
        Self { frame, boxes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Check sizes, scores and that centers lie within `range` plus 10%.
    pub fn validate(&self, range: f64) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            if !(b.l > 0.0 && b.w > 0.0) {
                return Err(Error::arg("DetectionSet", format!("box {i}: non-positive size {}x{}", b.l, b.w)));
            }
            if !b.score.is_finite() {
                return Err(Error::arg("DetectionSet", format!("box {i}: score {}", b.score)));
            }
            let lim = 1.1 * range;
            if !(b.cx.abs() <= lim && b.cy.abs() <= lim) {
                return Err(Error::arg("DetectionSet", format!("box {i}: center ({}, {}) outside ±{lim}", b.cx, b.cy)));
            }
        }
        Ok(())
    }
}

/// Write frames as CSV with header `frame,cx,cy,l,w,yaw,vx,vy,class,score`.
pub fn write_detections_csv<W: Write>(sets: &[DetectionSet], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for set in sets {
        for b in &set.boxes {
            w.serialize(Row {
                frame: set.frame,
                cx: b.cx,
                cy: b.cy,
                l: b.l,
                w: b.w,
                yaw: b.yaw,
                vx: b.vx,
                vy: b.vy,
                class: b.class,
                score: b.score,
            })
            .map_err(csv_err)?;
        }
    }
    if sets.iter().all(DetectionSet::is_empty) {
        w.write_record(["frame", "cx", "cy", "l", "w", "yaw", "vx", "vy", "class", "score"])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Read the CSV written by [`write_detections_csv`], grouping rows by frame
/// in order of first appearance.
pub fn read_detections_csv<R: Read>(input: R) -> Result<Vec<DetectionSet>> {
    let mut r = csv::Reader::from_reader(input);
    let mut sets: Vec<DetectionSet> = Vec::new();
    for row in r.deserialize() {
        let row: Row = row.map_err(csv_err)?;
        let det = Detection {
            cx: row.cx,
            cy: row.cy,
            l: row.l,
            w: row.w,
            yaw: row.yaw,
            vx: row.vx,
            vy: row.vy,
            class: row.class,
            score: row.score,
        };
        match sets.iter_mut().find(|s| s.frame == row.frame) {
            Some(s) => s.boxes.push(det),
            None => sets.push(DetectionSet::new(row.frame, vec![det])),
        }
    }
    Ok(sets)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("detection csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Detection {
        Detection {
            cx: 3.5,
            cy: -20.25,
            l: 9.0,
            w: 3.0,
            yaw: 0.7,
            vx: 1.5,
            vy: -0.5,
            class: 1,
            score: 0.875,
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let d = sample();
        let back = Detection::decode(&d.encode(51.2), 51.2, d.class, d.score);
        for (a, b) in [(d.cx, back.cx), (d.cy, back.cy), (d.l, back.l), (d.w, back.w), (d.yaw, back.yaw)] {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn yaw_from_sin_cos() {
        let z = Detection::decode(&[0.5, 0.5, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], 1.0, 0, 1.0);
        assert_eq!(z.yaw, 0.0);
        assert_eq!((z.l, z.w), (1.0, 1.0));
        let q = Detection::decode(&[0.5, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], 1.0, 0, 1.0);
        assert_eq!(q.yaw, std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn csv_round_trip() {
        let mut b = sample();
        let sets = vec![DetectionSet::new(0, vec![b]), DetectionSet::new(3, vec![b, { b.class = 0; b }])];
        let mut buf = Vec::new();
        write_detections_csv(&sets, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("frame,cx,cy,l,w,yaw,vx,vy,class,score\n"));
        assert_eq!(read_detections_csv(buf.as_slice()).unwrap(), sets);
    }

    #[test]
    fn validation() {
        let mut s = DetectionSet::new(0, vec![sample()]);
        assert!(s.validate(51.2).is_ok());
        s.boxes[0].l = 0.0;
        assert!(s.validate(51.2).is_err());
        s.boxes[0].l = 1.0;
        s.boxes[0].cx = 60.0;
        assert!(s.validate(51.2).is_err());
    }
}
