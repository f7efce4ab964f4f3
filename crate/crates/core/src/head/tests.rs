use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::kernels::bilinear_sample;
use crate::numerics::{finite_diff_check, FdOptions, Objective};

fn toy_cfg(channels: usize, queries: usize, layers: usize) -> HeadConfig {
    HeadConfig {
        num_queries: queries,
        layers,
        attn_heads: 2,
        attn_points: 2,
        ffn_hidden: 2 * channels,
        mamba: Mamba2Config {
            d_model: channels,
            nheads: 2,
            d_state: 4,
            scan_mode: crate::ssd::ScanMode::Linear,
            dt_min: 0.05,
            dt_max: 0.5,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn head(channels: usize, queries: usize, layers: usize, seed: u64) -> (ParamStore<f64>, DetrHead) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let h = DetrHead::new(&mut ps, "head", channels, &toy_cfg(channels, queries, layers), &NormConfig::default(), &mut rng).unwrap();
    (ps, h)
}

fn gt_box(cx: f64, cy: f64, class: usize) -> Detection {
    Detection {
        cx,
        cy,
        l: 2.0,
        w: 1.5,
        yaw: 0.3,
        vx: 1.0,
        vy: -0.5,
        class,
        score: 1.0,
    }
}

#[test]
fn config_validation() {
    let cfg = HeadConfig::default();
    assert!(cfg.validate(16).is_ok());
    assert!(matches!(cfg.validate(32), Err(Error::Config(_))));
    assert!(matches!(HeadConfig { num_queries: 0, ..cfg.clone() }.validate(16), Err(Error::Config(_))));
    assert!(matches!(HeadConfig { attn_heads: 3, ..cfg.clone() }.validate(16), Err(Error::Config(_))));
    assert!(matches!(HeadConfig { max_shift: -1.0, ..cfg.clone() }.validate(16), Err(Error::Config(_))));
    assert!(matches!(HeadConfig { attn_radius: 0.0, ..cfg }.validate(16), Err(Error::Config(_))));
}

#[test]
fn decode_count_scores_and_sizes() {
    let (ps, h) = head(8, 12, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::inference(&ps);
    let bev = tape.constant(ShapedArray::randn(&[6, 6, 8], 1.0, &mut rng));
    let out = h.forward(&mut tape, bev).unwrap();
    let det = h.detections(&tape, &out, 6.0, 4).unwrap();
    assert_eq!(det.len(), 12);
    assert_eq!(det.frame, 4);
    for b in &det.boxes {
        assert!((0.0..=1.0).contains(&b.score));
        assert!(b.l > 0.0 && b.w > 0.0);
        assert!(b.class < 2);
    }
    det.validate(6.0).unwrap();
}

#[test]
fn null_regression_keeps_reference_geometry() {
    let (mut ps, h) = head(8, 5, 2, 3);
    for layer in &h.layers {
        *ps.get_mut(layer.reg.w) = ShapedArray::zeros(&[8, BOX_CODE]);
        *ps.get_mut(layer.reg.b.unwrap()) = ShapedArray::zeros(&[BOX_CODE]);
    }
    let mut tape = Tape::inference(&ps);
    let bev = tape.constant(ShapedArray::ones(&[4, 4, 8]));
    let out = h.forward(&mut tape, bev).unwrap();
    let det = h.detections(&tape, &out, 10.0, 0).unwrap();
    let refs = ps.get(h.ref_logit).map(|x| 1.0 / (1.0 + (-x).exp()));
    for (i, b) in det.boxes.iter().enumerate() {
        assert!((b.cx - (refs.get(&[i, 0]) * 20.0 - 10.0)).abs() < 1e-12);
        assert!((b.cy - (refs.get(&[i, 1]) * 20.0 - 10.0)).abs() < 1e-12);
        assert_eq!((b.l, b.w), (1.0, 1.0));
        assert_eq!((b.vx, b.vy), (0.0, 0.0));
    }
}

fn mix_output(ps: &ParamStore<f64>, mix: &QueryMixer, q: &ShapedArray<f64>, pos: &ShapedArray<f64>) -> ShapedArray<f64> {
    let mut tape = Tape::inference(ps);
    let (qv, pv) = (tape.constant(q.clone()), tape.constant(pos.clone()));
    let y = mix.forward(&mut tape, qv, pv).unwrap();
    tape.value(y).clone()
}

#[test]
fn query_mix_single_query_and_null_mixing() {
    let (mut ps, h) = head(8, 6, 1, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mix = &h.layers[0].mix;
    let one = ShapedArray::randn(&[1, 8], 1.0, &mut rng);
    assert!(mix_output(&ps, mix, &one, &one).all_finite());

    *ps.get_mut(mix.block.out_proj.w) = ShapedArray::zeros(&[8, 8]);
    if let Some(b) = mix.block.out_proj.b {
        *ps.get_mut(b) = ShapedArray::zeros(&[8]);
    }
    let q = ShapedArray::randn(&[6, 8], 1.0, &mut rng);
    let pos = ShapedArray::randn(&[6, 8], 1.0, &mut rng);
    let mut tape = Tape::inference(&ps);
    let qv = tape.constant(q.clone());
    let ln = mix.ln.forward(&mut tape, qv).unwrap();
    assert_eq!(&mix_output(&ps, mix, &q, &pos), tape.value(ln));
}

#[test]
fn query_mix_is_causal_in_query_index() {
    let (ps, h) = head(8, 10, 1, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mix = &h.layers[0].mix;
    let q = ShapedArray::randn(&[10, 8], 1.0, &mut rng);
    let pos = ShapedArray::randn(&[10, 8], 1.0, &mut rng);
    let base = mix_output(&ps, mix, &q, &pos);
    for j in 0..10 {
        let mut p = q.clone();
        p.data_mut()[j * 8 + 3] += 0.5;
        let y = mix_output(&ps, mix, &p, &pos);
        for r in 0..10 {
            let changed = y.row(r) != base.row(r);
            assert_eq!(changed, r >= j, "query {j} -> output {r}");
        }
    }
    let bi = QueryMixer {
        bidirectional: true,
        ..mix.clone()
    };
    let mut p = q.clone();
    p.data_mut()[9 * 8] += 0.5;
    assert_ne!(mix_output(&ps, &bi, &p, &pos).row(0), mix_output(&ps, &bi, &q, &pos).row(0));
}

fn cross_setup(seed: u64) -> (ParamStore<f64>, CrossAttention, ShapedArray<f64>, ShapedArray<f64>, ShapedArray<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let ca = CrossAttention::new(&mut ps, "ca", 8, 2, 3, 1.5, &mut rng);
    let q = ShapedArray::randn(&[5, 8], 1.0, &mut rng);
    let refs = ShapedArray::uniform(&[5, 2], 0.1, 0.9, &mut rng);
    let bev = ShapedArray::randn(&[8, 8, 8], 1.0, &mut rng);
    (ps, ca, q, refs, bev)
}

fn cross_run(ps: &ParamStore<f64>, ca: &CrossAttention, q: &ShapedArray<f64>, refs: &ShapedArray<f64>, bev: &ShapedArray<f64>) -> ShapedArray<f64> {
    let mut tape = Tape::inference(ps);
    let (qv, rv, bv) = (tape.constant(q.clone()), tape.constant(refs.clone()), tape.constant(bev.clone()));
    let y = ca.forward(&mut tape, qv, rv, bv).unwrap();
    tape.value(y).clone()
}

fn cell_point(refs: &ShapedArray<f64>, i: usize, n: usize) -> [f64; 2] {
    [refs.get(&[i, 1]) * n as f64 - 0.5, refs.get(&[i, 0]) * n as f64 - 0.5]
}

fn set_identity(ps: &mut ParamStore<f64>, l: &Linear) {
    *ps.get_mut(l.w) = ShapedArray::eye(l.d_in);
    *ps.get_mut(l.b.unwrap()) = ShapedArray::zeros(&[l.d_out]);
}

#[test]
fn cross_attention_zero_offsets_samples_reference() {
    let (mut ps, ca, q, refs, bev) = cross_setup(8);
    *ps.get_mut(ca.offsets.b.unwrap()) = ShapedArray::zeros(&[2 * 3 * 2]);
    set_identity(&mut ps, &ca.value);
    set_identity(&mut ps, &ca.out);
    let y = cross_run(&ps, &ca, &q, &refs, &bev);
    for i in 0..5 {
        let want = bilinear_sample(&bev, &[cell_point(&refs, i, 8)]).unwrap();
        for (a, b) in y.row(i).iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn cross_attention_one_hot_weight_selects_point() {
    let (mut ps, ca, q, refs, bev) = cross_setup(9);
    set_identity(&mut ps, &ca.value);
    set_identity(&mut ps, &ca.out);
    // every head puts all weight on point 1
    *ps.get_mut(ca.attn.b.unwrap()) = ShapedArray::from_fn(&[6], |i| if i % 3 == 1 { 1e3 } else { 0.0 });
    let y = cross_run(&ps, &ca, &q, &refs, &bev);
    let off = ps.get(ca.offsets.b.unwrap()).clone();
    for i in 0..5 {
        let base = cell_point(&refs, i, 8);
        for m in 0..2 {
            let o = (m * 3 + 1) * 2;
            let pt = [base[0] + off.data()[o], base[1] + off.data()[o + 1]];
            let s = bilinear_sample(&bev, &[pt]).unwrap();
            for d in m * 4..(m + 1) * 4 {
                assert!((y.get(&[i, d]) - s.data()[d]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn cross_attention_matches_gather_oracle() {
    let (mut ps, ca, q, refs, bev) = cross_setup(10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    *ps.get_mut(ca.offsets.w) = ShapedArray::randn(&[8, 12], 0.7, &mut rng);
    *ps.get_mut(ca.attn.w) = ShapedArray::randn(&[8, 6], 1.0, &mut rng);
    let got = cross_run(&ps, &ca, &q, &refs, &bev);

    let lin = |x: &[f64], l: &Linear| -> Vec<f64> {
        let (w, b) = (ps.get(l.w), ps.get(l.b.unwrap()));
        (0..l.d_out)
            .map(|o| b.data()[o] + (0..l.d_in).map(|i| x[i] * w.get(&[i, o])).sum::<f64>())
            .collect()
    };
    let vmap = ShapedArray::from_fn(&[8, 8, 8], |i| lin(&bev.data()[i / 8 * 8..i / 8 * 8 + 8], &ca.value)[i % 8]);
    for qi in 0..5 {
        let off = lin(q.row(qi), &ca.offsets);
        let logits = lin(q.row(qi), &ca.attn);
        let base = cell_point(&refs, qi, 8);
        let mut acc = vec![0.0; 8];
        for m in 0..2 {
            let lg = &logits[m * 3..m * 3 + 3];
            let z: f64 = lg.iter().map(|v| v.exp()).sum();
            for k in 0..3 {
                let o = (m * 3 + k) * 2;
                let s = bilinear_sample(&vmap, &[[base[0] + off[o], base[1] + off[o + 1]]]).unwrap();
                for d in m * 4..(m + 1) * 4 {
                    acc[d] += lg[k].exp() / z * s.data()[d];
                }
            }
        }
        let want = lin(&acc, &ca.out);
        for d in 0..8 {
            assert!((got.get(&[qi, d]) - want[d]).abs() <= 1e-5);
        }
    }
}

#[test]
fn hungarian_equals_brute_force_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let a = hungarian(&cost).unwrap();
        let used: Vec<usize> = a.iter().flatten().copied().collect();
        assert_eq!(used.len(), n.min(m));
        assert!(used.iter().all_unique());
        let best = if n <= m {
            (0..m).permutations(n).map(|c| (0..n).map(|i| cost[i][c[i]]).sum::<f64>()).fold(f64::INFINITY, f64::min)
        } else {
            (0..n)
                .permutations(m)
                .map(|r| {
                    let mut x = vec![None; n];
                    r.iter().enumerate().for_each(|(j, &i)| x[i] = Some(j));
                    assignment_cost(&cost, &x)
                })
                .fold(f64::INFINITY, f64::min)
        };
        assert_eq!(assignment_cost(&cost, &a), best);
    }
}

fn leaf_output(tape: &mut Tape<f64>, logits: ShapedArray<f64>, boxes: ShapedArray<f64>) -> HeadOutput {
    HeadOutput {
        logits: tape.leaf(logits),
        boxes: tape.leaf(boxes),
    }
}

#[test]
fn loss_is_zero_for_exact_confident_predictions() {
    let ps = ParamStore::<f64>::new();
    let gt = [gt_box(3.0, -2.0, 0), gt_box(-5.0, 4.0, 1)];
    let mut boxes = ShapedArray::zeros(&[3, BOX_CODE]);
    for (r, g) in [(0, &gt[1]), (2, &gt[0])] {
        boxes.row_mut(r).copy_from_slice(&g.encode(10.0));
    }
    let conf = 60.0;
    let logits = ShapedArray::new(vec![3, 3], vec![0.0, conf, 0.0, 0.0, 0.0, conf, conf, 0.0, 0.0]).unwrap();
    let assignment = Assignment {
        pairs: vec![(0, 1), (2, 0)],
        num_queries: 3,
    };
    let mut tape = Tape::new(&ps);
    let out = leaf_output(&mut tape, logits, boxes);
    let t = detection_loss(&mut tape, &out, &gt, &assignment, 10.0, &LossWeights::default()).unwrap();
    assert_eq!((t.center, t.size, t.yaw, t.velocity), (0.0, 0.0, 0.0, 0.0));
    assert!(t.cls < 1e-20);
}

#[test]
fn empty_scene_loss_vanishes_with_confidence() {
    let ps = ParamStore::<f64>::new();
    let assignment = Assignment {
        pairs: vec![],
        num_queries: 4,
    };
    let mut last = f64::INFINITY;
    for conf in [1.0, 5.0, 20.0, 50.0] {
        let logits = ShapedArray::from_fn(&[4, 3], |i| if i % 3 == 2 { conf } else { 0.0 });
        let mut tape = Tape::new(&ps);
        let out = leaf_output(&mut tape, logits, ShapedArray::zeros(&[4, BOX_CODE]));
        let t = detection_loss(&mut tape, &out, &[], &assignment, 10.0, &LossWeights::default()).unwrap();
        let v = tape.value(t.total).data()[0];
        assert!(v < last && v >= 0.0);
        assert_eq!(v, t.cls);
        last = v;
    }
    assert!(last < 1e-20);
}

#[test]
fn loss_is_invariant_to_gt_order() {
    let (ps, h) = head(8, 8, 1, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let bevv = ShapedArray::randn(&[8, 8, 8], 1.0, &mut rng);
    let gt = vec![gt_box(2.0, 3.0, 0), gt_box(-4.0, 1.0, 1), gt_box(5.0, -6.0, 0)];
    let mut values = Vec::new();
    for perm in [[0, 1, 2], [2, 0, 1], [1, 2, 0]] {
        let g: Vec<Detection> = perm.iter().map(|&i| gt[i]).collect();
        let mut tape = Tape::inference(&ps);
        let bev = tape.constant(bevv.clone());
        let out = h.forward(&mut tape, bev).unwrap();
        let (probs, centers) = h.probs_and_centers(&tape, &out).unwrap();
        let a = match_predictions(&probs, &centers, &g, 8.0, h.cfg.matching).unwrap();
        let t = detection_loss(&mut tape, &out, &g, &a, 8.0, &h.cfg.loss).unwrap();
        values.push(tape.value(t.total).data()[0]);
    }
    assert!(values.iter().all_equal(), "{values:?}");
}

struct HeadObjective {
    head: DetrHead,
    bev: crate::numerics::ParamId,
    gt: Vec<Detection>,
    assignment: Assignment,
}

impl Objective for HeadObjective {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let bev = tape.param(self.bev);
        let out = self.head.forward(tape, bev)?;
        Ok(detection_loss(tape, &out, &self.gt, &self.assignment, 8.0, &self.head.cfg.loss)?.total)
    }
}

#[test]
fn head_and_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut ps = ParamStore::<f64>::new();
    let bev = ps.add("bev", ShapedArray::randn(&[8, 8, 16], 1.0, &mut rng));
    let head = DetrHead::new(&mut ps, "head", 16, &toy_cfg(16, 8, 2), &NormConfig::default(), &mut rng).unwrap();
    for layer in &head.layers {
        *ps.get_mut(layer.cross.offsets.w) = ShapedArray::randn(&[16, 8], 0.3, &mut rng);
        *ps.get_mut(layer.cross.attn.w) = ShapedArray::randn(&[16, 4], 0.5, &mut rng);
    }
    let gt = vec![gt_box(2.0, 3.0, 0), gt_box(-4.0, 1.0, 1), gt_box(5.0, -6.0, 0)];
    let assignment = {
        let mut tape = Tape::inference(&ps);
        let b = tape.param(bev);
        let out = head.forward(&mut tape, b).unwrap();
        let (probs, centers) = head.probs_and_centers(&tape, &out).unwrap();
        match_predictions(&probs, &centers, &gt, 8.0, head.cfg.matching).unwrap()
    };
    assert_eq!(assignment.pairs.len(), 3);
    let obj = HeadObjective {
        head,
        bev,
        gt,
        assignment,
    };
    let rep = finite_diff_check(&ps, 1e-5, &FdOptions { stride: 3, ..Default::default() }, &obj).unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    assert!(rep.checked > 1000, "{rep:?}");
}
