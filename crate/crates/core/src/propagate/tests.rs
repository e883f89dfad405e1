use super::*;
use crate::encoder::init_encoder;
use crate::transition::chain;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_rows(n: usize, d: usize, seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; n * d];
    for r in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (j, v) in row.iter().enumerate() {
            data[r * d + j] = v / norm;
        }
    }
    Array::from_vec(&[n, d], data)
}

fn one_hot_rows(n: usize, assign: impl Fn(usize) -> usize) -> Array {
    let mut data = vec![0.0; n * n];
    for p in 0..n {
        data[p * n + assign(p)] = 1.0;
    }
    Array::from_vec(&[n, n], data)
}

fn random_labels(h: usize, w: usize, classes: usize, seed: u64) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = LabelMap::zeros(h, w, classes);
    for p in 0..h * w {
        let c = rng.gen_range(0..classes);
        map.data[p * classes + c] = rng.gen_range(0.0..1.0);
    }
    map.validate();
    map
}

fn textured_frame(h: usize, w: usize, seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, c) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.0..6.0));
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v = 0.45 * (a * x as f64 * 0.7 + c).sin() + 0.45 * (b * y as f64 * 0.9 - c).cos();
            data.push(v.clamp(-1.0, 1.0));
        }
    }
    Array::from_vec(&[1, h, w], data)
}

// Plain attention between two embedding sets with zero anchors.
fn plain_attention(tape: &mut Tape, xs: &Array, xt: &Array, h: usize, w: usize, tcfg: &TransitionConfig) -> LevelAttention {
    let a = tape.input(xs);
    let b = tape.input(xt);
    let zero = FlowField::zeros(tape, h, w);
    local_attention(tape, &a, &b, &zero, tcfg, h, w)
}

#[test]
fn test_topk_filter_examples() {
    let row = [2.0, 1.0, 0.0];
    let full = topk_filter(&row, 3);
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    for (o, &l) in full.iter().zip(&row) {
        assert!((o - l.exp() / z).abs() < 1e-12, "k = len must be the ordinary softmax");
    }

    let two = topk_filter(&row, 2);
    let e = 1f64.exp();
    assert!((two[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!((two[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    assert_eq!(two[2], 0.0);

    assert_eq!(topk_filter(&row, 1), vec![1.0, 0.0, 0.0]);
    assert_eq!(topk_filter(&[1.0, 1.0, 0.0], 1), vec![1.0, 0.0, 0.0], "ties keep the earlier index");
}

#[test]
fn test_keypoint_labelmap_round_trip() {
    let kps = [(2.0, 1.0, 0usize), (0.0, 3.0, 2usize)];
    let map = keypoints_to_labelmap(&kps, 4, 4, 3);
    map.validate();
    let back = labelmap_to_keypoints(&map);
    assert_eq!(back[0], Some((2.0, 1.0)));
    assert_eq!(back[1], None, "unused class reports absent");
    assert_eq!(back[2], Some((0.0, 3.0)));

    // Coordinates snap to the nearest pixel, halves rounding up.
    let map = keypoints_to_labelmap(&[(1.5, 0.4, 0)], 4, 4, 1);
    assert_eq!(labelmap_to_keypoints(&map)[0], Some((2.0, 0.0)));
}

#[test]
fn test_labelmap_argmax_tie_breaks_row_major() {
    let mut map = LabelMap::zeros(3, 3, 1);
    map.data[4] = 0.6;
    map.data[8] = 0.6;
    assert_eq!(labelmap_to_keypoints(&map)[0], Some((1.0, 1.0)), "earlier pixel wins the tie");
    map.data[8] = 0.7;
    assert_eq!(labelmap_to_keypoints(&map)[0], Some((2.0, 2.0)), "larger mass wins");
}

#[test]
#[should_panic(expected = "outside the")]
fn test_out_of_bounds_keypoint_panics() {
    keypoints_to_labelmap(&[(5.0, 0.0, 0)], 4, 4, 1);
}

#[test]
#[should_panic(expected = "context is empty")]
fn test_empty_context_panics() {
    let enc_cfg = EncoderConfig { levels: 1, embed_dim: 4, base_channels: 4 };
    let params = init_encoder(&enc_cfg, 1);
    let pcfg = PropagationConfig { context_size: 0, ..Default::default() };
    let frames = [textured_frame(8, 8, 1), textured_frame(8, 8, 1)];
    let initial = LabelMap::zeros(4, 4, 1);
    propagate_labels(&frames, &params, &enc_cfg, &TransitionConfig::default(), &pcfg, &initial);
}

#[test]
fn test_one_hot_transitions_follow_permutation() {
    // Embeddings are indicator rows shifted by two columns, so every
    // attention row's largest logit sits on the true match; k = 1 makes the
    // transfer a hard permutation of the labels.
    let (h, w) = (4, 6);
    let n = h * w;
    let shift = |p: usize| {
        let (y, x) = (p / w, p % w);
        y * w + (x + 2) % w
    };
    let xs = one_hot_rows(n, shift);
    let xt = one_hot_rows(n, |p| p);
    let tcfg = TransitionConfig { window: 5, temperature: 0.07, ..Default::default() };
    let mut tape = Tape::new();
    let att = plain_attention(&mut tape, &xs, &xt, h, w, &tcfg);

    let labels = random_labels(h, w, 3, 5);
    let moved = transfer_labels(&tape, &att, 1, &labels);
    for p in 0..n {
        let x = p % w;
        // The window reaches the wrapped target only away from the seam.
        if x + 2 < w {
            assert_eq!(moved.row(p), labels.row(shift(p)), "pixel {p}");
        }
    }
}

#[test]
fn test_full_topk_equals_dense_softmax_product() {
    let (h, w) = (8, 8);
    let n = h * w;
    let tcfg = TransitionConfig { window: 7, temperature: 0.2, ..Default::default() };
    let xs = unit_rows(n, 6, 31);
    let xt = unit_rows(n, 6, 32);
    let mut tape = Tape::new();
    let att = plain_attention(&mut tape, &xs, &xt, h, w, &tcfg);

    let labels = random_labels(h, w, 4, 33);
    let out = transfer_labels(&tape, &att, tcfg.window * tcfg.window, &labels);

    let dense = att.transition.to_dense(&tape);
    for p in 0..n {
        for c in 0..4 {
            let mut want = 0.0;
            for q in 0..n {
                want += dense.data[p * n + q] * labels.data[q * 4 + c];
            }
            assert!(
                (out.data[p * 4 + c] - want).abs() < 1e-12,
                "pixel {p} class {c}: {} vs {want}",
                out.data[p * 4 + c]
            );
        }
    }
}

#[test]
fn test_two_hops_equal_chained_transitions() {
    // Auto-regressive transfer over two hops with full rows and a single
    // source must match the two-hop transition product applied once.
    let (h, w) = (8, 8);
    let n = h * w;
    let tcfg = TransitionConfig { window: 7, temperature: 0.2, prune_threshold: 0.0, ..Default::default() };
    let e1 = unit_rows(n, 6, 41);
    let e2 = unit_rows(n, 6, 42);
    let e3 = unit_rows(n, 6, 43);
    let mut tape = Tape::new();
    let k21 = plain_attention(&mut tape, &e2, &e1, h, w, &tcfg);
    let k32 = plain_attention(&mut tape, &e3, &e2, h, w, &tcfg);

    let labels = random_labels(h, w, 3, 44);
    let l2 = transfer_labels(&tape, &k21, tcfg.window * tcfg.window, &labels);
    let l3 = transfer_labels(&tape, &k32, tcfg.window * tcfg.window, &l2);

    let two_hop = chain(&mut tape, &[&k32.transition, &k21.transition], &tcfg);
    let dense = two_hop.to_dense(&tape);
    for p in 0..n {
        for c in 0..3 {
            let mut want = 0.0;
            for q in 0..n {
                want += dense.data[p * n + q] * labels.data[q * 3 + c];
            }
            assert!((l3.data[p * 3 + c] - want).abs() < 1e-9, "pixel {p} class {c}");
        }
    }
}

#[test]
fn test_static_video_keeps_sharp_labels() {
    // Identical frames with discriminative embeddings stand in for a
    // trained model: each pixel's self-logit dominates its window, so the
    // map survives a transfer almost untouched.
    let (h, w) = (6, 6);
    let n = h * w;
    let xs = one_hot_rows(n, |p| p);
    let tcfg = TransitionConfig { window: 5, temperature: 0.07, ..Default::default() };
    let mut tape = Tape::new();
    let att = plain_attention(&mut tape, &xs, &xs, h, w, &tcfg);

    let labels = random_labels(h, w, 3, 51);
    let kept = transfer_labels(&tape, &att, tcfg.window * tcfg.window, &labels);
    for p in 0..n {
        for c in 0..3 {
            assert!(
                (kept.data[p * 3 + c] - labels.data[p * 3 + c]).abs() < 1e-3,
                "pixel {p} class {c} drifted"
            );
        }
    }
}

#[test]
fn test_propagation_conserves_mass_and_is_deterministic() {
    let enc_cfg = EncoderConfig { levels: 2, embed_dim: 4, base_channels: 4 };
    let params = init_encoder(&enc_cfg, 61);
    let tcfg = TransitionConfig { window: 5, ..Default::default() };
    let pcfg = PropagationConfig { context_size: 2, top_k: 5, ..Default::default() };
    let frames: Vec<Array> = (0..4).map(|i| textured_frame(16, 16, 62 + i)).collect();

    // Query level defaults to the penultimate: level 1 of 2, an 4x4 grid.
    let ql = pcfg.resolved_query_level(enc_cfg.levels);
    assert_eq!(ql, 1);
    let initial = random_labels(4, 4, 3, 63);

    let track = propagate_labels(&frames, &params, &enc_cfg, &tcfg, &pcfg, &initial);
    assert_eq!(track.len(), frames.len());
    for map in &track {
        map.validate();
    }
    let again = propagate_labels(&frames, &params, &enc_cfg, &tcfg, &pcfg, &initial);
    for (a, b) in track.iter().zip(&again) {
        assert_eq!(a.data, b.data, "propagation must be deterministic");
    }
}

#[test]
fn test_propagation_uses_hypercolumn_and_anchor_machinery() {
    // Three levels, query at the penultimate, hypercolumn stacking levels 1
    // and 2: exercises resampling, anchoring from upsampled coarse flow, and
    // multi-source averaging in one run.
    let enc_cfg = EncoderConfig { levels: 3, embed_dim: 4, base_channels: 2 };
    let params = init_encoder(&enc_cfg, 71);
    let tcfg = TransitionConfig { window: 5, ..Default::default() };
    let pcfg = PropagationConfig { context_size: 3, top_k: 3, ..Default::default() };
    assert_eq!(pcfg.resolved_hypercolumn(enc_cfg.levels), vec![1, 2]);
    let frames: Vec<Array> = (0..3).map(|i| textured_frame(16, 16, 72 + i)).collect();

    let initial = random_labels(4, 4, 2, 73);
    let track = propagate_labels(&frames, &params, &enc_cfg, &tcfg, &pcfg, &initial);
    for map in &track {
        map.validate();
        assert!(map.data.iter().sum::<f64>() > 0.0, "mass vanished");
    }
}
