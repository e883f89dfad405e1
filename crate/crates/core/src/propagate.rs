//! Label propagation along learned correspondences.
//!
//! Inference only: soft label maps ride the same windowed attention the
//! model was trained with, queried at one pyramid level with hypercolumn
//! embeddings (finer levels stacked over upsampled coarser ones). Each
//! attention row keeps its top-k logits, is renormalized, and mixes the
//! source frame's labels; window anchors come from the model's own
//! coarse-to-fine flow, whose absolute column indexing already encodes the
//! motion, so label maps themselves are never warped. Propagation is
//! auto-regressive: each new frame is labeled from the m most recent
//! propagated maps and their average becomes that frame's map.

use crate::encoder::{encode, EncoderConfig, FeaturePyramid, LevelFeatures};
use crate::engine::{Array, BoundParams, ParamSet, Tape, Tensor};
use crate::regressor::concat_channels;
use crate::transition::{
    coarse_to_fine, coordinate_grid, local_attention, round_half_up, upsample_flow, FlowField,
    LevelAttention, TransitionConfig,
};

/// Soft per-pixel class masses at one level's resolution, row-major [n, c].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl LabelMap {
    pub fn zeros(h: usize, w: usize, classes: usize) -> Self {
        LabelMap { h, w, classes, data: vec![0.0; h * w * classes] }
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.classes..(p + 1) * self.classes]
    }

    /// Entries are masses: nonnegative, at most unit total per pixel.
    pub fn validate(&self) {
        assert_eq!(self.data.len(), self.h * self.w * self.classes, "label map size mismatch");
        for p in 0..self.h * self.w {
            let row = self.row(p);
            assert!(row.iter().all(|&v| v >= 0.0), "negative label mass at pixel {p}");
            let s: f64 = row.iter().sum();
            assert!(s <= 1.0 + 1e-6, "label mass {s} exceeds 1 at pixel {p}");
        }
    }

    /// Hardest class per pixel; ties keep the lowest class id.
    pub fn argmax_classes(&self) -> Vec<usize> {
        (0..self.h * self.w)
            .map(|p| {
                let row = self.row(p);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationConfig {
    /// Number of most recent source frames mixed into each new map.
    pub context_size: usize,
    /// Attention entries kept per row before renormalizing.
    pub top_k: usize,
    /// Pyramid level whose grid carries the labels; None picks the
    /// penultimate level (the finest level when there is only one).
    pub query_level: Option<usize>,
    /// Levels stacked into the attention embedding; empty picks the two
    /// levels just below the finest (clamped and deduplicated when the
    /// pyramid is shallow).
    pub hypercolumn_levels: Vec<usize>,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig { context_size: 1, top_k: 10, query_level: None, hypercolumn_levels: Vec::new() }
    }
}

impl PropagationConfig {
    pub fn resolved_query_level(&self, levels: usize) -> usize {
        match self.query_level {
            Some(l) => {
                assert!(l >= 1 && l <= levels, "query level {l} outside 1..={levels}");
                l
            }
            None => levels.saturating_sub(1).max(1),
        }
    }

    pub fn resolved_hypercolumn(&self, levels: usize) -> Vec<usize> {
        let mut ls = if self.hypercolumn_levels.is_empty() {
            vec![levels.saturating_sub(2).max(1), levels.saturating_sub(1).max(1)]
        } else {
            self.hypercolumn_levels.clone()
        };
        ls.sort_unstable();
        ls.dedup();
        for &l in &ls {
            assert!(l >= 1 && l <= levels, "hypercolumn level {l} outside 1..={levels}");
        }
        ls
    }
}

/// Keeps the k largest logits of a row, softmaxes over them, zeroes the
/// rest. Ties at the cut keep the earlier index.
pub fn topk_filter(logits: &[f64], k: usize) -> Vec<f64> {
    assert!(k >= 1, "top-k needs k >= 1");
    assert!(k <= logits.len(), "k = {k} exceeds row length {}", logits.len());
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let kept = &order[..k];
    let m = kept.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; logits.len()];
    let mut z = 0.0;
    for &i in kept {
        let e = (logits[i] - m).exp();
        out[i] = e;
        z += e;
    }
    for &i in kept {
        out[i] /= z;
    }
    out
}

/// Mixes source labels through one attention matrix, top-k filtered per
/// row: out(p) = sum_q w(p,q) labels(q). k wider than a clipped border row
/// degrades to that row's full softmax.
pub fn transfer_labels(tape: &Tape, att: &LevelAttention, k: usize, labels: &LabelMap) -> LabelMap {
    let t = &att.transition;
    assert_eq!((labels.h, labels.w), (t.h, t.w), "labels do not match the attention grid");
    let logits = tape.val(&att.logits).to_vec();
    let c = labels.classes;
    let mut out = LabelMap::zeros(t.h, t.w, c);
    for p in 0..t.n() {
        let (s, e) = (t.row_ptr[p], t.row_ptr[p + 1]);
        let w = topk_filter(&logits[s..e], k.min(e - s));
        for (j, &q) in t.cols[s..e].iter().enumerate() {
            if w[j] == 0.0 {
                continue;
            }
            let src = labels.row(q);
            let dst = &mut out.data[p * c..(p + 1) * c];
            for ci in 0..c {
                dst[ci] += w[j] * src[ci];
            }
        }
    }
    out
}

/// Stacks embeddings of several levels at the query level's resolution:
/// coarser maps are bilinearly resampled, channels concatenated, rows
/// re-unit-normalized. Returns rows [qh*qw, sum of dims].
pub fn hypercolumn(
    tape: &mut Tape,
    pyr: &FeaturePyramid,
    levels: &[usize],
    query_level: usize,
) -> Tensor {
    let q = &pyr.levels[query_level - 1];
    let (qh, qw) = (q.h, q.w);
    let mut maps = Vec::with_capacity(levels.len());
    for &l in levels {
        let lf = &pyr.levels[l - 1];
        let rows = lf.embed.clone();
        let chw = tape.rows_to_chw(&rows, lf.h, lf.w);
        if (lf.h, lf.w) == (qh, qw) {
            maps.push(chw);
            continue;
        }
        let (sx, sy) = (lf.w as f64 / qw as f64, lf.h as f64 / qh as f64);
        let grid = coordinate_grid(qh, qw);
        let mut coords = grid.data;
        for v in coords[..qh * qw].iter_mut() {
            *v = (*v + 0.5) * sx - 0.5;
        }
        for v in coords[qh * qw..].iter_mut() {
            *v = (*v + 0.5) * sy - 0.5;
        }
        let coords = tape.input(&Array::from_vec(&[2, qh, qw], coords));
        maps.push(tape.bilinear_sample(&chw, &coords));
    }
    let refs: Vec<&Tensor> = maps.iter().collect();
    let stacked = concat_channels(tape, &refs, qh, qw);
    let rows = tape.chw_to_rows(&stacked);
    tape.l2_normalize_rows(&rows)
}

/// Windowed attention from the frame being labeled (rows) to a source
/// frame holding labels (columns), between hypercolumn embeddings at the
/// query level. Windows are anchored by the model's coarse flow toward the
/// source (the total flow of the level above, upsampled; zero at the
/// coarsest), so the columns already point at the moved content.
pub fn query_attention(
    tape: &mut Tape,
    query_pyr: &FeaturePyramid,
    source_pyr: &FeaturePyramid,
    tcfg: &TransitionConfig,
    pcfg: &PropagationConfig,
) -> LevelAttention {
    let levels = query_pyr.levels.len();
    let ql = pcfg.resolved_query_level(levels);
    let hyper_levels = pcfg.resolved_hypercolumn(levels);
    let (qh, qw) = (query_pyr.levels[ql - 1].h, query_pyr.levels[ql - 1].w);

    let anchor = if ql == 1 {
        FlowField::zeros(tape, qh, qw)
    } else {
        let flows = coarse_to_fine(tape, query_pyr, source_pyr, tcfg);
        let up = upsample_flow(tape, &flows[ql - 2].total);
        assert_eq!((up.h, up.w), (qh, qw), "upsampled anchor does not match the query grid");
        up
    };
    let hq = hypercolumn(tape, query_pyr, &hyper_levels, ql);
    let hs = hypercolumn(tape, source_pyr, &hyper_levels, ql);
    local_attention(tape, &hq, &hs, &anchor, tcfg, qh, qw)
}

fn input_params(tape: &mut Tape, params: &ParamSet) -> BoundParams {
    let tensors = params.entries.iter().map(|(n, a)| (n.clone(), tape.input(a))).collect();
    BoundParams { tensors }
}

fn embed_arrays(params: &ParamSet, enc_cfg: &EncoderConfig, frame: &Array) -> Vec<(usize, usize, Array)> {
    let mut tape = Tape::new();
    let bound = input_params(&mut tape, params);
    let pyr = encode(&mut tape, &bound, enc_cfg, frame);
    pyr.levels
        .iter()
        .map(|lf| {
            let vals = tape.val(&lf.embed).to_vec();
            (lf.h, lf.w, Array::from_vec(&lf.embed.shape, vals))
        })
        .collect()
}

fn rebuild_pyramid(tape: &mut Tape, embeds: &[(usize, usize, Array)]) -> FeaturePyramid {
    let levels = embeds
        .iter()
        .map(|(h, w, a)| LevelFeatures {
            h: *h,
            w: *w,
            // Conv features are not consulted during propagation.
            conv: tape.input(&Array::zeros(&[0, *h, *w])),
            embed: tape.input(a),
        })
        .collect();
    FeaturePyramid { levels }
}

/// Carries an initial query-level label map through a frame sequence. For
/// each new frame the m most recent propagated maps are mixed through
/// top-k attention and averaged. Returns one map per frame, the first
/// being the initial map itself.
pub fn propagate_labels(
    frames: &[Array],
    params: &ParamSet,
    enc_cfg: &EncoderConfig,
    tcfg: &TransitionConfig,
    pcfg: &PropagationConfig,
    initial: &LabelMap,
) -> Vec<LabelMap> {
    assert!(!frames.is_empty(), "no frames to propagate over");
    assert!(pcfg.context_size >= 1, "propagation context is empty");
    assert!(pcfg.top_k >= 1, "top-k needs k >= 1");
    let embeds: Vec<_> = frames.iter().map(|f| embed_arrays(params, enc_cfg, f)).collect();
    let ql = pcfg.resolved_query_level(enc_cfg.levels);
    let (qh, qw, _) = embeds[0][ql - 1];
    assert_eq!((initial.h, initial.w), (qh, qw), "initial labels must live on the query grid");

    let mut out = Vec::with_capacity(frames.len());
    out.push(initial.clone());
    for t in 1..frames.len() {
        let first = t.saturating_sub(pcfg.context_size);
        let mut acc = LabelMap::zeros(qh, qw, initial.classes);
        let mut count = 0.0;
        for s in first..t {
            let mut tape = Tape::new();
            let query = rebuild_pyramid(&mut tape, &embeds[t]);
            let source = rebuild_pyramid(&mut tape, &embeds[s]);
            let att = query_attention(&mut tape, &query, &source, tcfg, pcfg);
            let part = transfer_labels(&tape, &att, pcfg.top_k, &out[s]);
            for (a, b) in acc.data.iter_mut().zip(&part.data) {
                *a += b;
            }
            count += 1.0;
        }
        for a in acc.data.iter_mut() {
            *a /= count;
        }
        out.push(acc);
    }
    out
}

/// One-hot label map from (x, y, class) points; coordinates round to the
/// nearest pixel, halves up. Two points may not claim the same pixel.
pub fn keypoints_to_labelmap(
    keypoints: &[(f64, f64, usize)],
    h: usize,
    w: usize,
    classes: usize,
) -> LabelMap {
    let mut map = LabelMap::zeros(h, w, classes);
    for &(x, y, class) in keypoints {
        assert!(class < classes, "class {class} outside 0..{classes}");
        let px = round_half_up(x);
        let py = round_half_up(y);
        assert!(
            px >= 0 && (px as usize) < w && py >= 0 && (py as usize) < h,
            "keypoint ({x}, {y}) falls outside the {w}x{h} grid"
        );
        let p = py as usize * w + px as usize;
        let row = &mut map.data[p * classes..(p + 1) * classes];
        assert!(row.iter().all(|&v| v == 0.0), "two keypoints claim pixel ({px}, {py})");
        row[class] = 1.0;
    }
    map
}

/// Per-class location of the largest mass, scanned row-major so ties keep
/// the earliest pixel; classes with no mass report None.
pub fn labelmap_to_keypoints(map: &LabelMap) -> Vec<Option<(f64, f64)>> {
    let mut best = vec![(0.0f64, None); map.classes];
    for p in 0..map.h * map.w {
        let row = map.row(p);
        for (c, &v) in row.iter().enumerate() {
            if v > best[c].0 {
                best[c] = (v, Some(((p % map.w) as f64, (p / map.w) as f64)));
            }
        }
    }
    best.into_iter().map(|(_, loc)| loc).collect()
}

#[cfg(test)]
mod tests;
