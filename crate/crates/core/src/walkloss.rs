//! Training objectives for the nonparametric matcher: cycle-consistency of
//! chained transitions across frames, summed over pyramid levels and cycle
//! lengths, plus edge-aware second-order flow smoothness.

use crate::encoder::{encode, EncoderConfig, FeaturePyramid};
use crate::engine::{arc_idx, Array, BoundParams, Tape, Tensor};
use crate::transition::{chain, coarse_to_fine, FlowField, SparseTransition, TransitionConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct CycleConfig {
    /// Frames per walk; cycles of length 2..=cycle_length are trained.
    pub cycle_length: usize,
    /// Train every subcycle, not just the full-length walk.
    pub subcycles: bool,
    /// Per-level objective weights, coarsest first; empty means all ones.
    /// A zero weight removes that level from both the walk and smoothness
    /// terms, leaving its embedding head untrained.
    pub level_weights: Vec<f64>,
    /// Sum the per-pixel losses instead of averaging them.
    pub pixel_sum: bool,
}

impl Default for CycleConfig {
    fn default() -> Self {
        CycleConfig { cycle_length: 2, subcycles: true, level_weights: Vec::new(), pixel_sum: false }
    }
}

impl CycleConfig {
    pub fn level_weight(&self, level_index: usize) -> f64 {
        *self.level_weights.get(level_index).unwrap_or(&1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothnessConfig {
    /// Edge sensitivity of the image-gradient weights.
    pub lambda_c: f64,
    /// Multiplier applied when the term joins the full objective.
    pub weight: f64,
}

impl Default for SmoothnessConfig {
    fn default() -> Self {
        SmoothnessConfig { lambda_c: 150.0, weight: 30.0 }
    }
}

/// Diagonal of F * B without forming the product: d(p) = sum_j F(p,j) B(j,p).
/// Pixels with no return path get 0, which the clamped log turns into the
/// maximum penalty.
fn roundtrip_diagonal(tape: &mut Tape, f: &SparseTransition, b: &SparseTransition) -> Tensor {
    assert_eq!((f.h, f.w), (b.h, b.w), "cycle halves must share a grid");
    let n = f.n();
    let mut ef = Vec::new();
    let mut eb = Vec::new();
    let mut rows = Vec::new();
    for p in 0..n {
        for e in f.row_ptr[p]..f.row_ptr[p + 1] {
            let j = f.cols[e];
            let row = &b.cols[b.row_ptr[j]..b.row_ptr[j + 1]];
            if let Ok(off) = row.binary_search(&p) {
                ef.push(e);
                eb.push(b.row_ptr[j] + off);
                rows.push(p);
            }
        }
    }
    let fv = tape.gather(&f.values, &arc_idx(ef));
    let bv = tape.gather(&b.values, &arc_idx(eb));
    let prod = tape.mul(&fv, &bv);
    tape.scatter_add(&prod, &arc_idx(rows), n)
}

/// Negative log likelihood that a walk out along `forward` and back along
/// `backward` returns every pixel to itself. Chains each list, multiplies,
/// and penalizes the log of the round-trip diagonal.
pub fn crw_cycle_loss(
    tape: &mut Tape,
    forward: &[&SparseTransition],
    backward: &[&SparseTransition],
    tcfg: &TransitionConfig,
    ccfg: &CycleConfig,
) -> Tensor {
    assert!(!forward.is_empty(), "cycle needs at least one hop");
    assert_eq!(forward.len(), backward.len(), "cycle halves differ in length");
    let f = chain(tape, forward, tcfg);
    let b = chain(tape, backward, tcfg);
    let d = roundtrip_diagonal(tape, &f, &b);
    let lg = tape.log(&d);
    let s = tape.sum(&lg);
    let scale = if ccfg.pixel_sum { -1.0 } else { -1.0 / f.n() as f64 };
    tape.scale(&s, scale)
}

/// One level's adjacent-frame transitions: forward[i] maps frame i to i+1,
/// backward[i] maps frame i+1 back to frame i.
pub struct LevelTransitions<'a> {
    pub forward: Vec<&'a SparseTransition>,
    pub backward: Vec<&'a SparseTransition>,
}

/// Weighted sum of the cycle loss over pyramid levels.
pub fn multiscale_crw_loss(
    tape: &mut Tape,
    levels: &[LevelTransitions],
    tcfg: &TransitionConfig,
    ccfg: &CycleConfig,
) -> Tensor {
    let mut total: Option<Tensor> = None;
    for (li, lt) in levels.iter().enumerate() {
        let l = crw_cycle_loss(tape, &lt.forward, &lt.backward, tcfg, ccfg);
        let l = tape.scale(&l, ccfg.level_weight(li));
        total = Some(match total {
            None => l,
            Some(t) => tape.add(&t, &l),
        });
    }
    total.expect("multiscale loss over zero levels")
}

/// Cycle losses for walks of every length 2..=k (or k alone when subcycles
/// are off), reusing each level's running forward and backward chains.
pub fn subcycle_losses(
    tape: &mut Tape,
    levels: &[LevelTransitions],
    tcfg: &TransitionConfig,
    ccfg: &CycleConfig,
) -> Tensor {
    let hops = levels[0].forward.len();
    assert!(hops >= 1, "need at least two frames");
    for lt in levels {
        assert_eq!(lt.forward.len(), hops, "levels disagree on frame count");
        assert_eq!(lt.backward.len(), hops, "levels disagree on frame count");
    }
    // Running chains per level: fwd = A_{1,2}...A_{j-1,j}, bwd rebuilds the
    // return trip A_{j,j-1}...A_{2,1} by prepending each new hop.
    let mut fwd: Vec<SparseTransition> = Vec::with_capacity(levels.len());
    let mut bwd: Vec<SparseTransition> = Vec::with_capacity(levels.len());
    let mut total: Option<Tensor> = None;
    for hop in 0..hops {
        for (li, lt) in levels.iter().enumerate() {
            if hop == 0 {
                fwd.push(chain(tape, &[lt.forward[0]], tcfg));
                bwd.push(chain(tape, &[lt.backward[0]], tcfg));
            } else {
                fwd[li] = chain(tape, &[&fwd[li], lt.forward[hop]], tcfg);
                bwd[li] = chain(tape, &[lt.backward[hop], &bwd[li]], tcfg);
            }
        }
        let j = hop + 2;
        if !ccfg.subcycles && j != hops + 1 {
            continue;
        }
        for (li, _) in levels.iter().enumerate() {
            let d = roundtrip_diagonal(tape, &fwd[li], &bwd[li]);
            let lg = tape.log(&d);
            let s = tape.sum(&lg);
            let per = if ccfg.pixel_sum { -1.0 } else { -1.0 / fwd[li].n() as f64 };
            let l = tape.scale(&s, per * ccfg.level_weight(li));
            total = Some(match total {
                None => l,
                Some(t) => tape.add(&t, &l),
            });
        }
    }
    total.expect("no cycle terms emitted")
}

/// Box-averages an image [c, H, W] down to [c, oh, ow]; sizes must divide.
pub fn area_downsample(img: &Array, oh: usize, ow: usize) -> Array {
    let (c, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    assert!(h % oh == 0 && w % ow == 0, "area_downsample needs integer factors ({h}x{w} -> {oh}x{ow})");
    let (fy, fx) = (h / oh, w / ow);
    let inv = 1.0 / (fy * fx) as f64;
    let mut out = Array::zeros(&[c, oh, ow]);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0;
                for dy in 0..fy {
                    for dx in 0..fx {
                        s += img.at3(ch, y * fy + dy, x * fx + dx);
                    }
                }
                out.set3(ch, y, x, s * inv);
            }
        }
    }
    out
}

/// Second differences of a [h*w] plane along one axis. Returns (center,
/// minus, plus) flat indices over the plane; `base` offsets into a packed
/// multi-channel buffer.
fn stencil_indices(h: usize, w: usize, along_x: bool, base: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut c = Vec::new();
    let mut m = Vec::new();
    let mut p = Vec::new();
    if along_x {
        for y in 0..h {
            for x in 1..w.saturating_sub(1) {
                c.push(base + y * w + x);
                m.push(base + y * w + x - 1);
                p.push(base + y * w + x + 1);
            }
        }
    } else {
        for y in 1..h.saturating_sub(1) {
            for x in 0..w {
                c.push(base + y * w + x);
                m.push(base + (y - 1) * w + x);
                p.push(base + (y + 1) * w + x);
            }
        }
    }
    (c, m, p)
}

/// Edge weight per stencil: exp(-lambda_c * mean-channel |central first
/// difference| of the image along the stencil axis).
fn edge_weights(img: &Array, h: usize, w: usize, along_x: bool, lambda_c: f64) -> Vec<f64> {
    let c = img.shape[0];
    let inv_c = 1.0 / c as f64;
    let (centers, _, _) = stencil_indices(h, w, along_x, 0);
    centers
        .iter()
        .map(|&i| {
            let (y, x) = (i / w, i % w);
            let mut g = 0.0;
            for ch in 0..c {
                g += if along_x {
                    (img.at3(ch, y, x + 1) - img.at3(ch, y, x - 1)).abs() / 2.0
                } else {
                    (img.at3(ch, y + 1, x) - img.at3(ch, y - 1, x)).abs() / 2.0
                };
            }
            (-lambda_c * g * inv_c).exp()
        })
        .collect()
}

/// Edge-aware second-order smoothness: per direction, the mean over valid
/// stencils of the weighted L1 norm of the flow's second difference, summed
/// over directions. Unweighted; the objective applies `cfg.weight`.
pub fn smoothness_loss(tape: &mut Tape, flow: &FlowField, image: &Array, cfg: &SmoothnessConfig) -> Tensor {
    assert!(cfg.lambda_c >= 0.0, "edge sensitivity must be nonnegative");
    assert_eq!(&image.shape[1..], &[flow.h, flow.w], "image resolution must match the flow");
    let (h, w) = (flow.h, flow.w);
    let n = h * w;
    let mut total: Option<Tensor> = None;
    for along_x in [true, false] {
        let (c0, m0, p0) = stencil_indices(h, w, along_x, 0);
        if c0.is_empty() {
            continue;
        }
        let count = c0.len();
        let wts = edge_weights(image, h, w, along_x, cfg.lambda_c);
        // Both flow components share the pixel's weight.
        let (c1, m1, p1) = stencil_indices(h, w, along_x, n);
        let cat = |a: &[usize], b: &[usize]| arc_idx(a.iter().chain(b).copied().collect());
        let ctr = tape.gather(&flow.uv, &cat(&c0, &c1));
        let mns = tape.gather(&flow.uv, &cat(&m0, &m1));
        let pls = tape.gather(&flow.uv, &cat(&p0, &p1));
        let ends = tape.add(&mns, &pls);
        let twice = tape.scale(&ctr, 2.0);
        let d2 = tape.sub(&ends, &twice);
        let mag = tape.abs(&d2);
        let wt = tape.input(&Array::from_vec(&[2 * count], wts.repeat(2)));
        let contrib = tape.mul(&mag, &wt);
        let s = tape.sum(&contrib);
        let term = tape.scale(&s, 1.0 / count as f64);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(&t, &term),
        });
    }
    // Grids under 3 pixels a side have no valid stencil and cost nothing.
    total.unwrap_or_else(|| tape.input(&Array::scalar(0.0)))
}

/// The loss terms of one nonparametric training step.
pub struct ObjectiveParts {
    pub crw: Tensor,
    pub smooth: Tensor,
    pub total: Tensor,
}

/// Full nonparametric objective over a frame sequence: encodes every frame,
/// runs coarse-to-fine matching for adjacent pairs in both time directions,
/// and combines subcycle walk losses with per-level flow smoothness.
pub fn nonparametric_objective(
    tape: &mut Tape,
    bound: &BoundParams,
    enc_cfg: &EncoderConfig,
    frames: &[Array],
    tcfg: &TransitionConfig,
    ccfg: &CycleConfig,
    scfg: &SmoothnessConfig,
) -> ObjectiveParts {
    assert!(frames.len() >= 2, "objective needs at least two frames");
    let pyrs: Vec<FeaturePyramid> = frames.iter().map(|f| encode(tape, bound, enc_cfg, f)).collect();
    let pairs = frames.len() - 1;
    let mut flows_fwd = Vec::with_capacity(pairs);
    let mut flows_bwd = Vec::with_capacity(pairs);
    for i in 0..pairs {
        flows_fwd.push(coarse_to_fine(tape, &pyrs[i], &pyrs[i + 1], tcfg));
        flows_bwd.push(coarse_to_fine(tape, &pyrs[i + 1], &pyrs[i], tcfg));
    }

    let levels: Vec<LevelTransitions> = (0..enc_cfg.levels)
        .map(|l| LevelTransitions {
            forward: (0..pairs).map(|i| &flows_fwd[i][l].attention.transition).collect(),
            backward: (0..pairs).map(|i| &flows_bwd[i][l].attention.transition).collect(),
        })
        .collect();
    let crw = subcycle_losses(tape, &levels, tcfg, ccfg);

    // Smoothness of every total flow against its source frame, box-averaged
    // to the level's resolution; summed like the cycle terms. Levels carry
    // the same weights here as in the walk loss, so a zero-weight level
    // contributes nothing to the objective and its embedding head stays at
    // initialization.
    let mut smooth: Option<Tensor> = None;
    for i in 0..pairs {
        for (img, flows) in [(&frames[i], &flows_fwd[i]), (&frames[i + 1], &flows_bwd[i])] {
            for (li, lf) in flows.iter().enumerate() {
                let w = ccfg.level_weight(li);
                if w == 0.0 {
                    continue;
                }
                let small = area_downsample(img, lf.total.h, lf.total.w);
                let s = smoothness_loss(tape, &lf.total, &small, scfg);
                let s = if w == 1.0 { s } else { tape.scale(&s, w) };
                smooth = Some(match smooth {
                    None => s,
                    Some(t) => tape.add(&t, &s),
                });
            }
        }
    }
    let smooth = smooth.expect("no smoothness terms");
    let weighted = tape.scale(&smooth, scfg.weight);
    let total = tape.add(&crw, &weighted);
    ObjectiveParts { crw, smooth, total }
}
