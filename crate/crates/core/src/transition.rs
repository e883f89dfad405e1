//! Space-time pixel transition matrices and coarse-to-fine flow readout.
//!
//! A transition row holds the matching distribution of one source pixel over
//! a local window of target pixels. Windows are anchored at the rounded
//! coarse-flow target q0 = round(p + f(p)), and columns store absolute
//! target indices, so chained products across frames stay well defined and
//! the expected-flow readout needs no residual bookkeeping. An optional
//! bilinear mode instead warps the target features by the coarse flow and
//! anchors windows at p, matching the subpixel formulation at the cost of
//! approximate chaining.

use crate::encoder::FeaturePyramid;
use crate::engine::{arc_idx, Array, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionConfig {
    /// Odd window side length k_w; the window spans (k_w-1)/2 cells around q0.
    pub window: usize,
    /// Softmax temperature over embedding dot products.
    pub temperature: f64,
    /// Entries below this are dropped (rows renormalized) after each
    /// chained product, bounding fill-in.
    pub prune_threshold: f64,
    /// Warp target features by the coarse flow and anchor windows at p
    /// instead of integer-anchoring windows at round(p + f(p)).
    pub bilinear_attention: bool,
}

impl Default for TransitionConfig {
    fn default() -> Self {
        TransitionConfig {
            window: 7,
            temperature: 0.07,
            prune_threshold: 1e-8,
            bilinear_attention: false,
        }
    }
}

impl TransitionConfig {
    pub fn radius(&self) -> usize {
        assert!(self.window % 2 == 1 && self.window >= 1, "window must be odd, got {}", self.window);
        (self.window - 1) / 2
    }
}

/// Dense 2-channel flow field on the tape: plane 0 is the x displacement,
/// plane 1 the y displacement, shape [2, h, w].
#[derive(Clone)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub uv: Tensor,
}

impl FlowField {
    pub fn zeros(tape: &mut Tape, h: usize, w: usize) -> FlowField {
        let uv = tape.input(&Array::zeros(&[2, h, w]));
        FlowField { h, w, uv }
    }

    pub fn from_array(tape: &mut Tape, a: &Array) -> FlowField {
        assert_eq!(a.shape.len(), 3, "flow array must be [2,h,w]");
        assert_eq!(a.shape[0], 2, "flow array must be [2,h,w]");
        FlowField { h: a.shape[1], w: a.shape[2], uv: tape.input(a) }
    }

    /// Copies current values off the tape.
    pub fn to_array(&self, tape: &Tape) -> Array {
        Array::from_vec(&[2, self.h, self.w], tape.val(&self.uv).to_vec())
    }
}

/// Row-stochastic sparse matrix over pixels of an h x w grid. Column indices
/// are absolute pixel indices, sorted within each row; `values` lives on the
/// tape so gradients flow through matching weights.
pub struct SparseTransition {
    pub h: usize,
    pub w: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Tensor,
}

impl SparseTransition {
    pub fn n(&self) -> usize {
        self.h * self.w
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row_entries(&self, r: usize) -> &[usize] {
        &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn identity(tape: &mut Tape, h: usize, w: usize) -> SparseTransition {
        let n = h * w;
        let values = tape.input(&Array::from_vec(&[n], vec![1.0; n]));
        SparseTransition { h, w, row_ptr: (0..=n).collect(), cols: (0..n).collect(), values }
    }

    /// Dense [n, n] copy for oracle comparisons.
    pub fn to_dense(&self, tape: &Tape) -> Array {
        let n = self.n();
        let v = tape.val(&self.values);
        let mut out = Array::zeros(&[n, n]);
        for r in 0..n {
            let row = self.row_ptr[r]..self.row_ptr[r + 1];
            for (&c, &val) in self.cols[row.clone()].iter().zip(&v[row]) {
                out.data[r * n + c] = val;
            }
        }
        out
    }
}

/// Local attention at one level: the row-stochastic transition plus the raw
/// logits and window bookkeeping needed for cost volumes and flow readout.
pub struct LevelAttention {
    pub transition: SparseTransition,
    /// Pre-softmax logits per stored entry, aligned with `transition.cols`.
    pub logits: Tensor,
    pub window: usize,
    /// Window anchor per row (clamped round(p + f(p)); p itself in bilinear mode).
    pub q0: Vec<(i32, i32)>,
    /// Set in bilinear mode: the coarse flow the target features were warped
    /// by, added back during readout.
    pub base: Option<FlowField>,
}

/// Integer coordinate grid as an array: plane 0 holds x, plane 1 holds y.
pub fn coordinate_grid(h: usize, w: usize) -> Array {
    let mut a = Array::zeros(&[2, h, w]);
    for y in 0..h {
        for x in 0..w {
            a.set3(0, y, x, x as f64);
            a.set3(1, y, x, y as f64);
        }
    }
    a
}

/// round(x) as floor(x + 0.5): ties go up, matching the window anchoring rule.
#[inline]
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Samples `map` [c,h,w] at p + flow(p) with bilinear clamp-to-edge.
pub fn warp(tape: &mut Tape, map: &Tensor, flow: &FlowField) -> Tensor {
    assert_eq!(&map.shape[1..], &[flow.h, flow.w], "warp: map {:?} vs flow {}x{}", map.shape, flow.h, flow.w);
    let grid = coordinate_grid(flow.h, flow.w);
    let grid = tape.input(&grid);
    let coords = tape.add(&grid, &flow.uv);
    tape.bilinear_sample(map, &coords)
}

/// Doubles a flow field's resolution bilinearly and scales values by two so
/// displacements stay in pixel units of the finer grid.
pub fn upsample_flow(tape: &mut Tape, flow: &FlowField) -> FlowField {
    let (oh, ow) = (flow.h * 2, flow.w * 2);
    let mut coords = Array::zeros(&[2, oh, ow]);
    for y in 0..oh {
        for x in 0..ow {
            coords.set3(0, y, x, (x as f64 + 0.5) / 2.0 - 0.5);
            coords.set3(1, y, x, (y as f64 + 0.5) / 2.0 - 0.5);
        }
    }
    let coords = tape.input(&coords);
    let sampled = tape.bilinear_sample(&flow.uv, &coords);
    let uv = tape.scale(&sampled, 2.0);
    FlowField { h: oh, w: ow, uv }
}

struct WindowStructure {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    src: Vec<usize>,
    q0: Vec<(i32, i32)>,
}

/// Enumerates in-bounds window entries for every source pixel, anchored at
/// clamp(round(p + coarse(p))). Columns come out sorted within each row.
fn window_structure(h: usize, w: usize, radius: usize, coarse_u: &[f64], coarse_v: &[f64]) -> WindowStructure {
    let n = h * w;
    let r = radius as i64;
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut src = Vec::new();
    let mut q0 = Vec::with_capacity(n);
    row_ptr.push(0);
    for p in 0..n {
        let px = (p % w) as i64;
        let py = (p / w) as i64;
        let qx = round_half_up(px as f64 + coarse_u[p]).clamp(0, w as i64 - 1);
        let qy = round_half_up(py as f64 + coarse_v[p]).clamp(0, h as i64 - 1);
        q0.push((qx as i32, qy as i32));
        for dy in -r..=r {
            let y = qy + dy;
            if y < 0 || y >= h as i64 {
                continue;
            }
            for dx in -r..=r {
                let x = qx + dx;
                if x < 0 || x >= w as i64 {
                    continue;
                }
                cols.push((y * w as i64 + x) as usize);
                src.push(p);
            }
        }
        row_ptr.push(cols.len());
    }
    WindowStructure { row_ptr, cols, src, q0 }
}

/// Builds the masked local-window softmax transition between two embedding
/// maps (rows [n, d], unit norm) on the same grid. `coarse` anchors each
/// row's window; rows renormalize over in-bounds entries only.
pub fn local_attention(
    tape: &mut Tape,
    xs: &Tensor,
    xt: &Tensor,
    coarse: &FlowField,
    cfg: &TransitionConfig,
    h: usize,
    w: usize,
) -> LevelAttention {
    let n = h * w;
    assert_eq!(xs.shape, vec![n, xs.shape[1]], "xs must be [n, d]");
    assert_eq!(xs.shape, xt.shape, "embedding shapes differ: {:?} vs {:?}", xs.shape, xt.shape);
    assert_eq!((coarse.h, coarse.w), (h, w), "coarse flow grid mismatch");
    assert!(cfg.temperature > 0.0, "temperature must be positive");

    let (cu, cv) = {
        let uv = tape.val(&coarse.uv);
        (uv[..n].to_vec(), uv[n..].to_vec())
    };
    let ws = window_structure(h, w, cfg.radius(), &cu, &cv);
    let src_idx = arc_idx(ws.src);
    let col_idx = arc_idx(ws.cols);

    let xs_g = tape.gather_rows(xs, &src_idx);
    let xt_g = tape.gather_rows(xt, &col_idx);
    let prod = tape.mul(&xs_g, &xt_g);
    let dots = tape.sum_last_axis(&prod);
    let logits = tape.scale(&dots, 1.0 / cfg.temperature);

    // Per-row max as a constant shift: softmax is shift invariant, so the
    // recorded gradient stays exact while exp stays in range.
    let mut rowmax = vec![0.0; n];
    {
        let lv = tape.val(&logits);
        for p in 0..n {
            let row = &lv[ws.row_ptr[p]..ws.row_ptr[p + 1]];
            rowmax[p] = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let rowmax = tape.input(&Array::from_vec(&[n], rowmax));
    let shift = tape.gather(&rowmax, &src_idx);
    let shifted = tape.sub(&logits, &shift);
    let ex = tape.exp(&shifted);
    let rowsum = tape.scatter_add(&ex, &src_idx, n);
    let denom = tape.gather(&rowsum, &src_idx);
    let values = tape.div(&ex, &denom);

    LevelAttention {
        transition: SparseTransition { h, w, row_ptr: ws.row_ptr, cols: (*col_idx).clone(), values },
        logits,
        window: cfg.window,
        q0: ws.q0,
        base: None,
    }
}

/// Expected target position minus source position under a transition with
/// absolute columns: output(p) = sum_q A(p,q) D(q) - D(p). This is the total
/// flow at the transition's level.
pub fn expected_flow_of(tape: &mut Tape, a: &SparseTransition) -> FlowField {
    let (h, w, n) = (a.h, a.w, a.n());
    let grid = coordinate_grid(h, w);
    let gx = tape.input(&Array::from_vec(&[n], grid.data[..n].to_vec()));
    let gy = tape.input(&Array::from_vec(&[n], grid.data[n..].to_vec()));

    let rows = {
        let mut v = Vec::with_capacity(a.nnz());
        for r in 0..n {
            for _ in a.row_ptr[r]..a.row_ptr[r + 1] {
                v.push(r);
            }
        }
        arc_idx(v)
    };
    let cols = arc_idx(a.cols.clone());

    let gxc = tape.gather(&gx, &cols);
    let wx = tape.mul(&a.values, &gxc);
    let ex = tape.scatter_add(&wx, &rows, n);
    let u = tape.sub(&ex, &gx);

    let gyc = tape.gather(&gy, &cols);
    let wy = tape.mul(&a.values, &gyc);
    let ey = tape.scatter_add(&wy, &rows, n);
    let v = tape.sub(&ey, &gy);

    let lo = arc_idx((0..n).collect());
    let hi = arc_idx((n..2 * n).collect());
    let pu = tape.scatter_add(&u, &lo, 2 * n);
    let pv = tape.scatter_add(&v, &hi, 2 * n);
    let uv = tape.add(&pu, &pv);
    FlowField { h, w, uv: uv.reshape(&[2, h, w]) }
}

/// Total flow carried by one level's attention, including the warped-feature
/// base flow in bilinear mode.
pub fn expected_flow(tape: &mut Tape, att: &LevelAttention) -> FlowField {
    let f = expected_flow_of(tape, &att.transition);
    match &att.base {
        None => f,
        Some(base) => {
            let uv = tape.add(&f.uv, &base.uv);
            FlowField { h: f.h, w: f.w, uv }
        }
    }
}

/// Raw attention logits laid out as window channels: [k_w^2, h, w], zero at
/// positions outside the grid. Channel order is row-major over the window.
pub fn cost_volume(tape: &mut Tape, att: &LevelAttention) -> Tensor {
    let t = &att.transition;
    let (h, w, n, k) = (t.h, t.w, t.n(), att.window);
    let r = (k - 1) / 2;
    let mut pos = Vec::with_capacity(t.nnz());
    for p in 0..n {
        let (qx, qy) = att.q0[p];
        for e in t.row_ptr[p]..t.row_ptr[p + 1] {
            let c = t.cols[e];
            let cx = (c % w) as i32;
            let cy = (c / w) as i32;
            let slot = ((cy - qy + r as i32) * k as i32 + (cx - qx + r as i32)) as usize;
            debug_assert!(slot < k * k);
            pos.push(p * k * k + slot);
        }
    }
    let padded = tape.scatter_add(&att.logits, &arc_idx(pos), n * k * k);
    let rows = padded.reshape(&[n, k * k]);
    tape.rows_to_chw(&rows, h, w)
}

/// Sparse product of row-stochastic transitions with pruning: entries below
/// the threshold are dropped and remaining rows renormalized.
fn spmm(tape: &mut Tape, a: &SparseTransition, b: &SparseTransition, prune_threshold: f64) -> SparseTransition {
    assert_eq!((a.h, a.w), (b.h, b.w), "chained transitions must share a grid");
    let n = a.n();

    // Structure pass: product support per row, columns sorted.
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols: Vec<usize> = Vec::new();
    let mut trip_out: Vec<usize> = Vec::new();
    let mut trip_a: Vec<usize> = Vec::new();
    let mut trip_b: Vec<usize> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    row_ptr.push(0);
    for i in 0..n {
        let start = cols.len();
        for ea in a.row_ptr[i]..a.row_ptr[i + 1] {
            let j = a.cols[ea];
            for eb in b.row_ptr[j]..b.row_ptr[j + 1] {
                let k = b.cols[eb];
                if slot[k] == usize::MAX {
                    slot[k] = cols.len();
                    cols.push(k);
                }
                trip_out.push(slot[k]);
                trip_a.push(ea);
                trip_b.push(eb);
            }
        }
        // Sort this row's columns and remap the triple targets.
        let mut order: Vec<usize> = (start..cols.len()).collect();
        order.sort_by_key(|&e| cols[e]);
        let mut remap = vec![0usize; order.len()];
        for (new_off, &old_e) in order.iter().enumerate() {
            remap[old_e - start] = start + new_off;
        }
        let sorted_row: Vec<usize> = order.iter().map(|&e| cols[e]).collect();
        cols[start..].copy_from_slice(&sorted_row);
        for t in trip_out.iter_mut().rev() {
            if *t < start {
                break;
            }
            *t = remap[*t - start];
        }
        for &c in &cols[start..] {
            slot[c] = usize::MAX;
        }
        row_ptr.push(cols.len());
    }

    let av = tape.gather(&a.values, &arc_idx(trip_a));
    let bv = tape.gather(&b.values, &arc_idx(trip_b));
    let prod = tape.mul(&av, &bv);
    let raw = tape.scatter_add(&prod, &arc_idx(trip_out), cols.len());

    // Prune small entries, then renormalize each surviving row.
    let keep: Vec<usize> = {
        let rv = tape.val(&raw);
        (0..cols.len()).filter(|&e| rv[e] >= prune_threshold).collect()
    };
    let mut kept_rows = Vec::with_capacity(keep.len());
    let mut kept_cols = Vec::with_capacity(keep.len());
    let mut new_ptr = Vec::with_capacity(n + 1);
    new_ptr.push(0);
    {
        let mut e = 0;
        for i in 0..n {
            while e < keep.len() && keep[e] < row_ptr[i + 1] {
                kept_rows.push(i);
                kept_cols.push(cols[keep[e]]);
                e += 1;
            }
            new_ptr.push(e);
        }
        assert!(
            (0..n).all(|i| new_ptr[i + 1] > new_ptr[i]),
            "pruning emptied a transition row; lower prune_threshold"
        );
    }
    let kept_rows = arc_idx(kept_rows);
    let kept = tape.gather(&raw, &arc_idx(keep));
    let rowsum = tape.scatter_add(&kept, &kept_rows, n);
    let denom = tape.gather(&rowsum, &kept_rows);
    let values = tape.div(&kept, &denom);

    SparseTransition { h: a.h, w: a.w, row_ptr: new_ptr, cols: kept_cols, values }
}

/// Left-to-right product of a transition sequence. A single matrix chains to
/// itself unchanged; longer chains prune and renormalize after each product.
pub fn chain(tape: &mut Tape, mats: &[&SparseTransition], cfg: &TransitionConfig) -> SparseTransition {
    assert!(!mats.is_empty(), "chain of zero transitions");
    let first = mats[0];
    let mut acc = SparseTransition {
        h: first.h,
        w: first.w,
        row_ptr: first.row_ptr.clone(),
        cols: first.cols.clone(),
        values: first.values.clone(),
    };
    for m in &mats[1..] {
        acc = spmm(tape, &acc, m, cfg.prune_threshold);
    }
    acc
}

/// One level of the coarse-to-fine recursion.
pub struct LevelFlow {
    pub attention: LevelAttention,
    /// Total flow at this level's resolution (not the residual).
    pub total: FlowField,
}

/// Runs attention and flow readout at every pyramid level, coarsest first.
/// Each level's window is anchored by the upsampled total flow of the level
/// below; level 1 starts from zero flow.
pub fn coarse_to_fine(
    tape: &mut Tape,
    src: &FeaturePyramid,
    tgt: &FeaturePyramid,
    cfg: &TransitionConfig,
) -> Vec<LevelFlow> {
    assert_eq!(src.levels.len(), tgt.levels.len(), "pyramids differ in depth");
    let mut out: Vec<LevelFlow> = Vec::with_capacity(src.levels.len());
    for (ls, lt) in src.levels.iter().zip(&tgt.levels) {
        assert_eq!((ls.h, ls.w), (lt.h, lt.w), "pyramid level size mismatch");
        let coarse = match out.last() {
            None => FlowField::zeros(tape, ls.h, ls.w),
            Some(prev) => upsample_flow(tape, &prev.total),
        };
        assert_eq!((coarse.h, coarse.w), (ls.h, ls.w), "upsampled flow does not match level size");

        let attention = if cfg.bilinear_attention {
            // Warp target features to the source frame, re-normalize, and
            // anchor windows at p; the coarse flow is added back in readout.
            let xt_chw = tape.rows_to_chw(&lt.embed, lt.h, lt.w);
            let warped = warp(tape, &xt_chw, &coarse);
            let rows = tape.chw_to_rows(&warped);
            let xt = tape.l2_normalize_rows(&rows);
            let zero = FlowField::zeros(tape, ls.h, ls.w);
            let mut att = local_attention(tape, &ls.embed, &xt, &zero, cfg, ls.h, ls.w);
            att.base = Some(coarse.clone());
            att
        } else {
            local_attention(tape, &ls.embed, &lt.embed, &coarse, cfg, ls.h, ls.w)
        };
        let total = expected_flow(tape, &attention);
        out.push(LevelFlow { attention, total });
    }
    out
}
