//! Residual flow regression on top of the nonparametric matcher.
//!
//! The matcher's expected flow is undefined wherever a pixel has no true
//! match (occlusion, frame exit), so a small per-level conv head learns to
//! repair it: it reads the match cost volume, the level's conv features and
//! the matched flow, and emits a residual. All inputs are detached, which
//! keeps the regressor from training the encoder through this path. The
//! head is supervised by feature consistency under warping (gated by a
//! forward-backward visibility mask), agreement with the matched flow where
//! matching is trustworthy, and a cropped-view consistency term that
//! teaches motion leaving the frame.

use crate::encoder::{encode, push_conv, EncoderConfig, FeaturePyramid};
use crate::engine::{arc_idx, Array, BoundParams, ParamSet, Tape, Tensor, LEAKY_SLOPE};
use crate::transition::{
    coarse_to_fine, cost_volume, warp, FlowField, LevelAttention, LevelFlow, TransitionConfig,
};
use crate::walkloss::{
    area_downsample, smoothness_loss, subcycle_losses, CycleConfig, LevelTransitions,
    SmoothnessConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorConfig {
    /// Channels of every hidden conv layer.
    pub hidden_channels: usize,
    /// Number of hidden conv+leaky layers before the 2-channel head.
    pub depth: usize,
    /// Weight of the warped feature consistency term.
    pub feature_weight: f64,
    /// Weight pulling the regressed flow toward the matched flow.
    pub agreement_weight: f64,
    /// Weight of the cropped-view boundary term in the objective.
    pub boundary_weight: f64,
    /// Border width available for training-time crops, pixels.
    pub crop_margin: usize,
    /// Forward-backward visibility: absolute slack of the error bound.
    pub fb_threshold_abs: f64,
    /// Forward-backward visibility: slack relative to the two flow norms.
    pub fb_threshold_rel: f64,
    /// Replace feature consistency with a robust penalty on raw pixels.
    pub charbonnier: bool,
    /// Knee of the robust penalty sqrt(x^2 + eps^2).
    pub charbonnier_eps: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            hidden_channels: 16,
            depth: 5,
            feature_weight: 0.1,
            agreement_weight: 1.0,
            boundary_weight: 1.0,
            crop_margin: 8,
            fb_threshold_abs: 0.05,
            fb_threshold_rel: 0.01,
            charbonnier: false,
            charbonnier_eps: 1e-3,
        }
    }
}

/// Fresh per-level regression heads. Hidden convs start at uniform
/// +-1/sqrt(fan_in); the output head starts at exactly zero so the regressed
/// flow equals the matched flow until training moves it.
pub fn init_regressor(
    enc_cfg: &EncoderConfig,
    tcfg: &TransitionConfig,
    rcfg: &RegressorConfig,
    seed: u64,
) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let hc = rcfg.hidden_channels;
    for level in 1..=enc_cfg.levels {
        let mut cin = tcfg.window * tcfg.window + enc_cfg.conv_channels(level) + 2;
        for i in 1..=rcfg.depth {
            push_conv(&mut params, &mut rng, &format!("reg.l{level}.c{i}"), hc, cin, 3);
            cin = hc;
        }
        params.push(&format!("reg.l{level}.head.w"), Array::zeros(&[2, cin, 3, 3]));
        params.push(&format!("reg.l{level}.head.b"), Array::zeros(&[2]));
    }
    params
}

/// Channel concatenation of [c_i,h,w] maps into one [sum c_i,h,w] map.
pub(crate) fn concat_channels(tape: &mut Tape, parts: &[&Tensor], h: usize, w: usize) -> Tensor {
    let n = h * w;
    let total: usize = parts.iter().map(|p| p.shape[0]).sum();
    let mut out: Option<Tensor> = None;
    let mut off = 0;
    for p in parts {
        assert_eq!(&p.shape[1..], &[h, w], "concat part {:?} does not match {h}x{w}", p.shape);
        let len = p.numel();
        let placed = tape.scatter_add(p, &arc_idx((off..off + len).collect()), total * n);
        out = Some(match out {
            None => placed,
            Some(t) => tape.add(&t, &placed),
        });
        off += len;
    }
    out.expect("concat of zero parts").reshape(&[total, h, w])
}

/// Refines a matched flow with a residual conv head. The cost volume, conv
/// features and matched flow enter detached: this path trains only the
/// regressor. With the head at its zero init the output equals `base`.
pub fn regress_flow(
    tape: &mut Tape,
    reg: &BoundParams,
    level: usize,
    att: &LevelAttention,
    conv_feats: &Tensor,
    base: &FlowField,
    rcfg: &RegressorConfig,
) -> FlowField {
    let (h, w) = (att.transition.h, att.transition.w);
    assert_eq!(&conv_feats.shape[1..], &[h, w], "conv features do not match the attention grid");
    let cv = cost_volume(tape, att);
    let cv = tape.detach(&cv);
    let feats = tape.detach(conv_feats);
    let base_uv = tape.detach(&base.uv);

    let mut x = concat_channels(tape, &[&cv, &feats, &base_uv], h, w);
    let w1 = reg.get(&format!("reg.l{level}.c1.w"));
    assert_eq!(
        w1.shape[1],
        x.shape[0],
        "regressor level {level} expects {} input channels, got {}",
        w1.shape[1],
        x.shape[0]
    );
    for i in 1..=rcfg.depth {
        let wt = reg.get(&format!("reg.l{level}.c{i}.w")).clone();
        let bt = reg.get(&format!("reg.l{level}.c{i}.b")).clone();
        let y = tape.conv2d(&x, &wt, &bt, 1, 1);
        x = tape.leaky_relu(&y, LEAKY_SLOPE);
    }
    let hw = reg.get(&format!("reg.l{level}.head.w")).clone();
    let hb = reg.get(&format!("reg.l{level}.head.b")).clone();
    let res = tape.conv2d(&x, &hw, &hb, 1, 1);
    let uv = tape.add(&base_uv, &res);
    FlowField { h, w, uv }
}

/// Per-pixel visibility from forward-backward consistency. Not on the tape:
/// the mask gates losses as a constant.
pub struct OcclusionMask {
    pub h: usize,
    pub w: usize,
    pub visible: Vec<bool>,
}

impl OcclusionMask {
    pub fn count_visible(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// 0/1 per pixel as a constant tape input.
    pub fn as_input(&self, tape: &mut Tape) -> Tensor {
        let data = self.visible.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        tape.input(&Array::from_vec(&[self.h * self.w], data))
    }
}

/// Bilinear read of one plane with clamp-to-edge, matching the sampling op.
pub(crate) fn sample_plane(data: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
    let bot = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// A pixel is visible when the backward flow sampled at its forward target
/// cancels the forward flow up to an absolute plus relative tolerance.
/// Computed from current values; both flows stay untouched on the tape.
pub fn fb_occlusion_mask(
    tape: &Tape,
    fwd: &FlowField,
    bwd: &FlowField,
    rcfg: &RegressorConfig,
) -> OcclusionMask {
    assert_eq!((fwd.h, fwd.w), (bwd.h, bwd.w), "flow sizes differ");
    let (h, w, n) = (fwd.h, fwd.w, fwd.h * fwd.w);
    let f = tape.val(&fwd.uv).to_vec();
    let b = tape.val(&bwd.uv).to_vec();
    let mut visible = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (fu, fv) = (f[p], f[n + p]);
            let (tx, ty) = (x as f64 + fu, y as f64 + fv);
            let wu = sample_plane(&b[..n], h, w, tx, ty);
            let wv = sample_plane(&b[n..], h, w, tx, ty);
            let err = (fu + wu).powi(2) + (fv + wv).powi(2);
            let bound = rcfg.fb_threshold_abs
                + rcfg.fb_threshold_rel * (fu * fu + fv * fv + wu * wu + wv * wv);
            visible.push(err < bound);
        }
    }
    OcclusionMask { h, w, visible }
}

/// Mean over pixels of the channel-summed penalty map [c,h,w] -> scalar,
/// optionally zeroing masked-out pixels first.
fn masked_pixel_mean(
    tape: &mut Tape,
    per_elem: &Tensor,
    mask: Option<&OcclusionMask>,
    h: usize,
    w: usize,
) -> Tensor {
    let rows = tape.chw_to_rows(per_elem);
    let per_px = tape.sum_last_axis(&rows);
    let gated = match mask {
        None => per_px,
        Some(m) => {
            assert_eq!((m.h, m.w), (h, w), "mask does not match the flow grid");
            let m01 = m.as_input(tape);
            tape.mul(&per_px, &m01)
        }
    };
    tape.mean(&gated)
}

/// Supervises a regressed flow against frozen evidence: feature maps must
/// agree under warping by the flow (squared by default, a robust
/// sqrt(d^2+eps^2) on raw pixels in Charbonnier mode) and the flow must stay
/// near the matched flow `guide`. Every input except the flow is detached,
/// so gradients reach only the regressor. The visibility mask gates the
/// warping term alone; disagreement with `guide` is charged everywhere.
pub fn photo_crw_loss(
    tape: &mut Tape,
    feat_src: &Tensor,
    feat_tgt: &Tensor,
    flow: &FlowField,
    guide: &FlowField,
    mask: Option<&OcclusionMask>,
    rcfg: &RegressorConfig,
) -> Tensor {
    let (h, w) = (flow.h, flow.w);
    assert_eq!(&feat_src.shape[1..], &[h, w], "source features do not match the flow grid");
    assert_eq!(feat_src.shape, feat_tgt.shape, "feature map shapes differ");

    let fs = tape.detach(feat_src);
    let ft = tape.detach(feat_tgt);
    let warped = warp(tape, &ft, flow);
    let diff = tape.sub(&fs, &warped);
    let per_elem = if rcfg.charbonnier {
        let sq = tape.square(&diff);
        let shifted = tape.add_scalar(&sq, rcfg.charbonnier_eps * rcfg.charbonnier_eps);
        let lg = tape.log(&shifted);
        let half = tape.scale(&lg, 0.5);
        tape.exp(&half)
    } else {
        tape.square(&diff)
    };
    let feature = masked_pixel_mean(tape, &per_elem, mask, h, w);

    let g = tape.detach(&guide.uv);
    let dev = tape.sub(&flow.uv, &g);
    let dev2 = tape.square(&dev);
    let agree = masked_pixel_mean(tape, &dev2, None, h, w);

    let fw = tape.scale(&feature, rcfg.feature_weight);
    let aw = tape.scale(&agree, rcfg.agreement_weight);
    tape.add(&fw, &aw)
}

/// Consistency between a flow computed on the full grid and one computed on
/// a crop of it, compared over the crop and restricted to pixels whose
/// full-grid match lands outside the crop footprint. Those are exactly the
/// pixels the cropped matcher cannot resolve, so the full-grid flow acts as
/// a frozen teacher there. `x0`, `y0` place the crop inside the full grid,
/// in the grid units shared by both fields. No qualifying pixels cost 0.
pub fn boundary_loss(
    tape: &mut Tape,
    full: &FlowField,
    cropped: &FlowField,
    x0: usize,
    y0: usize,
) -> Tensor {
    let (ch, cw) = (cropped.h, cropped.w);
    let (fh, fw) = (full.h, full.w);
    assert!(x0 + cw <= fw && y0 + ch <= fh, "crop {cw}x{ch}+{x0}+{y0} exceeds full grid {fw}x{fh}");

    let vals = tape.val(&full.uv).to_vec();
    let n_full = fh * fw;
    let (lo_x, hi_x) = (x0 as f64 - 0.5, (x0 + cw) as f64 - 0.5);
    let (lo_y, hi_y) = (y0 as f64 - 0.5, (y0 + ch) as f64 - 0.5);
    let mut exits = Vec::new();
    for y in 0..ch {
        for x in 0..cw {
            let g = (y + y0) * fw + (x + x0);
            let tx = (x + x0) as f64 + vals[g];
            let ty = (y + y0) as f64 + vals[n_full + g];
            if tx < lo_x || tx >= hi_x || ty < lo_y || ty >= hi_y {
                exits.push(y * cw + x);
            }
        }
    }
    if exits.is_empty() {
        return tape.input(&Array::scalar(0.0));
    }

    let mut region = Vec::with_capacity(2 * ch * cw);
    for comp in 0..2 {
        for y in 0..ch {
            for x in 0..cw {
                region.push(comp * n_full + (y + y0) * fw + (x + x0));
            }
        }
    }
    let teacher = tape.gather(&full.uv, &arc_idx(region));
    let teacher = tape.detach(&teacher).reshape(&[2, ch, cw]);
    let d = tape.sub(&cropped.uv, &teacher);
    let sq = tape.square(&d);
    let rows = tape.chw_to_rows(&sq);
    let per_px = tape.sum_last_axis(&rows);
    let sel = tape.gather(&per_px, &arc_idx(exits));
    tape.mean(&sel)
}

/// Axis-aligned crop in input-image pixels. The size must keep the crop
/// encodable (divisible by 2^levels) and the origin must be even so the
/// crop's flow grid aligns with the full one.
#[derive(Clone, Copy, Debug)]
pub struct CropSpec {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

pub(crate) fn crop_image(img: &Array, c: &CropSpec) -> Array {
    let (ch, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    assert!(c.x0 + c.w <= w && c.y0 + c.h <= h, "crop exceeds the image");
    let mut data = Vec::with_capacity(ch * c.h * c.w);
    for ci in 0..ch {
        for y in c.y0..c.y0 + c.h {
            let row = ci * h * w + y * w;
            data.extend_from_slice(&img.data[row + c.x0..row + c.x0 + c.w]);
        }
    }
    Array::from_vec(&[ch, c.h, c.w], data)
}

pub struct RegressionParts {
    pub crw: Tensor,
    pub smooth: Tensor,
    pub photo: Tensor,
    pub boundary: Tensor,
    pub total: Tensor,
}

fn add_opt(tape: &mut Tape, acc: Option<Tensor>, t: Tensor) -> Option<Tensor> {
    Some(match acc {
        None => t,
        Some(a) => tape.add(&a, &t),
    })
}

/// Full training objective with the regressor in the loop: cycle walk loss,
/// smoothness of matched and regressed flows, warped consistency with
/// visibility gating, and (when a crop is given) boundary supervision of the
/// finest regressed flow from a second pass on cropped frames.
#[allow(clippy::too_many_arguments)]
pub fn regression_objective(
    tape: &mut Tape,
    enc: &BoundParams,
    reg: &BoundParams,
    enc_cfg: &EncoderConfig,
    frames: &[Array],
    crop: Option<&CropSpec>,
    tcfg: &TransitionConfig,
    ccfg: &CycleConfig,
    scfg: &SmoothnessConfig,
    rcfg: &RegressorConfig,
) -> RegressionParts {
    assert!(frames.len() >= 2, "objective needs at least two frames");
    let pyrs: Vec<FeaturePyramid> =
        frames.iter().map(|f| encode(tape, enc, enc_cfg, f)).collect();
    let pairs = frames.len() - 1;
    let nl = enc_cfg.levels;

    let mut flows_fwd = Vec::with_capacity(pairs);
    let mut flows_bwd = Vec::with_capacity(pairs);
    for i in 0..pairs {
        flows_fwd.push(coarse_to_fine(tape, &pyrs[i], &pyrs[i + 1], tcfg));
        flows_bwd.push(coarse_to_fine(tape, &pyrs[i + 1], &pyrs[i], tcfg));
    }

    let levels: Vec<LevelTransitions> = (0..nl)
        .map(|l| LevelTransitions {
            forward: (0..pairs).map(|i| &flows_fwd[i][l].attention.transition).collect(),
            backward: (0..pairs).map(|i| &flows_bwd[i][l].attention.transition).collect(),
        })
        .collect();
    let crw = subcycle_losses(tape, &levels, tcfg, ccfg);

    let refine = |tape: &mut Tape, src: usize, lf: &LevelFlow, level: usize| {
        regress_flow(tape, reg, level, &lf.attention, &pyrs[src].levels[level - 1].conv, &lf.total, rcfg)
    };
    let mut reg_fwd: Vec<Vec<FlowField>> = Vec::with_capacity(pairs);
    let mut reg_bwd: Vec<Vec<FlowField>> = Vec::with_capacity(pairs);
    for i in 0..pairs {
        reg_fwd.push((0..nl).map(|l| refine(tape, i, &flows_fwd[i][l], l + 1)).collect());
        reg_bwd.push((0..nl).map(|l| refine(tape, i + 1, &flows_bwd[i][l], l + 1)).collect());
    }

    // Smoothness charges the matched and the regressed flow alike, each
    // against its source frame at level resolution.
    let mut smooth: Option<Tensor> = None;
    for i in 0..pairs {
        for (src, flows, refined) in
            [(i, &flows_fwd[i], &reg_fwd[i]), (i + 1, &flows_bwd[i], &reg_bwd[i])]
        {
            for l in 0..nl {
                let small = area_downsample(&frames[src], flows[l].total.h, flows[l].total.w);
                let s = smoothness_loss(tape, &flows[l].total, &small, scfg);
                smooth = add_opt(tape, smooth, s);
                let s = smoothness_loss(tape, &refined[l], &small, scfg);
                smooth = add_opt(tape, smooth, s);
            }
        }
    }
    let smooth = smooth.expect("no smoothness terms");

    let mut photo: Option<Tensor> = None;
    for i in 0..pairs {
        for l in 0..nl {
            let mask_f = fb_occlusion_mask(tape, &reg_fwd[i][l], &reg_bwd[i][l], rcfg);
            let mask_b = fb_occlusion_mask(tape, &reg_bwd[i][l], &reg_fwd[i][l], rcfg);
            let (lh, lw) = (flows_fwd[i][l].total.h, flows_fwd[i][l].total.w);
            let feat = |tape: &mut Tape, frame: usize| {
                if rcfg.charbonnier {
                    let img = area_downsample(&frames[frame], lh, lw);
                    tape.input(&img)
                } else {
                    let e = pyrs[frame].levels[l].embed.clone();
                    tape.rows_to_chw(&e, lh, lw)
                }
            };
            let (src_map, tgt_map) = (feat(tape, i), feat(tape, i + 1));
            let pf = photo_crw_loss(
                tape, &src_map, &tgt_map, &reg_fwd[i][l], &flows_fwd[i][l].total, Some(&mask_f), rcfg,
            );
            photo = add_opt(tape, photo, pf);
            let pb = photo_crw_loss(
                tape, &tgt_map, &src_map, &reg_bwd[i][l], &flows_bwd[i][l].total, Some(&mask_b), rcfg,
            );
            photo = add_opt(tape, photo, pb);
        }
    }
    let photo = photo.expect("no photo terms");

    let boundary = match crop {
        None => tape.input(&Array::scalar(0.0)),
        Some(c) => {
            let div = 1usize << enc_cfg.levels;
            assert!(c.w % div == 0 && c.h % div == 0, "crop size must be divisible by 2^levels");
            assert!(c.x0 % 2 == 0 && c.y0 % 2 == 0, "crop origin must be even");
            let cropped: Vec<Array> = frames.iter().map(|f| crop_image(f, c)).collect();
            let cpyrs: Vec<FeaturePyramid> =
                cropped.iter().map(|f| encode(tape, enc, enc_cfg, f)).collect();
            let mut b: Option<Tensor> = None;
            for i in 0..pairs {
                let cf = coarse_to_fine(tape, &cpyrs[i], &cpyrs[i + 1], tcfg);
                let cb = coarse_to_fine(tape, &cpyrs[i + 1], &cpyrs[i], tcfg);
                for (src, lf, full) in
                    [(i, &cf[nl - 1], &reg_fwd[i][nl - 1]), (i + 1, &cb[nl - 1], &reg_bwd[i][nl - 1])]
                {
                    let crop_flow = regress_flow(
                        tape, reg, nl, &lf.attention, &cpyrs[src].levels[nl - 1].conv, &lf.total, rcfg,
                    );
                    let term = boundary_loss(tape, full, &crop_flow, c.x0 / 2, c.y0 / 2);
                    b = add_opt(tape, b, term);
                }
            }
            b.expect("no boundary terms")
        }
    };

    let ws = tape.scale(&smooth, scfg.weight);
    let wb = tape.scale(&boundary, rcfg.boundary_weight);
    let t1 = tape.add(&crw, &ws);
    let t2 = tape.add(&t1, &photo);
    let total = tape.add(&t2, &wb);
    RegressionParts { crw, smooth, photo, boundary, total }
}

#[cfg(test)]
mod tests;
