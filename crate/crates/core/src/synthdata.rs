//! Synthetic frame sequences with exact motion ground truth, photometric
//! jitter for training robustness, and flow and keypoint metrics.
//!
//! Textures are continuous functions over the plane (random sinusoids plus
//! wrap-tiled smoothed noise), so a frame at time j is the same function
//! sampled at coordinates shifted by j times the velocity. Integer motions
//! therefore reproduce bit-exactly under backward warping, and every
//! generator is a pure function of its seed.

use crate::config::{DataSettings, DataSource, ModelKind, RunConfig, SceneKind};
use crate::engine::{Array, ParamSet};
use crate::train::{init_model, predict_flow, train_curriculum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Keypoints sampled per generated sequence.
pub const KEYPOINTS_PER_SEQUENCE: usize = 8;

/// Default keypoint-accuracy radii in pixels.
pub const PCK_THRESHOLDS: [f64; 3] = [2.0, 4.0, 8.0];

/// Frames with the motion that produced them. `gt_flows[i]` maps frame i
/// pixels to their frame i+1 positions (plane 0 = x displacement); a true
/// entry in `occlusion_masks[i]` marks a frame-i pixel with no visible
/// counterpart in frame i+1 (covered or out of frame).
pub struct SyntheticSequence {
    pub frames: Vec<Array>,
    pub gt_flows: Vec<Array>,
    pub occlusion_masks: Vec<Vec<bool>>,
    /// keypoint_tracks[frame][k] is keypoint k's position (x, y).
    pub keypoint_tracks: Vec<Vec<(f64, f64)>>,
    pub seed: u64,
}

impl SyntheticSequence {
    pub fn size(&self) -> (usize, usize) {
        (self.frames[0].shape[1], self.frames[0].shape[2])
    }

    /// Asserts that warping frame i+1 by gt_flow i reproduces frame i on
    /// every visible pixel within `tol` (integer motions reproduce exactly).
    pub fn check_consistency(&self, tol: f64) {
        let (c, n) = (self.frames[0].shape[0], self.frames[0].shape[1] * self.frames[0].shape[2]);
        for i in 0..self.gt_flows.len() {
            let warped = backward_warp(&self.frames[i + 1], &self.gt_flows[i]);
            for p in 0..n {
                if self.occlusion_masks[i][p] {
                    continue;
                }
                for ch in 0..c {
                    let a = self.frames[i].data[ch * n + p];
                    let b = warped.data[ch * n + p];
                    assert!(
                        (a - b).abs() <= tol,
                        "pair {i} pixel {p} channel {ch}: {a} vs warped {b}"
                    );
                }
            }
        }
    }
}

struct Texture {
    /// Per channel: (amplitude, x frequency, y frequency, phase).
    waves: Vec<Vec<(f64, f64, f64, f64)>>,
    /// Per channel wrap-tiled noise grid, `noise_cells` a side.
    noise: Vec<Vec<f64>>,
    noise_cells: usize,
    noise_spacing: f64,
    noise_amp: f64,
    /// Per channel 1 / (sum of amplitudes + noise amplitude); bounds every
    /// sample into [-1, 1] independently of where the texture is evaluated.
    inv_bound: Vec<f64>,
}

const TEXTURE_WAVES: usize = 6;
const NOISE_CELLS: usize = 32;

impl Texture {
    fn new(rng: &mut ChaCha8Rng, channels: usize, scale: f64) -> Texture {
        assert!(scale >= 2.0, "texture scale under 2 aliases the finest waves");
        let mut waves = Vec::with_capacity(channels);
        let mut noise = Vec::with_capacity(channels);
        let mut inv_bound = Vec::with_capacity(channels);
        let noise_amp = 0.5;
        for _ in 0..channels {
            let mut ws = Vec::with_capacity(TEXTURE_WAVES);
            let mut amp_sum = 0.0;
            for _ in 0..TEXTURE_WAVES {
                let amp = rng.gen_range(0.5..1.0);
                let freq = rng.gen_range(1.0 / (4.0 * scale)..1.0 / scale);
                let dir = rng.gen_range(0.0..std::f64::consts::TAU);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                ws.push((amp, freq * dir.cos(), freq * dir.sin(), phase));
                amp_sum += amp;
            }
            waves.push(ws);
            noise.push((0..NOISE_CELLS * NOISE_CELLS).map(|_| rng.gen_range(-1.0..1.0)).collect());
            inv_bound.push(1.0 / (amp_sum + noise_amp));
        }
        Texture {
            waves,
            noise,
            noise_cells: NOISE_CELLS,
            noise_spacing: 2.0 * scale,
            noise_amp,
            inv_bound,
        }
    }

    fn channels(&self) -> usize {
        self.waves.len()
    }

    fn eval(&self, ch: usize, x: f64, y: f64) -> f64 {
        let mut s = 0.0;
        for &(amp, fx, fy, phase) in &self.waves[ch] {
            s += amp * (std::f64::consts::TAU * (fx * x + fy * y) + phase).sin();
        }
        let g = self.noise_cells as i64;
        let u = x / self.noise_spacing;
        let v = y / self.noise_spacing;
        let (u0, v0) = (u.floor(), v.floor());
        let (du, dv) = (u - u0, v - v0);
        let ix = (u0 as i64).rem_euclid(g) as usize;
        let iy = (v0 as i64).rem_euclid(g) as usize;
        let ix1 = (ix + 1) % self.noise_cells;
        let iy1 = (iy + 1) % self.noise_cells;
        let grid = &self.noise[ch];
        let n00 = grid[iy * self.noise_cells + ix];
        let n01 = grid[iy * self.noise_cells + ix1];
        let n10 = grid[iy1 * self.noise_cells + ix];
        let n11 = grid[iy1 * self.noise_cells + ix1];
        let top = n00 * (1.0 - du) + n01 * du;
        let bot = n10 * (1.0 - du) + n11 * du;
        let noise = top * (1.0 - dv) + bot * dv;
        (s + self.noise_amp * noise) * self.inv_bound[ch]
    }
}

fn constant_flow(h: usize, w: usize, dx: f64, dy: f64) -> Array {
    let n = h * w;
    let mut data = vec![dx; n];
    data.extend(std::iter::repeat_n(dy, n));
    Array::from_vec(&[2, h, w], data)
}

/// Uniform draw from a per-axis safe interval keeping `start + i * vel`
/// inside [0, limit-1] for every frame index i in 0..k.
fn safe_start(rng: &mut ChaCha8Rng, limit: usize, vel: i64, k: usize) -> f64 {
    let travel = (k as i64 - 1) * vel;
    let lo = (-travel).max(0) as f64;
    let hi = (limit as i64 - 1 - travel.max(0)) as f64;
    assert!(lo <= hi, "motion {vel} over {k} frames leaves no room in {limit} pixels");
    rng.gen_range(lo..=hi)
}

/// Textured plane translated by a fixed integer vector per frame step:
/// frame j samples the texture at coordinates minus j * shift. Out-of-frame
/// targets are the only occlusions. Keypoints ride the same motion inside a
/// margin that keeps them in view for the whole sequence.
pub fn translation_sequence_with_shift(
    seed: u64,
    size: usize,
    k: usize,
    texture_scale: f64,
    shift: (i64, i64),
) -> SyntheticSequence {
    assert!(k >= 2, "a sequence needs at least two frames");
    assert!(size >= 8, "frames under 8 pixels have no texture to match");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = Texture::new(&mut rng, 3, texture_scale);
    let (dx, dy) = shift;
    let n = size * size;

    let mut frames = Vec::with_capacity(k);
    for j in 0..k as i64 {
        let mut data = Vec::with_capacity(3 * n);
        for ch in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    data.push(tex.eval(ch, x as f64 - (j * dx) as f64, y as f64 - (j * dy) as f64));
                }
            }
        }
        frames.push(Array::from_vec(&[3, size, size], data));
    }

    let flow = constant_flow(size, size, dx as f64, dy as f64);
    let mut occ = vec![false; n];
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            let (tx, ty) = (x + dx, y + dy);
            if tx < 0 || ty < 0 || tx >= size as i64 || ty >= size as i64 {
                occ[(y * size as i64 + x) as usize] = true;
            }
        }
    }
    let gt_flows = vec![flow; k - 1];
    let occlusion_masks = vec![occ; k - 1];

    let mut base = Vec::with_capacity(KEYPOINTS_PER_SEQUENCE);
    for _ in 0..KEYPOINTS_PER_SEQUENCE {
        let x = safe_start(&mut rng, size, dx, k);
        let y = safe_start(&mut rng, size, dy, k);
        base.push((x, y));
    }
    let keypoint_tracks = (0..k as i64)
        .map(|j| base.iter().map(|&(x, y)| (x + (j * dx) as f64, y + (j * dy) as f64)).collect())
        .collect();

    SyntheticSequence { frames, gt_flows, occlusion_masks, keypoint_tracks, seed }
}

/// Translation sequence with the shift vector itself drawn from the seed,
/// each component uniform over the integers in [-max_shift, max_shift].
/// Callers pairing this with a matcher should keep max_shift within the
/// motion the matcher's coarsest window can reach.
pub fn generate_translation_sequence(
    seed: u64,
    size: usize,
    max_shift: usize,
    k: usize,
    texture_scale: f64,
) -> SyntheticSequence {
    let m = max_shift as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6e64_5f73_6869);
    let shift = (rng.gen_range(-m..=m), rng.gen_range(-m..=m));
    translation_sequence_with_shift(seed, size, k, texture_scale, shift)
}

fn in_square(x: i64, y: i64, x0: i64, y0: i64, side: i64) -> bool {
    x >= x0 && x < x0 + side && y >= y0 && y < y0 + side
}

/// Textured background and an independently textured foreground square, each
/// translating by its own integer velocity. A background pixel whose target
/// lands under the square in the next frame is occluded, as is anything whose
/// target leaves the frame; flow is defined everywhere (foreground velocity
/// under the square, background velocity elsewhere).
pub fn occlusion_sequence_with_motion(
    seed: u64,
    size: usize,
    k: usize,
    bg_vel: (i64, i64),
    fg_vel: (i64, i64),
) -> SyntheticSequence {
    assert!(size >= 32, "occlusion scenes need at least 32 pixels a side");
    assert!(k >= 2, "a sequence needs at least two frames");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = Texture::new(&mut rng, 3, 4.0);
    let fg = Texture::new(&mut rng, 3, 3.0);
    let side = (size / 4) as i64;
    let fx0 = safe_start(&mut rng, size - side as usize + 1, fg_vel.0, k).floor() as i64;
    let fy0 = safe_start(&mut rng, size - side as usize + 1, fg_vel.1, k).floor() as i64;
    build_occlusion_sequence(seed, size, k, bg_vel, fg_vel, (fx0, fy0), side, &bg, &fg, &mut rng)
}

/// Occlusion scene with all motion drawn from the seed: background velocity
/// within one pixel per axis, foreground within two and never equal to the
/// background.
pub fn generate_occlusion_sequence(seed: u64, size: usize, k: usize) -> SyntheticSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f63_636c_7573_696f);
    let bg_vel = (rng.gen_range(-1..=1), rng.gen_range(-1..=1));
    let fg_vel = loop {
        let v = (rng.gen_range(-2..=2), rng.gen_range(-2..=2));
        if v != bg_vel {
            break v;
        }
    };
    occlusion_sequence_with_motion(seed, size, k, bg_vel, fg_vel)
}

#[allow(clippy::too_many_arguments)]
fn build_occlusion_sequence(
    seed: u64,
    size: usize,
    k: usize,
    bg_vel: (i64, i64),
    fg_vel: (i64, i64),
    fg_origin: (i64, i64),
    side: i64,
    bg: &Texture,
    fg: &Texture,
    rng: &mut ChaCha8Rng,
) -> SyntheticSequence {
    let n = size * size;
    let (fx0, fy0) = fg_origin;
    let square_at = |j: i64| (fx0 + j * fg_vel.0, fy0 + j * fg_vel.1);

    let mut frames = Vec::with_capacity(k);
    for j in 0..k as i64 {
        let (sx, sy) = square_at(j);
        let mut data = Vec::with_capacity(3 * n);
        for ch in 0..bg.channels() {
            for y in 0..size as i64 {
                for x in 0..size as i64 {
                    data.push(if in_square(x, y, sx, sy, side) {
                        fg.eval(ch, (x - j * fg_vel.0) as f64, (y - j * fg_vel.1) as f64)
                    } else {
                        bg.eval(ch, (x - j * bg_vel.0) as f64, (y - j * bg_vel.1) as f64)
                    });
                }
            }
        }
        frames.push(Array::from_vec(&[3, size, size], data));
    }

    let mut gt_flows = Vec::with_capacity(k - 1);
    let mut occlusion_masks = Vec::with_capacity(k - 1);
    for j in 0..(k - 1) as i64 {
        let (sx, sy) = square_at(j);
        let (tx0, ty0) = square_at(j + 1);
        let mut flow = Array::zeros(&[2, size, size]);
        let mut occ = vec![false; n];
        for y in 0..size as i64 {
            for x in 0..size as i64 {
                let p = (y * size as i64 + x) as usize;
                let on_fg = in_square(x, y, sx, sy, side);
                let (vx, vy) = if on_fg { fg_vel } else { bg_vel };
                flow.data[p] = vx as f64;
                flow.data[n + p] = vy as f64;
                let (tx, ty) = (x + vx, y + vy);
                let exits = tx < 0 || ty < 0 || tx >= size as i64 || ty >= size as i64;
                let covered = !on_fg && in_square(tx, ty, tx0, ty0, side);
                occ[p] = exits || covered;
            }
        }
        gt_flows.push(flow);
        occlusion_masks.push(occ);
    }

    // Half the keypoints ride the background (starting uncovered), half the
    // square; every track stays in frame for the whole sequence.
    let mut base = Vec::with_capacity(KEYPOINTS_PER_SEQUENCE);
    let mut vels = Vec::with_capacity(KEYPOINTS_PER_SEQUENCE);
    for _ in 0..KEYPOINTS_PER_SEQUENCE / 2 {
        let mut tries = 0;
        let (x, y) = loop {
            let x = safe_start(rng, size, bg_vel.0, k);
            let y = safe_start(rng, size, bg_vel.1, k);
            if !in_square(x.round() as i64, y.round() as i64, fx0, fy0, side) {
                break (x, y);
            }
            tries += 1;
            assert!(tries < 100, "no uncovered background left for keypoints");
        };
        base.push((x, y));
        vels.push(bg_vel);
    }
    for _ in 0..KEYPOINTS_PER_SEQUENCE - KEYPOINTS_PER_SEQUENCE / 2 {
        let x = rng.gen_range(fx0 as f64..=(fx0 + side - 1) as f64);
        let y = rng.gen_range(fy0 as f64..=(fy0 + side - 1) as f64);
        base.push((x, y));
        vels.push(fg_vel);
    }
    let keypoint_tracks = (0..k as i64)
        .map(|j| {
            base.iter()
                .zip(&vels)
                .map(|(&(x, y), &(vx, vy))| (x + (j * vx) as f64, y + (j * vy) as f64))
                .collect()
        })
        .collect();

    SyntheticSequence { frames, gt_flows, occlusion_masks, keypoint_tracks, seed }
}

/// Samples `img` [c,h,w] at each pixel plus its flow vector, bilinear with
/// clamp-to-edge, mirroring the differentiable warp's semantics on values.
pub fn backward_warp(img: &Array, flow: &Array) -> Array {
    assert_eq!(img.shape.len(), 3, "image must be [c,h,w]");
    assert_eq!(flow.shape, vec![2, img.shape[1], img.shape[2]], "flow must be [2,h,w] on the image grid");
    let (c, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    let n = h * w;
    let mut out = Array::zeros(&[c, h, w]);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sx = x as f64 + flow.data[p];
            let sy = y as f64 + flow.data[n + p];
            for ch in 0..c {
                let plane = &img.data[ch * n..(ch + 1) * n];
                out.data[ch * n + p] = crate::regressor::sample_plane(plane, h, w, sx, sy);
            }
        }
    }
    out
}

/// Applies explicit photometric factors: `factors[i]` = (brightness, hue
/// turns) for frame i+1; the first frame always passes through untouched.
/// Brightness multiplies values directly and re-clamps to [-1, 1]; hue
/// rotates RGB about the gray axis by the given fraction of a full turn.
pub fn jitter_with(frames: &[Array], factors: &[(f64, f64)]) -> Vec<Array> {
    assert_eq!(factors.len() + 1, frames.len(), "one factor pair per frame after the first");
    let mut out = Vec::with_capacity(frames.len());
    out.push(frames[0].clone());
    for (frame, &(bright, hue_turns)) in frames[1..].iter().zip(factors) {
        assert!(bright >= 0.0, "brightness factor must be nonnegative");
        let mut data: Vec<f64> = frame.data.iter().map(|v| (v * bright).clamp(-1.0, 1.0)).collect();
        if hue_turns != 0.0 {
            assert_eq!(frame.shape[0], 3, "hue rotation needs rgb frames, got {} channels", frame.shape[0]);
            let n = frame.shape[1] * frame.shape[2];
            let theta = std::f64::consts::TAU * hue_turns;
            let (cos, sin) = (theta.cos(), theta.sin());
            let cross = sin / 3f64.sqrt();
            for p in 0..n {
                let (r, g, b) = (data[p], data[n + p], data[2 * n + p]);
                let mean = (r + g + b) / 3.0;
                let lift = mean * (1.0 - cos);
                data[p] = (r * cos + cross * (b - g) + lift).clamp(-1.0, 1.0);
                data[n + p] = (g * cos + cross * (r - b) + lift).clamp(-1.0, 1.0);
                data[2 * n + p] = (b * cos + cross * (g - r) + lift).clamp(-1.0, 1.0);
            }
        }
        out.push(Array::from_vec(&frame.shape, data));
    }
    out
}

/// Randomized photometric jitter: every frame after the first gets its own
/// brightness factor in [1-brightness_max, 1+brightness_max] and hue
/// rotation in [-hue_max, hue_max] turns.
pub fn jitter(frames: &[Array], brightness_max: f64, hue_max: f64, seed: u64) -> Vec<Array> {
    assert!((0.0..=1.0).contains(&brightness_max), "brightness bound must lie in [0, 1]");
    assert!((0.0..=0.5).contains(&hue_max), "hue bound must lie in [0, 0.5] turns");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors: Vec<(f64, f64)> = (1..frames.len())
        .map(|_| {
            (
                rng.gen_range(1.0 - brightness_max..=1.0 + brightness_max),
                rng.gen_range(-hue_max..=hue_max),
            )
        })
        .collect();
    jitter_with(frames, &factors)
}

fn endpoint_errors(pred: &Array, gt: &Array) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(pred.shape, gt.shape, "flow shapes differ: {:?} vs {:?}", pred.shape, gt.shape);
    assert_eq!(pred.shape[0], 2, "flows must be [2,h,w]");
    let n = pred.shape[1] * pred.shape[2];
    let mut err = Vec::with_capacity(n);
    let mut mag = Vec::with_capacity(n);
    for p in 0..n {
        let du = pred.data[p] - gt.data[p];
        let dv = pred.data[n + p] - gt.data[n + p];
        err.push((du * du + dv * dv).sqrt());
        mag.push((gt.data[p] * gt.data[p] + gt.data[n + p] * gt.data[n + p]).sqrt());
    }
    (err, mag)
}

fn masked_count(mask: &[bool], n: usize) -> usize {
    assert_eq!(mask.len(), n, "mask length {} does not cover {n} pixels", mask.len());
    let count = mask.iter().filter(|&&m| m).count();
    assert!(count > 0, "metric over an empty mask");
    count
}

/// Mean endpoint error in pixels over mask-true pixels.
pub fn epe(pred: &Array, gt: &Array, mask: &[bool]) -> f64 {
    let (err, _) = endpoint_errors(pred, gt);
    let count = masked_count(mask, err.len());
    err.iter().zip(mask).filter(|(_, &m)| m).map(|(e, _)| e).sum::<f64>() / count as f64
}

/// Fraction of mask-true pixels whose endpoint error exceeds both 3 pixels
/// and 5 percent of the true motion magnitude.
pub fn error_rate(pred: &Array, gt: &Array, mask: &[bool]) -> f64 {
    let (err, mag) = endpoint_errors(pred, gt);
    let count = masked_count(mask, err.len());
    let bad = err
        .iter()
        .zip(&mag)
        .zip(mask)
        .filter(|((e, m), &keep)| keep && **e > 3.0 && **e > 0.05 * **m)
        .count();
    bad as f64 / count as f64
}

/// Fraction of keypoints predicted within each radius of the truth; a
/// missing prediction counts as a miss at every radius.
pub fn pck(pred: &[Option<(f64, f64)>], gt: &[(f64, f64)], thresholds: &[f64]) -> Vec<f64> {
    assert_eq!(pred.len(), gt.len(), "prediction and truth keypoint counts differ");
    assert!(!gt.is_empty(), "keypoint accuracy over an empty set");
    thresholds
        .iter()
        .map(|&t| {
            let hits = pred
                .iter()
                .zip(gt)
                .filter(|(p, &(gx, gy))| {
                    p.is_some_and(|(px, py)| ((px - gx).powi(2) + (py - gy).powi(2)).sqrt() <= t)
                })
                .count();
            hits as f64 / gt.len() as f64
        })
        .collect()
}

/// Flow and keypoint accuracy for one evaluation set.
#[derive(Clone, Debug)]
pub struct MetricReport {
    /// Mean endpoint error over all pixels.
    pub epe_all: f64,
    /// Mean endpoint error over non-occluded pixels.
    pub epe_noc: f64,
    /// Fraction of pixels failing both the 3 px and 5 percent tests, in [0,1].
    pub er_percent: f64,
    /// Keypoint accuracy at each of PCK_THRESHOLDS; empty when the
    /// evaluation involved no keypoints.
    pub pck: Vec<f64>,
}

/// Training source drawing sequences per the data settings. Jitter, when
/// configured, is reseeded from the sequence seed so each item stays a pure
/// function of `(k, seed)`.
pub fn synthetic_source(data: &DataSettings) -> impl Fn(usize, u64) -> Vec<Array> {
    assert_eq!(data.source, DataSource::Synthetic, "only the synthetic source generates sequences");
    let d = data.clone();
    move |k, seed| {
        let seq = match d.scene {
            SceneKind::Translation => {
                generate_translation_sequence(seed, d.size, d.max_shift, k, d.texture_scale)
            }
            SceneKind::Occlusion => generate_occlusion_sequence(seed, d.size, k),
        };
        if d.jitter_brightness > 0.0 || d.jitter_hue > 0.0 {
            jitter(&seq.frames, d.jitter_brightness, d.jitter_hue, seed ^ 0x6a69_7474_6572)
        } else {
            seq.frames
        }
    }
}

/// Flow accuracy of a trained model on held-out two-frame sequences, one per
/// seed, generated per the config's data settings without jitter. Sequences
/// share a size, so averaging per-sequence means equals pooling pixels.
pub fn evaluate_flow(params: &ParamSet, cfg: &RunConfig, eval_seeds: &[u64]) -> MetricReport {
    assert!(!eval_seeds.is_empty(), "evaluation needs at least one sequence");
    let rcfg = match cfg.train.model {
        ModelKind::Regressor => Some(&cfg.regressor),
        ModelKind::Nonparametric => None,
    };
    let d = &cfg.data;
    let (mut all, mut noc, mut er) = (0.0, 0.0, 0.0);
    for &seed in eval_seeds {
        let seq = match d.scene {
            SceneKind::Translation => {
                generate_translation_sequence(seed, d.size, d.max_shift, 2, d.texture_scale)
            }
            SceneKind::Occlusion => generate_occlusion_sequence(seed, d.size, 2),
        };
        let pred = predict_flow(
            params, &cfg.encoder, &cfg.transition, rcfg, &seq.frames[0], &seq.frames[1],
        );
        let gt = &seq.gt_flows[0];
        let everywhere = vec![true; d.size * d.size];
        let visible: Vec<bool> = seq.occlusion_masks[0].iter().map(|&o| !o).collect();
        all += epe(&pred, gt, &everywhere);
        noc += epe(&pred, gt, &visible);
        er += error_rate(&pred, gt, &everywhere);
    }
    let n = eval_seeds.len() as f64;
    MetricReport { epe_all: all / n, epe_noc: noc / n, er_percent: er / n, pck: Vec::new() }
}

/// Model property varied by an ablation sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// Frames per training walk; the sweep trains one single-stage
    /// curriculum per value.
    CycleLength,
    /// Search window side at every level.
    WindowSize,
    /// How many pyramid levels, coarsest first, carry the training loss.
    /// Remaining levels keep their random embeddings but still refine flow.
    WalkLevels,
}

/// One trained-and-evaluated configuration of an ablation sweep.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub value: usize,
    pub report: MetricReport,
}

/// Trains one model per axis value from a fresh initialization, holding
/// every other setting and all seeds fixed, then scores each on the same
/// held-out sequences. Training draws hash-distributed sequence seeds, so
/// small literal evaluation seeds stay disjoint from the training set.
pub fn run_ablation(
    axis: AblationAxis,
    values: &[usize],
    base: &RunConfig,
    eval_seeds: &[u64],
) -> Vec<AblationRow> {
    values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            match axis {
                AblationAxis::CycleLength => {
                    assert!(v >= 2, "a walk needs at least two frames");
                    cfg.cycle.cycle_length = v;
                    cfg.train.curriculum = vec![v];
                }
                AblationAxis::WindowSize => {
                    assert!(v % 2 == 1, "the search window needs a center pixel");
                    cfg.transition.window = v;
                }
                AblationAxis::WalkLevels => {
                    let levels = cfg.encoder.levels;
                    assert!((1..=levels).contains(&v), "walk levels must lie in 1..={levels}");
                    let mut w = vec![1.0; v];
                    w.resize(levels, 0.0);
                    cfg.cycle.level_weights = w;
                }
            }
            let source = synthetic_source(&cfg.data);
            let out = train_curriculum(init_model(&cfg), &cfg, &source)
                .unwrap_or_else(|e| panic!("ablation value {v}: {e}"));
            let report = evaluate_flow(out.final_params(), &cfg, eval_seeds);
            AblationRow { value: v, report }
        })
        .collect()
}
