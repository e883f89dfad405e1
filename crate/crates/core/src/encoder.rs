//! Convolutional feature pyramid with per-level matching embeddings.
//!
//! Level 1 is the coarsest map, level L the finest at half the input
//! resolution: level l has spatial size ceil(H / 2^(L-l+1)). Each level is
//! one stride-2 block (conv, leaky relu, conv, leaky relu) on top of the
//! previous finer level, plus a 1x1 head projecting to d channels followed
//! by per-pixel l2 normalization.

use crate::engine::{Array, BoundParams, ParamSet, Tape, Tensor, LEAKY_SLOPE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Number of pyramid levels L.
    pub levels: usize,
    /// Embedding channels d produced by every level head.
    pub embed_dim: usize,
    /// Conv channels at the finest level; level l carries base * 2^(L-l).
    pub base_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { levels: 5, embed_dim: 32, base_channels: 16 }
    }
}

impl EncoderConfig {
    /// Conv channels of level l (1-based, 1 = coarsest).
    pub fn conv_channels(&self, level: usize) -> usize {
        assert!((1..=self.levels).contains(&level), "level {level} out of 1..={}", self.levels);
        self.base_channels << (self.levels - level)
    }

    fn block_in_channels(&self, level: usize) -> usize {
        if level == self.levels {
            3
        } else {
            self.conv_channels(level + 1)
        }
    }

    /// Spatial downsampling factor from the input image to level l.
    pub fn level_stride(&self, level: usize) -> usize {
        1 << (self.levels - level + 1)
    }

    /// Level l spatial size for an input of the given size.
    pub fn level_size(&self, level: usize, input: usize) -> usize {
        let s = self.level_stride(level);
        input.div_ceil(s)
    }
}

/// One pyramid level bound to a tape: pre-head conv features [c,h,w] and
/// row-major unit-norm embeddings [h*w, d].
pub struct LevelFeatures {
    pub h: usize,
    pub w: usize,
    pub conv: Tensor,
    pub embed: Tensor,
}

/// Levels ordered coarsest first: `levels[0]` is level 1.
pub struct FeaturePyramid {
    pub levels: Vec<LevelFeatures>,
}

impl FeaturePyramid {
    pub fn finest(&self) -> &LevelFeatures {
        self.levels.last().expect("empty pyramid")
    }
}

/// Fresh encoder parameters: weights uniform in +-1/sqrt(fan_in), biases
/// zero so an all-zero image yields exactly constant feature maps.
pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for level in (1..=cfg.levels).rev() {
        let cin = cfg.block_in_channels(level);
        let cout = cfg.conv_channels(level);
        push_conv(&mut params, &mut rng, &format!("enc.l{level}.conv1"), cout, cin, 3);
        push_conv(&mut params, &mut rng, &format!("enc.l{level}.conv2"), cout, cout, 3);
        push_conv(&mut params, &mut rng, &format!("enc.l{level}.head"), cfg.embed_dim, cout, 1);
    }
    params
}

pub(crate) fn push_conv(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, oc: usize, ic: usize, k: usize) {
    let fan_in = ic * k * k;
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w: Vec<f64> = (0..oc * ic * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
    params.push(&format!("{name}.w"), Array::from_vec(&[oc, ic, k, k], w));
    params.push(&format!("{name}.b"), Array::zeros(&[oc]));
}

/// Runs the pyramid on one image. The image must be [1|3, H, W] with H and W
/// divisible by 2^L and values in [-1, 1]; single-channel input is
/// replicated to three channels.
pub fn encode(tape: &mut Tape, params: &BoundParams, cfg: &EncoderConfig, image: &Array) -> FeaturePyramid {
    assert_eq!(image.shape.len(), 3, "image must be [c,h,w], got {:?}", image.shape);
    let (c, h, w) = (image.shape[0], image.shape[1], image.shape[2]);
    assert!(c == 1 || c == 3, "image must have 1 or 3 channels, got {c}");
    let div = 1usize << cfg.levels;
    assert!(
        h % div == 0 && w % div == 0,
        "image {h}x{w} not divisible by 2^{}; pad before encoding",
        cfg.levels
    );
    assert!(
        image.data.iter().all(|v| (-1.0 - 1e-9..=1.0 + 1e-9).contains(v)),
        "image values must lie in [-1, 1]"
    );

    let rgb;
    let image = if c == 1 {
        let mut data = Vec::with_capacity(3 * h * w);
        for _ in 0..3 {
            data.extend_from_slice(&image.data);
        }
        rgb = Array::from_vec(&[3, h, w], data);
        &rgb
    } else {
        image
    };

    let mut cur = tape.input(image);
    let mut levels = Vec::with_capacity(cfg.levels);
    for level in (1..=cfg.levels).rev() {
        let w1 = params.get(&format!("enc.l{level}.conv1.w"));
        let b1 = params.get(&format!("enc.l{level}.conv1.b"));
        let w2 = params.get(&format!("enc.l{level}.conv2.w"));
        let b2 = params.get(&format!("enc.l{level}.conv2.b"));
        let hw = params.get(&format!("enc.l{level}.head.w"));
        let hb = params.get(&format!("enc.l{level}.head.b"));

        let x = tape.conv2d(&cur, &w1.clone(), &b1.clone(), 2, 1);
        let x = tape.leaky_relu(&x, LEAKY_SLOPE);
        let x = tape.conv2d(&x, &w2.clone(), &b2.clone(), 1, 1);
        let conv = tape.leaky_relu(&x, LEAKY_SLOPE);

        let head = tape.conv2d(&conv, &hw.clone(), &hb.clone(), 1, 0);
        let rows = tape.chw_to_rows(&head);
        let embed = tape.l2_normalize_rows(&rows);

        let (lh, lw) = (conv.shape[1], conv.shape[2]);
        levels.push(LevelFeatures { h: lh, w: lw, conv: conv.clone(), embed });
        cur = conv;
    }
    levels.reverse();
    FeaturePyramid { levels }
}
