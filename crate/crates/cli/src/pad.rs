//! Reflection padding so arbitrary frame sizes fit the encoder's
//! power-of-two downsampling, plus the crop that undoes it.

use pixelwalk::engine::Array;

/// Folds an index into [0, n) by bouncing off both ends without repeating
/// the border sample, so any pad length works on any source size.
fn fold(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Pads [C,H,W] on the bottom and right with reflected samples until both
/// sides are multiples of `divisor`. Already-divisible input comes back
/// unchanged.
pub fn reflect_pad(img: &Array, divisor: usize) -> Array {
    let (c, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    let ph = h.div_ceil(divisor) * divisor;
    let pw = w.div_ceil(divisor) * divisor;
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    let mut data = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        let plane = &img.data[ch * h * w..(ch + 1) * h * w];
        for y in 0..ph {
            let row = fold(y, h) * w;
            for x in 0..pw {
                data.push(plane[row + fold(x, w)]);
            }
        }
    }
    Array::from_vec(&[c, ph, pw], data)
}

/// Top-left crop of [C,H,W] back to `h` by `w`.
pub fn crop_to(img: &Array, h: usize, w: usize) -> Array {
    let (c, ih, iw) = (img.shape[0], img.shape[1], img.shape[2]);
    assert!(h <= ih && w <= iw, "crop {w}x{h} exceeds {iw}x{ih}");
    if (ih, iw) == (h, w) {
        return img.clone();
    }
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let row = ch * ih * iw + y * iw;
            data.extend_from_slice(&img.data[row..row + w]);
        }
    }
    Array::from_vec(&[c, h, w], data)
}
