//! Flow visualization: direction as hue, magnitude as saturation against
//! white, normalized by the 99th-percentile magnitude so a few large
//! vectors cannot wash out the rest of the field.

use crate::engine::Array;

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [u8; 3] {
    let h = (h_deg.rem_euclid(360.0)) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [to_byte(r + m), to_byte(g + m), to_byte(b + m)]
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Nearest-rank 99th percentile of the pixel magnitudes.
fn percentile_99(mags: &[f64]) -> f64 {
    let mut sorted = mags.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((0.99 * sorted.len() as f64).ceil() as usize).max(1);
    sorted[rank - 1]
}

/// Renders a [2,H,W] flow field as row-major RGB bytes. Zero motion is
/// white; direction picks the hue and relative magnitude the saturation,
/// clamped at 1 for pixels beyond the normalizer.
pub fn flow_to_rgb8(flow: &Array) -> Vec<u8> {
    assert_eq!(flow.shape.len(), 3, "flow must be [2,H,W]");
    assert_eq!(flow.shape[0], 2, "flow must be [2,H,W]");
    let n = flow.shape[1] * flow.shape[2];
    let mags: Vec<f64> = (0..n).map(|p| flow.data[p].hypot(flow.data[n + p])).collect();
    let norm = percentile_99(&mags);
    let mut rgb = Vec::with_capacity(3 * n);
    for (p, mag) in mags.iter().enumerate() {
        let (u, v) = (flow.data[p], flow.data[n + p]);
        let sat = if norm > 0.0 { (mag / norm).min(1.0) } else { 0.0 };
        let hue = v.atan2(u).to_degrees();
        rgb.extend_from_slice(&hsv_to_rgb(hue, sat, 1.0));
    }
    rgb
}
