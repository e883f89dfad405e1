//! On-disk formats: Middlebury `.flo` flow files, parameter checkpoints,
//! PNG frames and masks, and keypoint tables. Flow files are 32-bit floats
//! by definition; checkpoints keep full 64-bit precision so a write/read
//! cycle returns the exact parameters.

use crate::engine::{Array, ParamSet};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FLO_MAGIC: f32 = 202021.25;

fn bad_data(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

/// Writes a [2,H,W] flow field as a `.flo` file: the magic float, width and
/// height as little-endian 32-bit integers, then row-major interleaved
/// (u, v) 32-bit floats.
pub fn write_flo(path: &Path, flow: &Array) -> io::Result<()> {
    assert_eq!(flow.shape.len(), 3, "flow must be [2,H,W]");
    assert_eq!(flow.shape[0], 2, "flow must be [2,H,W]");
    let (h, w) = (flow.shape[1], flow.shape[2]);
    let n = h * w;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&FLO_MAGIC.to_le_bytes())?;
    out.write_all(&(w as i32).to_le_bytes())?;
    out.write_all(&(h as i32).to_le_bytes())?;
    for p in 0..n {
        out.write_all(&(flow.data[p] as f32).to_le_bytes())?;
        out.write_all(&(flow.data[n + p] as f32).to_le_bytes())?;
    }
    out.flush()
}

/// Reads a `.flo` file back as a [2,H,W] array. Every stored value is a
/// 32-bit float, so the result is exact and re-writing it reproduces the
/// file byte for byte.
pub fn read_flo(path: &Path) -> io::Result<Array> {
    let mut inp = BufReader::new(File::open(path)?);
    let mut quad = [0u8; 4];
    inp.read_exact(&mut quad)?;
    let magic = f32::from_le_bytes(quad);
    if magic != FLO_MAGIC {
        return Err(bad_data(format!("not a flow file: magic {magic} instead of {FLO_MAGIC}")));
    }
    inp.read_exact(&mut quad)?;
    let w = i32::from_le_bytes(quad);
    inp.read_exact(&mut quad)?;
    let h = i32::from_le_bytes(quad);
    if w <= 0 || h <= 0 {
        return Err(bad_data(format!("flow file claims {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let n = h * w;
    let mut data = vec![0.0; 2 * n];
    for p in 0..n {
        inp.read_exact(&mut quad)?;
        data[p] = f32::from_le_bytes(quad) as f64;
        inp.read_exact(&mut quad)?;
        data[n + p] = f32::from_le_bytes(quad) as f64;
    }
    Ok(Array::from_vec(&[2, h, w], data))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FWCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes every parameter with its name, shape, and full-precision values.
pub fn write_checkpoint(path: &Path, params: &ParamSet) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(params.entries.len() as u32).to_le_bytes())?;
    for (name, array) in &params.entries {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(array.shape.len() as u32).to_le_bytes())?;
        for &d in &array.shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &array.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

pub fn read_checkpoint(path: &Path) -> io::Result<ParamSet> {
    let mut inp = BufReader::new(File::open(path)?);
    let mut quad = [0u8; 4];
    inp.read_exact(&mut quad)?;
    if &quad != CHECKPOINT_MAGIC {
        return Err(bad_data("not a checkpoint file".to_string()));
    }
    inp.read_exact(&mut quad)?;
    let version = u32::from_le_bytes(quad);
    if version != CHECKPOINT_VERSION {
        return Err(bad_data(format!("unsupported checkpoint version {version}")));
    }
    inp.read_exact(&mut quad)?;
    let count = u32::from_le_bytes(quad);
    let mut params = ParamSet::new();
    for _ in 0..count {
        inp.read_exact(&mut quad)?;
        let name_len = u32::from_le_bytes(quad) as usize;
        let mut name = vec![0u8; name_len];
        inp.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad_data(format!("bad name: {e}")))?;
        inp.read_exact(&mut quad)?;
        let rank = u32::from_le_bytes(quad) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            inp.read_exact(&mut quad)?;
            shape.push(u32::from_le_bytes(quad) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut oct = [0u8; 8];
        for _ in 0..numel {
            inp.read_exact(&mut oct)?;
            data.push(f64::from_le_bytes(oct));
        }
        params.push(&name, Array::from_vec(&shape, data));
    }
    Ok(params)
}

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Writes a [3,H,W] or [1,H,W] frame in [-1,1] as an 8-bit PNG.
pub fn write_frame_png(path: &Path, frame: &Array) -> io::Result<()> {
    assert_eq!(frame.shape.len(), 3, "frame must be [C,H,W]");
    let (c, h, w) = (frame.shape[0], frame.shape[1], frame.shape[2]);
    assert!(c == 1 || c == 3, "frame must have 1 or 3 channels");
    let n = h * w;
    let mut buf = Vec::with_capacity(c * n);
    for p in 0..n {
        for ch in 0..c {
            buf.push(to_byte(frame.data[ch * n + p]));
        }
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(if c == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| bad_data(e.to_string()))?;
    writer.write_image_data(&buf).map_err(|e| bad_data(e.to_string()))?;
    Ok(())
}

/// Writes precomputed 8-bit RGB rows (3 bytes per pixel, row-major).
pub fn write_rgb8_png(path: &Path, rgb: &[u8], h: usize, w: usize) -> io::Result<()> {
    assert_eq!(rgb.len(), 3 * h * w, "rgb buffer does not match {h}x{w}");
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| bad_data(e.to_string()))?;
    writer.write_image_data(rgb).map_err(|e| bad_data(e.to_string()))?;
    Ok(())
}

/// Reads a PNG frame into a [3,H,W] array in [-1,1]. Grayscale images are
/// replicated across channels; an alpha channel is dropped.
pub fn read_frame_png(path: &Path) -> io::Result<Array> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(|e| bad_data(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| bad_data("png too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad_data(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(bad_data(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let n = h * w;
    let step = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(bad_data(format!("unsupported color type {other:?}"))),
    };
    let channels = if step >= 3 { 3 } else { 1 };
    let mut data = vec![0.0; 3 * n];
    for p in 0..n {
        for ch in 0..3 {
            let byte = buf[p * step + ch.min(channels - 1)];
            data[ch * n + p] = byte as f64 / 127.5 - 1.0;
        }
    }
    Ok(Array::from_vec(&[3, h, w], data))
}

/// Writes one byte per pixel as a grayscale PNG: class ids for label maps,
/// 0/255 for boolean masks.
pub fn write_gray_png(path: &Path, values: &[u8], h: usize, w: usize) -> io::Result<()> {
    assert_eq!(values.len(), h * w, "value buffer does not match {h}x{w}");
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| bad_data(e.to_string()))?;
    writer.write_image_data(values).map_err(|e| bad_data(e.to_string()))?;
    Ok(())
}

/// Reads an 8-bit grayscale PNG back as raw bytes plus its size.
pub fn read_gray_png(path: &Path) -> io::Result<(Vec<u8>, usize, usize)> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(|e| bad_data(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| bad_data("png too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad_data(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(bad_data("label PNG must be 8-bit grayscale".to_string()));
    }
    buf.truncate(info.buffer_size());
    Ok((buf, info.height as usize, info.width as usize))
}

/// Writes per-frame keypoint positions as `frame,keypoint,x,y` rows. A lost
/// keypoint writes empty coordinate fields. Coordinates survive the round
/// trip exactly; they are printed with the shortest digits that parse back
/// to the same 64-bit float.
pub fn write_keypoints_csv(path: &Path, tracks: &[Vec<Option<(f64, f64)>>]) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(b"frame,keypoint,x,y\n")?;
    for (fi, frame) in tracks.iter().enumerate() {
        for (ki, kp) in frame.iter().enumerate() {
            match kp {
                Some((x, y)) => writeln!(out, "{fi},{ki},{x},{y}")?,
                None => writeln!(out, "{fi},{ki},,")?,
            }
        }
    }
    out.flush()
}

/// Keypoint tracks for one frame: `None` marks a point with no position.
pub type FrameKeypoints = Vec<Option<(f64, f64)>>;

pub fn read_keypoints_csv(path: &Path) -> io::Result<Vec<FrameKeypoints>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("frame,keypoint,x,y") => {}
        other => return Err(bad_data(format!("bad keypoint header {other:?}"))),
    }
    let mut tracks: Vec<Vec<Option<(f64, f64)>>> = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 {
            return Err(bad_data(format!("keypoint line {}: expected 4 cells", ln + 2)));
        }
        let fi: usize = cells[0].parse().map_err(|_| bad_data(format!("bad frame {:?}", cells[0])))?;
        let ki: usize =
            cells[1].parse().map_err(|_| bad_data(format!("bad keypoint {:?}", cells[1])))?;
        let kp = if cells[2].is_empty() && cells[3].is_empty() {
            None
        } else {
            let x: f64 = cells[2].parse().map_err(|_| bad_data(format!("bad x {:?}", cells[2])))?;
            let y: f64 = cells[3].parse().map_err(|_| bad_data(format!("bad y {:?}", cells[3])))?;
            Some((x, y))
        };
        if fi == tracks.len() && ki == 0 {
            tracks.push(Vec::new());
        }
        if fi + 1 != tracks.len() || ki != tracks[fi].len() {
            return Err(bad_data(format!("keypoint line {}: rows out of order", ln + 2)));
        }
        tracks[fi].push(kp);
    }
    Ok(tracks)
}

#[cfg(test)]
mod tests;
