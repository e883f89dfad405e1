//! One function per subcommand, plus the file plumbing they share. Every
//! function reports failures as `CmdError` so the entry point can map them
//! to the documented exit codes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use pixelwalk::config::{DataSource, ModelKind, RunConfig, SceneKind};
use pixelwalk::engine::{Array, ParamSet, GRAD_TOL};
use pixelwalk::io::{
    read_checkpoint, read_flo, read_frame_png, read_gray_png, read_keypoints_csv,
    write_checkpoint, write_flo, write_frame_png, write_gray_png, write_keypoints_csv,
    write_rgb8_png, FrameKeypoints,
};
use pixelwalk::propagate::{keypoints_to_labelmap, labelmap_to_keypoints, propagate_labels, LabelMap};
use pixelwalk::regressor::RegressorConfig;
use pixelwalk::synthdata::{
    epe, error_rate, generate_occlusion_sequence, generate_translation_sequence, jitter, pck,
    synthetic_source, PCK_THRESHOLDS,
};
use pixelwalk::train::{
    composite_gradient_reports, init_model, log_to_csv, predict_flow, train_curriculum,
    SequenceSource,
};
use pixelwalk::viz::flow_to_rgb8;

use crate::pad::{crop_to, reflect_pad};
use crate::{CmdError, Overrides};

/// Stream separator applied to a sequence seed before drawing jitter
/// factors, matching the synthetic source's convention.
const JITTER_STREAM: u64 = 0x6a69_7474_6572;

fn file_err(path: &Path, e: io::Error) -> CmdError {
    CmdError::Usage(format!("{}: {e}", path.display()))
}

fn require_out(ov: &Overrides, what: &str) -> Result<PathBuf, CmdError> {
    ov.out.clone().ok_or_else(|| CmdError::Usage(format!("--out is required: {what}")))
}

/// Frame PNGs of one directory in name order.
fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>, CmdError> {
    let entries = fs::read_dir(dir).map_err(|e| file_err(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort();
    Ok(paths)
}

fn read_frames(paths: &[PathBuf]) -> Result<Vec<Array>, CmdError> {
    let mut frames = Vec::with_capacity(paths.len());
    for p in paths {
        let f = read_frame_png(p).map_err(|e| file_err(p, e))?;
        if let Some(first) = frames.first() {
            if first.shape != f.shape {
                return Err(CmdError::Usage(format!(
                    "{}: size {}x{} differs from the first frame's {}x{}",
                    p.display(),
                    f.shape[2],
                    f.shape[1],
                    first.shape[2],
                    first.shape[1],
                )));
            }
        }
        frames.push(f);
    }
    Ok(frames)
}

/// Checks that the checkpoint carries every parameter the config's model
/// needs, each at its expected shape. Extra entries are allowed so a
/// regressor checkpoint still serves nonparametric readout.
fn check_model_params(cfg: &RunConfig, params: &ParamSet) -> Result<(), CmdError> {
    let expected = init_model(cfg);
    for (name, arr) in &expected.entries {
        match params.get(name) {
            None => {
                return Err(CmdError::Usage(format!(
                    "checkpoint is missing parameter `{name}` required by this config"
                )))
            }
            Some(found) if found.shape != arr.shape => {
                return Err(CmdError::Usage(format!(
                    "checkpoint parameter `{name}` has shape {:?}, config expects {:?}",
                    found.shape, arr.shape
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn regressor_cfg(cfg: &RunConfig) -> Option<&RegressorConfig> {
    match cfg.train.model {
        ModelKind::Regressor => Some(&cfg.regressor),
        ModelKind::Nonparametric => None,
    }
}

/// Flow at the frames' own resolution: inputs are reflection-padded to the
/// encoder's multiple, the prediction is cropped back.
fn predict_flow_padded(params: &ParamSet, cfg: &RunConfig, a: &Array, b: &Array) -> Array {
    let div = 1usize << cfg.encoder.levels;
    let (h, w) = (a.shape[1], a.shape[2]);
    let pa = reflect_pad(a, div);
    let pb = reflect_pad(b, div);
    let flow =
        predict_flow(params, &cfg.encoder, &cfg.transition, regressor_cfg(cfg), &pa, &pb);
    crop_to(&flow, h, w)
}

/// Frames read once from `data.dir`; a sample is a contiguous clip whose
/// start the seed picks, so sampling stays a pure function of (k, seed).
struct DirectorySource {
    frames: Vec<Array>,
    jitter_brightness: f64,
    jitter_hue: f64,
}

impl SequenceSource for DirectorySource {
    fn sample(&self, k: usize, seed: u64) -> Vec<Array> {
        let span = (self.frames.len() - k + 1) as u64;
        let start = (seed % span) as usize;
        let clip = self.frames[start..start + k].to_vec();
        if self.jitter_brightness > 0.0 || self.jitter_hue > 0.0 {
            jitter(&clip, self.jitter_brightness, self.jitter_hue, seed ^ JITTER_STREAM)
        } else {
            clip
        }
    }
}

fn directory_source(cfg: &RunConfig) -> Result<DirectorySource, CmdError> {
    let dir = PathBuf::from(&cfg.data.dir);
    let paths = list_pngs(&dir)?;
    let frames = read_frames(&paths)?;
    let need = cfg.train.curriculum.last().copied().unwrap_or(2);
    if frames.len() < need {
        return Err(CmdError::Usage(format!(
            "{}: {} frames cannot form a {need}-frame walk",
            dir.display(),
            frames.len()
        )));
    }
    let div = 1usize << cfg.encoder.levels;
    let (h, w) = (frames[0].shape[1], frames[0].shape[2]);
    if h % div != 0 || w % div != 0 {
        return Err(CmdError::Usage(format!(
            "{}: training frames must be divisible by {div}, got {w}x{h}",
            dir.display()
        )));
    }
    Ok(DirectorySource {
        frames,
        jitter_brightness: cfg.data.jitter_brightness,
        jitter_hue: cfg.data.jitter_hue,
    })
}

pub fn cmd_train(ov: &Overrides) -> Result<(), CmdError> {
    let cfg = crate::load_config(ov)?;
    let out = PathBuf::from(&cfg.train.out_dir);
    fs::create_dir_all(&out).map_err(|e| file_err(&out, e))?;
    let config_path = out.join("config.txt");
    fs::write(&config_path, cfg.serialize()).map_err(|e| file_err(&config_path, e))?;

    let init = init_model(&cfg);
    let trained = match cfg.data.source {
        DataSource::Synthetic => {
            let source = synthetic_source(&cfg.data);
            train_curriculum(init, &cfg, &source)
        }
        DataSource::Directory => {
            let source = directory_source(&cfg)?;
            train_curriculum(init, &cfg, &source)
        }
    }
    .map_err(|e| CmdError::Numerical(e.to_string()))?;

    for (name, params) in &trained.checkpoints {
        let path = out.join(format!("{name}.ckpt"));
        write_checkpoint(&path, params).map_err(|e| file_err(&path, e))?;
    }
    let model_path = out.join("model.ckpt");
    write_checkpoint(&model_path, trained.final_params()).map_err(|e| file_err(&model_path, e))?;
    let log_path = out.join("loss_log.csv");
    fs::write(&log_path, log_to_csv(&trained.log)).map_err(|e| file_err(&log_path, e))?;

    println!(
        "trained {} stages over {} steps; wrote {} checkpoints to {}",
        cfg.train.curriculum.len(),
        trained.log.len(),
        trained.checkpoints.len() + 1,
        out.display()
    );
    if let (Some(first), Some(last)) = (trained.log.first(), trained.log.last()) {
        println!("walk loss {:.4} -> {:.4}", first.crw, last.crw);
    }
    Ok(())
}

pub fn cmd_flow(
    checkpoint: &Path,
    frame_a: &Path,
    frame_b: &Path,
    ov: &Overrides,
) -> Result<(), CmdError> {
    let cfg = crate::load_config(ov)?;
    let out = require_out(ov, "path for the .flo output")?;
    let fa = read_frame_png(frame_a).map_err(|e| file_err(frame_a, e))?;
    let fb = read_frame_png(frame_b).map_err(|e| file_err(frame_b, e))?;
    if fa.shape != fb.shape {
        return Err(CmdError::Usage(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            fa.shape[2], fa.shape[1], fb.shape[2], fb.shape[1]
        )));
    }
    let params = read_checkpoint(checkpoint).map_err(|e| file_err(checkpoint, e))?;
    check_model_params(&cfg, &params)?;

    let flow = predict_flow_padded(&params, &cfg, &fa, &fb);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| file_err(parent, e))?;
    }
    write_flo(&out, &flow).map_err(|e| file_err(&out, e))?;
    let png = out.with_extension("png");
    let (h, w) = (flow.shape[1], flow.shape[2]);
    write_rgb8_png(&png, &flow_to_rgb8(&flow), h, w).map_err(|e| file_err(&png, e))?;
    println!("wrote {} and {}", out.display(), png.display());
    Ok(())
}

struct PairScore {
    epe_noc: f64,
    epe_all: f64,
    er: f64,
}

fn mean_scores(scores: &[PairScore]) -> (f64, f64, f64) {
    let n = scores.len() as f64;
    let noc = scores.iter().map(|s| s.epe_noc).sum::<f64>() / n;
    let all = scores.iter().map(|s| s.epe_all).sum::<f64>() / n;
    let er = scores.iter().map(|s| s.er).sum::<f64>() / n;
    (noc, all, er)
}

pub fn cmd_eval(checkpoint: &Path, dataset: &Path, ov: &Overrides) -> Result<(), CmdError> {
    let cfg = crate::load_config(ov)?;
    let params = read_checkpoint(checkpoint).map_err(|e| file_err(checkpoint, e))?;
    check_model_params(&cfg, &params)?;

    let entries = fs::read_dir(dataset).map_err(|e| file_err(dataset, e))?;
    let mut seq_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    seq_dirs.sort();
    if seq_dirs.is_empty() {
        return Err(CmdError::Usage(format!(
            "{}: no sequence directories found",
            dataset.display()
        )));
    }

    println!(
        "{:<12} {:>6} {:>9} {:>9} {:>7}",
        "sequence", "pairs", "epe(noc)", "epe(all)", "er%"
    );
    let mut all_scores = Vec::new();
    let mut skipped = 0usize;
    for dir in &seq_dirs {
        let frames = read_frames(&list_pngs(dir)?)?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut scores = Vec::new();
        for i in 0..frames.len().saturating_sub(1) {
            let gt_path = dir.join(format!("flow_{i:03}.flo"));
            let occ_path = dir.join(format!("occ_{i:03}.png"));
            let (gt, occ) = match (read_flo(&gt_path), read_gray_png(&occ_path)) {
                (Ok(g), Ok(o)) => (g, o),
                (g, _) => {
                    let missing = if g.is_err() { &gt_path } else { &occ_path };
                    eprintln!("warning: {name} pair {i}: skipping, {}", missing.display());
                    skipped += 1;
                    continue;
                }
            };
            let (h, w) = (frames[i].shape[1], frames[i].shape[2]);
            if gt.shape != vec![2, h, w] || (occ.2, occ.1) != (w, h) {
                eprintln!("warning: {name} pair {i}: skipping, ground truth size mismatch");
                skipped += 1;
                continue;
            }
            let pred = predict_flow_padded(&params, &cfg, &frames[i], &frames[i + 1]);
            let visible: Vec<bool> = occ.0.iter().map(|&b| b < 128).collect();
            let everywhere = vec![true; h * w];
            scores.push(PairScore {
                epe_noc: epe(&pred, &gt, &visible),
                epe_all: epe(&pred, &gt, &everywhere),
                er: error_rate(&pred, &gt, &everywhere),
            });
        }
        if !scores.is_empty() {
            let (noc, all, er) = mean_scores(&scores);
            println!(
                "{:<12} {:>6} {:>9.3} {:>9.3} {:>7.2}",
                name,
                scores.len(),
                noc,
                all,
                er * 100.0
            );
        }
        all_scores.extend(scores);
    }
    if all_scores.is_empty() {
        return Err(CmdError::Usage("no pairs with ground truth could be scored".to_string()));
    }
    let (noc, all, er) = mean_scores(&all_scores);
    println!(
        "{:<12} {:>6} {:>9.3} {:>9.3} {:>7.2}",
        "all",
        all_scores.len(),
        noc,
        all,
        er * 100.0
    );
    println!("pairs skipped: {skipped}");
    Ok(())
}

/// Nearest source index under the half-pixel-centered correspondence
/// between a full grid and one downsampled by `stride`.
fn to_coarse(i: usize, stride: usize, n: usize) -> usize {
    let q = ((i as f64 + 0.5) / stride as f64 - 0.5).round();
    (q.max(0.0) as usize).min(n - 1)
}

fn to_fine(q: f64, stride: usize) -> f64 {
    (q + 0.5) * stride as f64 - 0.5
}

pub fn cmd_propagate(
    checkpoint: &Path,
    frames_dir: &Path,
    labels: &Path,
    gt: Option<&Path>,
    ov: &Overrides,
) -> Result<(), CmdError> {
    let mut cfg = crate::load_config(ov)?;
    cfg.train.model = ModelKind::Nonparametric;
    let out = require_out(ov, "directory for the propagated labels")?;
    let frames = read_frames(&list_pngs(frames_dir)?)?;
    if frames.len() < 2 {
        return Err(CmdError::Usage(format!(
            "{}: propagation needs at least two frames",
            frames_dir.display()
        )));
    }
    let params = read_checkpoint(checkpoint).map_err(|e| file_err(checkpoint, e))?;
    check_model_params(&cfg, &params)?;
    fs::create_dir_all(&out).map_err(|e| file_err(&out, e))?;

    let (h, w) = (frames[0].shape[1], frames[0].shape[2]);
    let div = 1usize << cfg.encoder.levels;
    let padded: Vec<Array> = frames.iter().map(|f| reflect_pad(f, div)).collect();
    let (ph, pw) = (padded[0].shape[1], padded[0].shape[2]);
    let ql = cfg.propagation.resolved_query_level(cfg.encoder.levels);
    let stride = 1usize << (cfg.encoder.levels - ql + 1);
    let (qh, qw) = (ph / stride, pw / stride);

    let is_csv = labels.extension().is_some_and(|x| x == "csv");
    if is_csv {
        let tracks = read_keypoints_csv(labels).map_err(|e| file_err(labels, e))?;
        let first = tracks
            .first()
            .ok_or_else(|| CmdError::Usage(format!("{}: no keypoints", labels.display())))?;
        let mut points = Vec::with_capacity(first.len());
        for (k, p) in first.iter().enumerate() {
            let (x, y) = p.ok_or_else(|| {
                CmdError::Usage(format!("keypoint {k} has no position on frame 0"))
            })?;
            points.push((x, y, k));
        }
        let grid: Vec<(f64, f64, usize)> = points
            .iter()
            .map(|&(x, y, k)| ((x + 0.5) / stride as f64 - 0.5, (y + 0.5) / stride as f64 - 0.5, k))
            .collect();
        for (i, a) in grid.iter().enumerate() {
            if a.0.round() < 0.0 || a.0.round() >= qw as f64 || a.1.round() < 0.0 || a.1.round() >= qh as f64 {
                return Err(CmdError::Usage(format!(
                    "keypoint {i} falls outside the {qw}x{qh} query grid"
                )));
            }
            for b in &grid[i + 1..] {
                if (a.0.round(), a.1.round()) == (b.0.round(), b.1.round()) {
                    return Err(CmdError::Usage(format!(
                        "keypoints {i} and {} land on the same query cell; the grid stride is {stride}",
                        b.2
                    )));
                }
            }
        }
        let initial = keypoints_to_labelmap(&grid, qh, qw, points.len());
        let maps = propagate_labels(&padded, &params, &cfg.encoder, &cfg.transition, &cfg.propagation, &initial);
        let mut out_tracks: Vec<FrameKeypoints> = Vec::with_capacity(maps.len());
        out_tracks.push(first.clone());
        for map in &maps[1..] {
            let kps = labelmap_to_keypoints(map);
            out_tracks
                .push(kps.iter().map(|p| p.map(|(x, y)| (to_fine(x, stride), to_fine(y, stride)))).collect());
        }
        let csv_path = out.join("keypoints.csv");
        write_keypoints_csv(&csv_path, &out_tracks).map_err(|e| file_err(&csv_path, e))?;
        println!("propagated {} keypoints over {} frames to {}", points.len(), maps.len(), csv_path.display());

        if let Some(gt_path) = gt {
            let truth = read_keypoints_csv(gt_path).map_err(|e| file_err(gt_path, e))?;
            let mut pred_all = Vec::new();
            let mut gt_all = Vec::new();
            for (t, row) in truth.iter().enumerate().skip(1).take(out_tracks.len() - 1) {
                for (k, g) in row.iter().enumerate() {
                    if let (Some(g), Some(p)) = (g, out_tracks[t].get(k)) {
                        pred_all.push(*p);
                        gt_all.push(*g);
                    }
                }
            }
            if gt_all.is_empty() {
                return Err(CmdError::Usage(format!(
                    "{}: no ground-truth keypoints past frame 0",
                    gt_path.display()
                )));
            }
            let scores = pck(&pred_all, &gt_all, &PCK_THRESHOLDS);
            let line = PCK_THRESHOLDS
                .iter()
                .zip(&scores)
                .map(|(t, s)| format!("pck@{t:.0} {s:.3}"))
                .collect::<Vec<_>>()
                .join("  ");
            println!("{line}");
        }
        return Ok(());
    }

    if gt.is_some() {
        return Err(CmdError::Usage("accuracy reporting needs keypoint labels, not a mask".to_string()));
    }
    let (bytes, lh, lw) = read_gray_png(labels).map_err(|e| file_err(labels, e))?;
    if (lh, lw) != (h, w) {
        return Err(CmdError::Usage(format!(
            "{}: label size {lw}x{lh} does not match frame size {w}x{h}",
            labels.display()
        )));
    }
    let classes = *bytes.iter().max().unwrap_or(&0) as usize + 1;
    let mut initial = LabelMap::zeros(qh, qw, classes);
    for qy in 0..qh {
        for qx in 0..qw {
            let y = to_coarse_center(qy, stride, h);
            let x = to_coarse_center(qx, stride, w);
            let class = bytes[y * w + x] as usize;
            initial.data[(qy * qw + qx) * classes + class] = 1.0;
        }
    }
    let maps = propagate_labels(&padded, &params, &cfg.encoder, &cfg.transition, &cfg.propagation, &initial);
    for (i, map) in maps.iter().enumerate() {
        let classes_per_cell = map.argmax_classes();
        let mut img = vec![0u8; h * w];
        for (p, v) in img.iter_mut().enumerate() {
            let (y, x) = (p / w, p % w);
            let q = to_coarse(y, stride, qh) * qw + to_coarse(x, stride, qw);
            *v = classes_per_cell[q] as u8;
        }
        let path = out.join(format!("label_{i:03}.png"));
        write_gray_png(&path, &img, h, w).map_err(|e| file_err(&path, e))?;
    }
    println!("propagated {classes} classes over {} frames to {}", maps.len(), out.display());
    Ok(())
}

/// Full-resolution pixel at the center of query cell `q`, clamped into the
/// unpadded image.
fn to_coarse_center(q: usize, stride: usize, n: usize) -> usize {
    let c = ((q as f64 + 0.5) * stride as f64 - 0.5).round();
    (c.max(0.0) as usize).min(n - 1)
}

pub fn cmd_gradcheck(ov: &Overrides) -> Result<(), CmdError> {
    crate::load_config(ov)?;
    let mut failed = 0usize;
    println!("primitives:");
    for (name, err) in pixelwalk::engine::primitive_gradient_reports() {
        let ok = err < GRAD_TOL;
        failed += usize::from(!ok);
        println!("  {} {:<22} max rel err {err:.3e}", if ok { "PASS" } else { "FAIL" }, name);
    }
    println!("loss terms:");
    for r in composite_gradient_reports() {
        let ok = r.pass();
        failed += usize::from(!ok);
        println!(
            "  {} {:<22} max rel err {:.3e}",
            if ok { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_err
        );
    }
    if failed > 0 {
        return Err(CmdError::Numerical(format!("{failed} gradient checks failed")));
    }
    println!("all gradient checks passed");
    Ok(())
}

pub fn cmd_synth(count: usize, frames_per_seq: usize, ov: &Overrides) -> Result<(), CmdError> {
    let cfg = crate::load_config(ov)?;
    let out = require_out(ov, "directory for the dataset")?;
    if count == 0 {
        return Err(CmdError::Usage("--count must be at least 1".to_string()));
    }
    if frames_per_seq < 2 {
        return Err(CmdError::Usage("--frames must be at least 2".to_string()));
    }
    fs::create_dir_all(&out).map_err(|e| file_err(&out, e))?;
    let d = &cfg.data;

    for i in 0..count {
        let seed = cfg.train.seed.wrapping_add(i as u64);
        let seq = match d.scene {
            SceneKind::Translation => generate_translation_sequence(
                seed,
                d.size,
                d.max_shift,
                frames_per_seq,
                d.texture_scale,
            ),
            SceneKind::Occlusion => generate_occlusion_sequence(seed, d.size, frames_per_seq),
        };
        let frames = if d.jitter_brightness > 0.0 || d.jitter_hue > 0.0 {
            jitter(&seq.frames, d.jitter_brightness, d.jitter_hue, seed ^ JITTER_STREAM)
        } else {
            seq.frames.clone()
        };
        let dir = out.join(format!("seq{i:03}"));
        fs::create_dir_all(&dir).map_err(|e| file_err(&dir, e))?;
        for (j, f) in frames.iter().enumerate() {
            let p = dir.join(format!("frame_{j:03}.png"));
            write_frame_png(&p, f).map_err(|e| file_err(&p, e))?;
        }
        for (j, f) in seq.gt_flows.iter().enumerate() {
            let p = dir.join(format!("flow_{j:03}.flo"));
            write_flo(&p, f).map_err(|e| file_err(&p, e))?;
        }
        for (j, m) in seq.occlusion_masks.iter().enumerate() {
            let bytes: Vec<u8> = m.iter().map(|&o| if o { 255 } else { 0 }).collect();
            let p = dir.join(format!("occ_{j:03}.png"));
            write_gray_png(&p, &bytes, d.size, d.size).map_err(|e| file_err(&p, e))?;
        }
        let tracks: Vec<FrameKeypoints> = seq
            .keypoint_tracks
            .iter()
            .map(|row| row.iter().map(|&p| Some(p)).collect())
            .collect();
        let p = dir.join("keypoints.csv");
        write_keypoints_csv(&p, &tracks).map_err(|e| file_err(&p, e))?;
    }

    let manifest = format!(
        "scene = {}\nsize = {}\nsequences = {}\nframes_per_sequence = {}\nmax_shift = {}\ntexture_scale = {}\nbase_seed = {}\njitter_brightness = {}\njitter_hue = {}\n",
        d.scene,
        d.size,
        count,
        frames_per_seq,
        d.max_shift,
        d.texture_scale,
        cfg.train.seed,
        d.jitter_brightness,
        d.jitter_hue,
    );
    let p = out.join("manifest.txt");
    fs::write(&p, manifest).map_err(|e| file_err(&p, e))?;
    println!("wrote {count} sequences of {frames_per_seq} frames to {}", out.display());
    Ok(())
}
