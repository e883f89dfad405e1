use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tmp(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join("pixelwalk-io-tests");
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn test_flo_round_trip_is_byte_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f64> = (0..2 * 4 * 5).map(|_| rng.gen_range(-9.0..9.0)).collect();
    let flow = Array::from_vec(&[2, 4, 5], data);
    let p1 = tmp("a.flo");
    let p2 = tmp("b.flo");
    write_flo(&p1, &flow).unwrap();
    let back = read_flo(&p1).unwrap();
    assert_eq!(back.shape, vec![2, 4, 5]);
    for (orig, got) in flow.data.iter().zip(&back.data) {
        assert_eq!(*got, *orig as f32 as f64, "values store as 32-bit floats");
    }
    write_flo(&p2, &back).unwrap();
    assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
}

#[test]
fn test_flo_reader_rejects_wrong_magic() {
    let p = tmp("bad.flo");
    let mut bytes = 12.5f32.to_le_bytes().to_vec();
    bytes.extend_from_slice(&2i32.to_le_bytes());
    bytes.extend_from_slice(&2i32.to_le_bytes());
    bytes.extend_from_slice(&[0; 32]);
    std::fs::write(&p, bytes).unwrap();
    let err = read_flo(&p).unwrap_err();
    assert!(err.to_string().contains("magic"), "{err}");
}

#[test]
fn test_flo_reader_rejects_nonpositive_sizes() {
    let p = tmp("neg.flo");
    let mut bytes = FLO_MAGIC.to_le_bytes().to_vec();
    bytes.extend_from_slice(&(-3i32).to_le_bytes());
    bytes.extend_from_slice(&2i32.to_le_bytes());
    std::fs::write(&p, bytes).unwrap();
    assert!(read_flo(&p).is_err());
}

#[test]
fn test_checkpoint_round_trip_preserves_every_bit() {
    let mut params = ParamSet::new();
    params.push("enc.l1.w", Array::from_vec(&[2, 3], vec![1e-300, -0.0, 0.1, f64::MIN_POSITIVE, 3.5, -7.25]));
    params.push("enc.l1.b", Array::from_vec(&[1], vec![0.3 + 0.3 + 0.3]));
    params.push("reg.head", Array::from_vec(&[2, 1, 1, 1], vec![f64::MAX, f64::EPSILON]));
    let p = tmp("model.ckpt");
    write_checkpoint(&p, &params).unwrap();
    let back = read_checkpoint(&p).unwrap();
    assert_eq!(back.entries.len(), params.entries.len());
    for ((na, aa), (nb, ab)) in params.entries.iter().zip(&back.entries) {
        assert_eq!(na, nb);
        assert_eq!(aa.shape, ab.shape);
        for (x, y) in aa.data.iter().zip(&ab.data) {
            assert_eq!(x.to_bits(), y.to_bits(), "{na}: {x} vs {y}");
        }
    }
    let p2 = tmp("model2.ckpt");
    write_checkpoint(&p2, &back).unwrap();
    assert_eq!(std::fs::read(p).unwrap(), std::fs::read(p2).unwrap());
}

#[test]
fn test_checkpoint_reader_rejects_other_files() {
    let p = tmp("not.ckpt");
    std::fs::write(&p, b"PK\x03\x04junk").unwrap();
    assert!(read_checkpoint(&p).unwrap_err().to_string().contains("checkpoint"));
}

#[test]
fn test_frame_png_quantizes_once_then_stays_fixed() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<f64> = (0..3 * 6 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let frame = Array::from_vec(&[3, 6, 4], data);
    let p = tmp("frame.png");
    write_frame_png(&p, &frame).unwrap();
    let once = read_frame_png(&p).unwrap();
    assert_eq!(once.shape, vec![3, 6, 4]);
    for (a, b) in frame.data.iter().zip(&once.data) {
        assert!((a - b).abs() <= 0.5 / 127.5 + 1e-12, "quantization error too large: {a} vs {b}");
    }
    write_frame_png(&p, &once).unwrap();
    let twice = read_frame_png(&p).unwrap();
    assert_eq!(once.data, twice.data, "a second quantization must be the identity");
}

#[test]
fn test_grayscale_frame_reads_back_replicated() {
    let frame = Array::from_vec(&[1, 2, 2], vec![-1.0, -0.5, 0.5, 1.0]);
    let p = tmp("gray-frame.png");
    write_frame_png(&p, &frame).unwrap();
    let back = read_frame_png(&p).unwrap();
    assert_eq!(back.shape, vec![3, 2, 2]);
    let n = 4;
    for p in 0..n {
        assert_eq!(back.data[p], back.data[n + p]);
        assert_eq!(back.data[p], back.data[2 * n + p]);
    }
}

#[test]
fn test_gray_png_round_trips_bytes() {
    let values: Vec<u8> = (0..30).map(|i| (i * 8) as u8).collect();
    let p = tmp("labels.png");
    write_gray_png(&p, &values, 5, 6).unwrap();
    let (back, h, w) = read_gray_png(&p).unwrap();
    assert_eq!((h, w), (5, 6));
    assert_eq!(back, values);
}

#[test]
fn test_keypoint_csv_round_trip_with_losses() {
    let tracks = vec![
        vec![Some((1.5, 2.25)), Some((0.1, 31.0))],
        vec![Some((4.5, 2.0)), None],
        vec![None, None],
    ];
    let p = tmp("kp.csv");
    write_keypoints_csv(&p, &tracks).unwrap();
    let back = read_keypoints_csv(&p).unwrap();
    assert_eq!(back, tracks);
}

#[test]
fn test_keypoint_csv_rejects_bad_header_and_order() {
    let p = tmp("kp-bad.csv");
    std::fs::write(&p, "x,y\n0,0,1,2\n").unwrap();
    assert!(read_keypoints_csv(&p).unwrap_err().to_string().contains("header"));
    std::fs::write(&p, "frame,keypoint,x,y\n1,0,1,2\n").unwrap();
    assert!(read_keypoints_csv(&p).unwrap_err().to_string().contains("order"));
}
