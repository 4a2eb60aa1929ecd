//! Scene, camera, checkpoint, and image serialization.
//!
//! Scene files are line-oriented text by default (diff-able at desk scale)
//! with a binary variant behind the same two header lines:
//!
//! ```text
//! skewsplat scene v1 text
//! n 128
//! <mu[3] quat[4] log_scale[3] mag_raw dir_raw[3] opacity_raw color[3]>
//! ...
//! ```
//!
//! Text records print floats with Rust's shortest round-trip formatting, so
//! write -> read is bit-exact for finite values in both formats.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraMode, CameraModel};
use crate::error::SplatError;
use crate::optimizer::{OptimConfig, TrainState};
use crate::snkernel::{Primitive3D, SkewLatent};

pub const SCENE_MAGIC: &str = "skewsplat scene v1";
pub const FLOAT_DUMP_MAGIC: &[u8; 4] = b"SNF1";

/// Floats per scene record: mu 3, quat 4, log_scale 3, mag_raw 1, dir_raw 3,
/// opacity_raw 1, color 3.
pub const SCENE_RECORD_LEN: usize = 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneFormat {
    Text,
    Binary,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> SplatError {
    SplatError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn record_of(p: &Primitive3D) -> [f64; SCENE_RECORD_LEN] {
    let mut r = [0.0; SCENE_RECORD_LEN];
    r[..3].copy_from_slice(p.mu.as_slice());
    r[3..7].copy_from_slice(p.quat.as_slice());
    r[7..10].copy_from_slice(p.log_scale.as_slice());
    r[10] = p.skew.mag_raw;
    r[11..14].copy_from_slice(p.skew.dir_raw.as_slice());
    r[14] = p.opacity_raw;
    r[15..18].copy_from_slice(p.color.as_slice());
    r
}

fn record_to_prim(r: &[f64; SCENE_RECORD_LEN]) -> Primitive3D {
    Primitive3D {
        mu: Vector3::new(r[0], r[1], r[2]),
        quat: Vector4::new(r[3], r[4], r[5], r[6]),
        log_scale: Vector3::new(r[7], r[8], r[9]),
        skew: SkewLatent {
            mag_raw: r[10],
            dir_raw: Vector3::new(r[11], r[12], r[13]),
        },
        opacity_raw: r[14],
        color: Vector3::new(r[15], r[16], r[17]),
    }
}

pub fn write_scene(
    path: &Path,
    prims: &[Primitive3D],
    format: SceneFormat,
) -> Result<(), SplatError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let tag = match format {
        SceneFormat::Text => "text",
        SceneFormat::Binary => "binary",
    };
    writeln!(out, "{SCENE_MAGIC} {tag}")?;
    writeln!(out, "n {}", prims.len())?;
    match format {
        SceneFormat::Text => {
            for p in prims {
                let r = record_of(p);
                let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
        SceneFormat::Binary => {
            for p in prims {
                for v in record_of(p) {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<Vec<Primitive3D>, SplatError> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let header = header.trim_end();
    let format = match header.strip_prefix(SCENE_MAGIC) {
        Some(" text") => SceneFormat::Text,
        Some(" binary") => SceneFormat::Binary,
        _ => {
            return Err(parse_err(
                path,
                1,
                format!("bad header '{header}', expected '{SCENE_MAGIC} text|binary'"),
            ))
        }
    };
    let mut count_line = String::new();
    reader.read_line(&mut count_line)?;
    let count: usize = count_line
        .trim()
        .strip_prefix("n ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| parse_err(path, 2, format!("bad count line '{}'", count_line.trim())))?;

    let mut prims = Vec::with_capacity(count);
    match format {
        SceneFormat::Text => {
            let mut line_no = 2;
            let mut line = String::new();
            while prims.len() < count {
                line.clear();
                line_no += 1;
                if reader.read_line(&mut line)? == 0 {
                    return Err(parse_err(
                        path,
                        line_no,
                        format!("expected {count} records, file ends after {}", prims.len()),
                    ));
                }
                let body = line.trim();
                if body.is_empty() || body.starts_with('#') {
                    continue;
                }
                let mut r = [0.0; SCENE_RECORD_LEN];
                let mut toks = body.split_whitespace();
                for (i, slot) in r.iter_mut().enumerate() {
                    let tok = toks.next().ok_or_else(|| {
                        parse_err(
                            path,
                            line_no,
                            format!("record has {i} fields, needs {SCENE_RECORD_LEN}"),
                        )
                    })?;
                    *slot = tok.parse().map_err(|_| {
                        parse_err(path, line_no, format!("bad float '{tok}' (field {i})"))
                    })?;
                }
                if let Some(extra) = toks.next() {
                    return Err(parse_err(
                        path,
                        line_no,
                        format!("trailing token '{extra}' after {SCENE_RECORD_LEN} fields"),
                    ));
                }
                prims.push(record_to_prim(&r));
            }
        }
        SceneFormat::Binary => {
            let mut buf = vec![0u8; count * SCENE_RECORD_LEN * 8];
            reader
                .read_exact(&mut buf)
                .map_err(|e| parse_err(path, 2, format!("binary body truncated ({e})")))?;
            for rec in buf.chunks_exact(SCENE_RECORD_LEN * 8) {
                let mut r = [0.0; SCENE_RECORD_LEN];
                for (slot, chunk) in r.iter_mut().zip(rec.chunks_exact(8)) {
                    *slot = f64::from_le_bytes(chunk.try_into().unwrap());
                }
                prims.push(record_to_prim(&r));
            }
        }
    }
    Ok(prims)
}

/// Camera file: one camera per line, `#` comments. 23 whitespace-separated
/// tokens: mode, 16 row-major world-to-view entries, fx fy cx cy, width
/// height.
pub fn write_cameras(path: &Path, cams: &[CameraModel]) -> Result<(), SplatError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "# mode m00..m33 fx fy cx cy width height")?;
    for c in cams {
        let mut toks: Vec<String> = vec![c.mode.as_str().to_string()];
        for row in 0..4 {
            for col in 0..4 {
                toks.push(c.world_to_view[(row, col)].to_string());
            }
        }
        for v in [c.fx, c.fy, c.cx, c.cy] {
            toks.push(v.to_string());
        }
        toks.push(c.width.to_string());
        toks.push(c.height.to_string());
        writeln!(out, "{}", toks.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraModel>, SplatError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut cams = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.len() != 23 {
            return Err(parse_err(
                path,
                line_no,
                format!("camera line has {} tokens, needs 23", toks.len()),
            ));
        }
        let mode = CameraMode::parse(toks[0])
            .ok_or_else(|| parse_err(path, line_no, format!("bad camera mode '{}'", toks[0])))?;
        let mut vals = [0.0f64; 20];
        for (i, tok) in toks[1..21].iter().enumerate() {
            vals[i] = tok.parse().map_err(|_| {
                parse_err(
                    path,
                    line_no,
                    format!("bad float '{tok}' (token {})", i + 1),
                )
            })?;
        }
        let mut m = Matrix4::zeros();
        for row in 0..4 {
            for col in 0..4 {
                m[(row, col)] = vals[row * 4 + col];
            }
        }
        let width: usize = toks[21]
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad width '{}'", toks[21])))?;
        let height: usize = toks[22]
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad height '{}'", toks[22])))?;
        let cam = CameraModel::new(
            m, vals[16], vals[17], vals[18], vals[19], width, height, mode,
        )
        .map_err(|e| parse_err(path, line_no, e.to_string()))?;
        cams.push(cam);
    }
    Ok(cams)
}

/// 8-bit PNG from interleaved RGB in [0, 1]; values are clamped.
pub fn write_png(path: &Path, data: &[f64], w: usize, h: usize) -> Result<(), SplatError> {
    if data.len() != w * h * 3 {
        return Err(SplatError::Config(format!(
            "png buffer is {} values, expected {}x{}x3",
            data.len(),
            w,
            h
        )));
    }
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer");
    img.save(path)
        .map_err(|e| SplatError::Numerical(format!("png encode failed: {e}")))?;
    Ok(())
}

/// Reads a PNG into interleaved RGB in [0, 1] (alpha dropped if present).
pub fn read_png(path: &Path) -> Result<(Vec<f64>, usize, usize), SplatError> {
    let img = image::open(path)
        .map_err(|e| parse_err(path, 1, format!("png decode failed: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok((data, w, h))
}

/// Raw float dump: magic, u32 LE width/height/channels, then channel-major
/// f32 planes. Keeps full precision for downstream diffing.
pub fn write_f32_dump(
    path: &Path,
    data: &[f64],
    w: usize,
    h: usize,
    channels: usize,
) -> Result<(), SplatError> {
    if data.len() != w * h * channels {
        return Err(SplatError::Config(format!(
            "dump buffer is {} values, expected {}x{}x{}",
            data.len(),
            w,
            h,
            channels
        )));
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(FLOAT_DUMP_MAGIC)?;
    for v in [w as u32, h as u32, channels as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for ch in 0..channels {
        for p in 0..w * h {
            out.write_all(&(data[p * channels + ch] as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_f32_dump(path: &Path) -> Result<(Vec<f64>, usize, usize, usize), SplatError> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if &magic != FLOAT_DUMP_MAGIC {
        return Err(parse_err(path, 1, "bad float dump magic"));
    }
    let mut dims = [0u32; 3];
    for d in &mut dims {
        let mut b = [0u8; 4];
        reader.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b);
    }
    let (w, h, channels) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    if body.len() != w * h * channels * 4 {
        return Err(parse_err(
            path,
            1,
            format!(
                "dump body is {} bytes, expected {}",
                body.len(),
                w * h * channels * 4
            ),
        ));
    }
    let mut data = vec![0.0; w * h * channels];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let ch = i / (w * h);
        let p = i % (w * h);
        data[p * channels + ch] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    Ok((data, w, h, channels))
}

/// Everything needed to resume a scene fit bit-exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub scene: Vec<Primitive3D>,
    pub state: TrainState,
    pub optim: OptimConfig,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), SplatError> {
    let json = serde_json::to_string_pretty(ckpt)
        .map_err(|e| SplatError::Numerical(format!("checkpoint encode failed: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, SplatError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_prim(rng: &mut ChaCha8Rng) -> Primitive3D {
        let mut v = |s: f64| s * (2.0 * rng.random::<f64>() - 1.0);
        Primitive3D {
            mu: Vector3::new(v(5.0), v(5.0), v(5.0)),
            quat: Vector4::new(v(1.0), v(1.0), v(1.0), v(1.0)),
            log_scale: Vector3::new(v(3.0), v(3.0), v(3.0)),
            skew: SkewLatent {
                mag_raw: v(10.0),
                dir_raw: Vector3::new(v(2.0), v(2.0), v(2.0)),
            },
            opacity_raw: v(2.0),
            color: Vector3::new(v(1.0), v(1.0), v(1.0)),
        }
    }

    fn bits(p: &Primitive3D) -> Vec<u64> {
        record_of(p).iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn scene_round_trip_text_and_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dir = std::env::temp_dir();
        for format in [SceneFormat::Text, SceneFormat::Binary] {
            let prims: Vec<Primitive3D> = (0..32).map(|_| random_prim(&mut rng)).collect();
            let path = dir.join(format!("scene_rt_{format:?}.txt"));
            write_scene(&path, &prims, format).unwrap();
            let back = read_scene(&path).unwrap();
            assert_eq!(back.len(), prims.len());
            for (a, b) in prims.iter().zip(&back) {
                assert_eq!(bits(a), bits(b));
            }
            fs::remove_file(&path).unwrap();
        }
    }

    #[test]
    fn corrupt_scene_headers_rejected_with_line() {
        let dir = std::env::temp_dir();
        let path = dir.join("scene_bad_header.txt");
        fs::write(&path, "not a scene\nn 0\n").unwrap();
        match read_scene(&path) {
            Err(SplatError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(
            &path,
            format!("{SCENE_MAGIC} text\nn 2\n0 0 0 1 0 0 0 0 0 0 0 1 0 0 0 0.5 0.5 0.5\n"),
        )
        .unwrap();
        match read_scene(&path) {
            Err(SplatError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected truncation error, got {other:?}"),
        }
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn camera_round_trip() {
        let cam = CameraModel::look_at(
            Vector3::new(1.0, 2.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            80.0,
            80.0,
            64,
            48,
            CameraMode::Pinhole,
        )
        .unwrap();
        let path = std::env::temp_dir().join("cams_rt.txt");
        write_cameras(&path, &[cam.clone()]).unwrap();
        let back = read_cameras(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].world_to_view, cam.world_to_view);
        assert_eq!(back[0].fx.to_bits(), cam.fx.to_bits());
        assert_eq!((back[0].width, back[0].height), (64, 48));
        fs::remove_file(&path).unwrap();

        let bad = std::env::temp_dir().join("cams_bad.txt");
        fs::write(&bad, "# ok\npinhole 1 2 3\n").unwrap();
        match read_cameras(&bad) {
            Err(SplatError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::remove_file(&bad).unwrap();
    }

    #[test]
    fn float_dump_round_trip() {
        let (w, h, c) = (5, 4, 3);
        let data: Vec<f64> = (0..w * h * c).map(|i| i as f64 / 7.0).collect();
        let path = std::env::temp_dir().join("dump_rt.f32");
        write_f32_dump(&path, &data, w, h, c).unwrap();
        let (back, bw, bh, bc) = read_f32_dump(&path).unwrap();
        assert_eq!((bw, bh, bc), (w, h, c));
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(*a as f32, *b as f32);
        }
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scene: Vec<Primitive3D> = (0..4).map(|_| random_prim(&mut rng)).collect();
        let mut state = TrainState::new(4, 99);
        state.iter = 123;
        state.quat.m[0] = 0.125 + 1e-17;
        let ckpt = Checkpoint {
            scene,
            state,
            optim: OptimConfig::default(),
        };
        let path = std::env::temp_dir().join("ckpt_rt.json");
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.state, ckpt.state);
        for (a, b) in ckpt.scene.iter().zip(&back.scene) {
            assert_eq!(bits(a), bits(b));
        }
        fs::remove_file(&path).unwrap();
    }
}
