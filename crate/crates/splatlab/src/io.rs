//! File formats: PNG for color images, PFM for float maps, a flat binary
//! checkpoint format for named tensors, and line-delimited JSON logs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Result, SplatError};

/// Save an H*W*3 image in [0,1] as 8-bit PNG. Values are clamped.
pub fn save_png_rgb(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    if data.len() != width * height * 3 {
        return Err(SplatError::InvalidInput("png buffer size mismatch".into()));
    }
    let bytes: Vec<u8> =
        data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| SplatError::InvalidInput("png buffer construction failed".into()))?;
    img.save(path)?;
    Ok(())
}

/// Save a single-channel map in [0,1] as 8-bit grayscale PNG.
pub fn save_png_gray(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    if data.len() != width * height {
        return Err(SplatError::InvalidInput("png buffer size mismatch".into()));
    }
    let bytes: Vec<u8> =
        data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| SplatError::InvalidInput("png buffer construction failed".into()))?;
    img.save(path)?;
    Ok(())
}

/// Load an RGB PNG as H*W*3 floats in [0,1].
pub fn load_png_rgb(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok((w, h, data))
}

/// Write a grayscale PFM ("Pf", little-endian, scale -1.0).
/// PFM stores rows bottom-to-top; `data` is top-to-bottom row-major.
pub fn save_pfm(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    if data.len() != width * height {
        return Err(SplatError::InvalidInput("pfm buffer size mismatch".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "Pf\n{width} {height}\n-1.0\n")?;
    for row in (0..height).rev() {
        for col in 0..width {
            w.write_f32::<LittleEndian>(data[row * width + col])?;
        }
    }
    Ok(())
}

pub fn load_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = String::new();
    for _ in 0..3 {
        let mut line = String::new();
        r.read_line(&mut line)?;
        header.push_str(&line);
    }
    let mut parts = header.split_whitespace();
    let magic = parts.next().unwrap_or("");
    if magic != "Pf" {
        return Err(SplatError::InvalidInput(format!("not a grayscale PFM: magic {magic:?}")));
    }
    let width: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| SplatError::InvalidInput("bad PFM width".into()))?;
    let height: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| SplatError::InvalidInput("bad PFM height".into()))?;
    let scale: f32 = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| SplatError::InvalidInput("bad PFM scale".into()))?;
    if scale >= 0.0 {
        return Err(SplatError::InvalidInput("big-endian PFM not supported".into()));
    }
    let mut data = vec![0.0f32; width * height];
    for row in (0..height).rev() {
        for col in 0..width {
            data[row * width + col] = r.read_f32::<LittleEndian>()?;
        }
    }
    Ok((width, height, data))
}

/// Checkpoint: records of {name len u16 + utf8, dtype u8 (0 = f32),
/// rank u8, shape as u64s, raw little-endian data}, concatenated.
pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        w.write_u16::<LittleEndian>(name_bytes.len() as u16)?;
        w.write_all(name_bytes)?;
        w.write_u8(0)?; // f32
        w.write_u8(t.shape.len() as u8)?;
        for &d in &t.shape {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in &t.data {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    loop {
        let name_len = match r.read_u16::<LittleEndian>() {
            Ok(n) => n as usize,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| SplatError::InvalidInput("checkpoint name not utf8".into()))?;
        let dtype = r.read_u8()?;
        if dtype != 0 {
            return Err(SplatError::InvalidInput(format!("unsupported dtype {dtype}")));
        }
        let rank = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        out.push((name, Tensor::new(shape, data)));
    }
    Ok(out)
}

/// Appends one JSON record per line.
pub struct JsonlWriter {
    file: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlWriter { file: BufWriter::new(File::create(path)?) })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.file, record)?;
        self.file.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn pfm_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.5 + 0.25).collect();
        save_pfm(&path, 4, 3, &data).unwrap();
        let (w, h, back) = load_pfm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, data);
    }

    #[test]
    fn pfm_header_is_little_endian_scale() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        save_pfm(&path, 2, 2, &[0.0; 4]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = String::from_utf8_lossy(&bytes[..12]);
        assert!(header.starts_with("Pf\n2 2\n-1.0"));
    }

    #[test]
    fn png_round_trip_quantized() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        let data: Vec<f32> = (0..2 * 2 * 3).map(|i| i as f32 / 11.0).collect();
        save_png_rgb(&path, 2, 2, &data).unwrap();
        let (w, h, back) = load_png_rgb(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        for (a, b) in back.iter().zip(&data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let tensors = vec![
            ("w1".to_string(), Tensor::new(vec![2, 3], (0..6).map(|i| i as f32).collect())),
            ("b1".to_string(), Tensor::new(vec![3], vec![-1.0, 0.5, 2.0])),
        ];
        save_checkpoint(&path, &tensors).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in tensors.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0, t1);
        }
    }

    #[test]
    fn jsonl_lines() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        {
            let mut w = JsonlWriter::create(&path).unwrap();
            w.write(&serde_json::json!({"iter": 0, "loss": 1.5})).unwrap();
            w.write(&serde_json::json!({"iter": 1, "loss": 1.25})).unwrap();
            w.flush().unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(v["iter"], 1);
    }
}
