//! Clip I/O: PPM frame sequences and raw tensor dumps with a JSON sidecar.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

/// Write a (T, H, W, 3) clip in [0,1] as binary PPM frames `frame_0000.ppm`…
pub fn write_ppm_frames(dir: &Path, video: &Tensor<f32>) -> Result<Vec<std::path::PathBuf>> {
    if video.shape().len() != 4 || video.shape()[3] != 3 {
        return Err(Error::invalid(format!(
            "ppm writer expects (T,H,W,3), got {:?}",
            video.shape()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let (t, h, w) = (video.shape()[0], video.shape()[1], video.shape()[2]);
    let mut paths = Vec::with_capacity(t);
    for f in 0..t {
        let path = dir.join(format!("frame_{f:04}.ppm"));
        let mut out = Vec::with_capacity(h * w * 3 + 32);
        out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
        let base = f * h * w * 3;
        for &v in &video.data()[base..base + h * w * 3] {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        std::fs::write(&path, out)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn read_ppm_frames(dir: &Path) -> Result<Tensor<f32>> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "ppm").unwrap_or(false))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::invalid(format!("no ppm frames in {dir:?}")));
    }
    let mut frames = Vec::new();
    let mut dims = (0usize, 0usize);
    for path in &entries {
        let bytes = std::fs::read(path)?;
        let (w, h, data) = parse_ppm(&bytes)
            .ok_or_else(|| Error::invalid(format!("malformed ppm {path:?}")))?;
        dims = (h, w);
        frames.extend(data.iter().map(|&b| b as f32 / 255.0));
    }
    Tensor::from_vec(&[entries.len(), dims.0, dims.1, 3], frames)
}

fn parse_ppm(bytes: &[u8]) -> Option<(usize, usize, &[u8])> {
    // header is four whitespace-delimited ascii fields: P6 W H MAX
    let mut fields: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut pos = 0usize;
    for (i, &b) in bytes.iter().enumerate() {
        if b.is_ascii_whitespace() {
            if !current.is_empty() {
                fields.push(std::mem::take(&mut current));
                if fields.len() == 4 {
                    pos = i + 1;
                    break;
                }
            }
        } else {
            current.push(b as char);
        }
    }
    if fields.len() != 4 || fields[0] != "P6" {
        return None;
    }
    let w: usize = fields[1].parse().ok()?;
    let h: usize = fields[2].parse().ok()?;
    let data = &bytes[pos..];
    if data.len() < w * h * 3 {
        return None;
    }
    Some((w, h, &data[..w * h * 3]))
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: Vec<usize>,
    dtype: DType,
}

/// Raw little-endian tensor dump alongside a `.json` sidecar with shape and
/// dtype.
pub fn write_raw<E: Scalar>(path: &Path, tensor: &Tensor<E>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for &v in tensor.data() {
        match E::DTYPE {
            DType::F32 => f.write_all(&(v.to_f64() as f32).to_le_bytes())?,
            DType::F64 => f.write_all(&v.to_f64().to_le_bytes())?,
        }
    }
    f.flush()?;
    let sidecar = Sidecar {
        shape: tensor.shape().to_vec(),
        dtype: E::DTYPE,
    };
    std::fs::write(
        path.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn read_raw<E: Scalar>(path: &Path) -> Result<Tensor<E>> {
    let sidecar: Sidecar =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
    if sidecar.dtype != E::DTYPE {
        return Err(Error::invalid(format!(
            "dtype mismatch: file holds {}, requested {}",
            sidecar.dtype,
            E::DTYPE
        )));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let width = match sidecar.dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let n: usize = sidecar.shape.iter().product();
    if bytes.len() != n * width {
        return Err(Error::invalid(format!(
            "raw dump {path:?} has {} bytes, expected {}",
            bytes.len(),
            n * width
        )));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(width) {
        let v = match sidecar.dtype {
            DType::F32 => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
            DType::F64 => f64::from_le_bytes(chunk.try_into().unwrap()),
        };
        data.push(E::from_f64(v));
    }
    Tensor::from_vec(&sidecar.shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn raw_roundtrip_is_bit_exact() {
        let mut rng = Rng::seed_from(17);
        let t = Tensor::<f32>::randn(&[2, 3, 4, 3], 1.0, &mut rng);
        let dir = std::env::temp_dir().join("vidflow_io_test");
        let path = dir.join("clip.bin");
        write_raw(&path, &t).unwrap();
        let back: Tensor<f32> = read_raw(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn ppm_roundtrip_within_quantization() {
        let mut rng = Rng::seed_from(18);
        let t = Tensor::<f32>::rand_uniform(&[3, 8, 8, 3], 0.0, 1.0, &mut rng);
        let dir = std::env::temp_dir().join("vidflow_ppm_test");
        let _ = std::fs::remove_dir_all(&dir);
        write_ppm_frames(&dir, &t).unwrap();
        let back = read_ppm_frames(&dir).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
    }
}
