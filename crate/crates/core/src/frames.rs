//! 8-bit binary PPM (`P6`, RGB) and PGM (`P5`, gray) frames and numbered
//! frame sequences in a directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::resample::frame_dims;
use crate::tensor::Tensor;

fn header_tokens(bytes: &[u8]) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format("PNM", "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    Ok((tokens, i + 1))
}

/// Decodes a `P6` or `P5` image into a `C×H×W` tensor in [0, 1].
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let (tokens, start) = header_tokens(bytes)?;
    let channels = match tokens[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::format("PNM", format!("unsupported magic `{}`", m))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format("PNM", format!("bad header field `{}`", s)));
    let (w, h, max) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if max != 255 {
        return Err(Error::format("PNM", format!("only 8-bit images are supported, maxval {}", max)));
    }
    let n = w * h * channels;
    let raster = bytes
        .get(start..)
        .filter(|r| r.len() == n)
        .ok_or_else(|| Error::format("PNM", format!("expected {} raster bytes", n)))?;
    let plane = w * h;
    Tensor::new(
        vec![channels, h, w],
        (0..n)
            .map(|i| {
                let (c, p) = (i / plane, i % plane);
                raster[p * channels + c] as f64 / 255.0
            })
            .collect(),
    )
}

/// Encodes a 1- or 3-channel `C×H×W` image, clipping to [0, 1] and rounding
/// to the nearest 8-bit level.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *image.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        ref s => return Err(Error::shape("encode_pnm", format!("expected 1×H×W or 3×H×W, got {:?}", s))),
    };
    let mut out = format!("{}\n{} {}\n255\n", if c == 3 { "P6" } else { "P5" }, w, h).into_bytes();
    let plane = h * w;
    let d = image.data();
    for p in 0..plane {
        for ch in 0..c {
            out.push((d[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_pnm(&fs::read(path)?).map_err(|e| Error::format("frame", format!("{}: {}", path.display(), e)))
}

pub fn write_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    fs::write(path, encode_pnm(image)?)?;
    Ok(())
}

/// Frame files of a directory (`.ppm` / `.pgm`), in name order.
pub fn list_frames(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every frame of `dir` into a `T×C×H×W` tensor.
pub fn read_sequence(dir: impl AsRef<Path>) -> Result<Tensor> {
    let dir = dir.as_ref();
    let files = list_frames(dir)?;
    if files.is_empty() {
        return Err(Error::invalid(format!("no .ppm/.pgm frames in {}", dir.display())));
    }
    let frames = files.iter().map(read_image).collect::<Result<Vec<_>>>()?;
    let first = frames[0].shape().to_vec();
    if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != first.as_slice()) {
        return Err(Error::invalid(format!(
            "{} is {:?} but {} is {:?}",
            files[i].display(),
            f.shape(),
            files[0].display(),
            first
        )));
    }
    let mut shape = vec![frames.len()];
    shape.extend(&first);
    Tensor::new(shape, frames.into_iter().flat_map(Tensor::into_data).collect())
}

/// Writes `T×C×H×W` frames as `00000.ppm`, `00001.ppm`, … (`.pgm` for one
/// channel).
pub fn write_sequence(dir: impl AsRef<Path>, frames: &Tensor) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let [t, c, h, w] = frame_dims(frames.shape())?;
    fs::create_dir_all(dir)?;
    let ext = if c == 1 { "pgm" } else { "ppm" };
    let per = c * h * w;
    (0..t)
        .map(|i| {
            let path = dir.join(format!("{:05}.{}", i, ext));
            write_image(&path, &Tensor::new(vec![c, h, w], frames.data()[i * per..(i + 1) * per].to_vec())?)?;
            Ok(path)
        })
        .collect()
}
