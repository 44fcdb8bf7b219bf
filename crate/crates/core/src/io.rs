//! Raw tensor files and grayscale frame dumps.
//!
//! A tensor file is one header line of JSON, for example
//! `{"dims":[64,16,16],"dtype":"f64","endian":"little"}`, followed by the
//! values as little-endian `f64` in row-major order. The first dimension is
//! the frame count.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::LongSequence;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dims: Vec<usize>,
    pub dtype: String,
    pub endian: String,
}

pub fn write_tensor<W: Write>(mut out: W, seq: &LongSequence) -> Result<()> {
    let mut dims = vec![seq.num_frames()];
    dims.extend_from_slice(seq.frame_shape());
    let header = TensorHeader {
        dims,
        dtype: "f64".into(),
        endian: "little".into(),
    };
    let line = serde_json::to_string(&header).map_err(|e| Error::Manifest(e.to_string()))?;
    writeln!(out, "{line}")?;
    let mut buf = Vec::with_capacity(seq.frames().len() * 8);
    for v in seq.frames().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(input: R) -> Result<LongSequence> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: TensorHeader = serde_json::from_str(line.trim_end()).map_err(|e| Error::Parse {
        line: 1,
        message: format!("tensor header: {e}"),
    })?;
    if header.dtype != "f64" || header.endian != "little" {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "unsupported dtype {} / endian {}",
                header.dtype, header.endian
            ),
        });
    }
    if header.dims.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            message: "need at least frame and feature dimensions".into(),
        });
    }
    let frames = header.dims[0];
    let shape = header.dims[1..].to_vec();
    let features: usize = shape.iter().product();
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() != frames * features * 8 {
        return Err(Error::shape(&[frames * features * 8], &[bytes.len()]));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let data = Array2::from_shape_vec((frames, features), values).expect("length checked");
    LongSequence::new(data, shape)
}

pub fn save_tensor(path: &Path, seq: &LongSequence) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    write_tensor(&mut out, seq)?;
    out.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<LongSequence> {
    read_tensor(std::fs::File::open(path)?)
}

/// Binary PGM per frame, scaled by the global min/max of the sequence.
/// Requires a two-dimensional frame shape `[height, width]`.
pub fn write_pgm_frames(dir: &Path, seq: &LongSequence, prefix: &str) -> Result<Vec<PathBuf>> {
    let [height, width] = match seq.frame_shape() {
        [h, w] => [*h, *w],
        other => {
            return Err(Error::Dimension {
                what: "grayscale frame rank",
                expected: 2,
                found: other.len(),
            })
        }
    };
    std::fs::create_dir_all(dir)?;
    let (lo, hi) = seq
        .frames()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut paths = Vec::new();
    for (j, frame) in seq.frames().rows().into_iter().enumerate() {
        let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
        bytes.extend(
            frame
                .iter()
                .map(|&v| (255.0 * (v - lo) / range).round().clamp(0.0, 255.0) as u8),
        );
        let path = dir.join(format!("{prefix}_{j:04}.pgm"));
        std::fs::write(&path, bytes)?;
        paths.push(path);
    }
    Ok(paths)
}
