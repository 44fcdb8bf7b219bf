//! Versioned flat binary checkpoints for [`TinyLearnedDenoiser`].
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic  b"CODNCKPT"
//! u32    version (1)
//! u64    frame_len, window, cond_dim, identifier_dim, hidden,
//!        time_features, schedule_steps, attention, identifier_count
//! f64    betas[schedule_steps], data_scale
//! f64    parameter arrays in LearnedParams::slices order
//! f64    drop_probability, identifiers[identifier_count x identifier_dim]
//! ```
//!
//! `identifier_dim` equals `cond_dim` when identifiers are stored and 0
//! otherwise.

use std::path::Path;

use ndarray::Array2;

use super::learned::{LearnedConfig, LearnedParams, TinyLearnedDenoiser};
use super::AttentionMode;
use crate::conditions::ClipIdentifiers;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

pub const MAGIC: &[u8; 8] = b"CODNCKPT";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(
    model: &TinyLearnedDenoiser,
    identifiers: Option<&ClipIdentifiers>,
) -> Result<Vec<u8>> {
    let cfg = model.config();
    if let Some(ids) = identifiers {
        if ids.dim() != cfg.cond_dim {
            return Err(Error::Dimension {
                what: "clip identifier",
                expected: cfg.cond_dim,
                found: ids.dim(),
            });
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = [
        cfg.frame_len,
        cfg.window,
        cfg.cond_dim,
        identifiers.map_or(0, |i| i.dim()),
        cfg.hidden,
        cfg.time_features,
        model.schedule().num_steps(),
        match cfg.attention {
            AttentionMode::Bidirectional => 0,
            AttentionMode::SparseCausal => 1,
        },
        identifiers.map_or(0, |i| i.clip_count()),
    ];
    for h in header {
        out.extend_from_slice(&(h as u64).to_le_bytes());
    }
    let mut put = |vals: &[f64]| {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    put(model.schedule().betas());
    put(&[cfg.data_scale]);
    for s in model.params().slices() {
        put(s);
    }
    if let Some(ids) = identifiers {
        put(&[ids.drop_probability()]);
        put(ids.vectors().as_slice().expect("contiguous"));
    } else {
        put(&[0.0]);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint("header value too large".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint("array length overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TinyLearnedDenoiser, Option<ClipIdentifiers>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let frame_len = r.u64()?;
    let window = r.u64()?;
    let cond_dim = r.u64()?;
    let identifier_dim = r.u64()?;
    let hidden = r.u64()?;
    let time_features = r.u64()?;
    let steps = r.u64()?;
    let attention = match r.u64()? {
        0 => AttentionMode::Bidirectional,
        1 => AttentionMode::SparseCausal,
        other => return Err(Error::Checkpoint(format!("unknown attention mode {other}"))),
    };
    let identifier_count = r.u64()?;
    let betas = r.f64s(steps)?;
    let data_scale = r.f64s(1)?[0];
    let config = LearnedConfig {
        window,
        frame_len,
        cond_dim,
        hidden,
        time_features,
        attention,
        data_scale,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
    if identifier_count > 0 && identifier_dim != cond_dim {
        return Err(Error::Checkpoint(
            "identifier dimension differs from condition dimension".into(),
        ));
    }
    let schedule = NoiseSchedule::from_betas(betas)?;
    let mut params = LearnedParams::zeros(&config);
    for s in params.slices_mut() {
        let vals = r.f64s(s.len())?;
        s.copy_from_slice(&vals);
    }
    let drop = r.f64s(1)?[0];
    let identifiers = if identifier_count > 0 {
        let vals = r.f64s(identifier_count * identifier_dim)?;
        let vectors = Array2::from_shape_vec((identifier_count, identifier_dim), vals)
            .expect("length checked");
        Some(ClipIdentifiers::new(vectors, drop)?)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let model = TinyLearnedDenoiser::from_parts(config, schedule, params)?;
    Ok((model, identifiers))
}

pub fn save_checkpoint(
    path: &Path,
    model: &TinyLearnedDenoiser,
    identifiers: Option<&ClipIdentifiers>,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, identifiers)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TinyLearnedDenoiser, Option<ClipIdentifiers>)> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TinyLearnedDenoiser {
        let mut cfg = LearnedConfig::new(4, 6, 3);
        cfg.hidden = 5;
        cfg.time_features = 4;
        cfg.data_scale = 0.4;
        let schedule = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let mut m = TinyLearnedDenoiser::new(cfg, schedule, 11).unwrap();
        m.params_mut().b_out[1] = 0.25;
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let ids = ClipIdentifiers::random(3, 3, 0.5, 2)
            .with_drop_probability(0.3)
            .unwrap();
        let bytes = encode_checkpoint(&m, Some(&ids)).unwrap();
        let (back, back_ids) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        assert_eq!(back.schedule().betas(), m.schedule().betas());
        assert_eq!(back_ids.unwrap(), ids);

        let (_, none) = decode_checkpoint(&encode_checkpoint(&m, None).unwrap()).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn rejects_bad_version_magic_and_truncation() {
        let bytes = encode_checkpoint(&model(), None).unwrap();
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(
            decode_checkpoint(&wrong_version),
            Err(Error::Checkpoint(_))
        ));
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(decode_checkpoint(&wrong_magic).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(decode_checkpoint(&trailing).is_err());
    }
}
