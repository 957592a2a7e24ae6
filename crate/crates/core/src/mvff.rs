//! Binary feature files.
//!
//! Layout (little-endian): `b"MVFF"`, version `u32 = 1`, then `T L S D` as
//! `u32`, `T*L*S*D` `f32` values ordered `[frame][layer][token][channel]`, a
//! `u8` label flag and, when the flag is 1, `T` `u32` labels followed by `T`
//! `f32` progression values. Timestamps are implicitly `0..T`.

use std::fs;
use std::path::Path;

use crate::error::io_err;
use crate::features::{PhaseAnnotations, TokenGrid, VideoFeatures};
use crate::{Error, FormatError, Result};

pub const MVFF_MAGIC: [u8; 4] = *b"MVFF";
pub const MVFF_VERSION: u32 = 1;
pub const MVFF_HEADER_LEN: usize = 24;

/// Little-endian cursor shared by the binary readers.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| FormatError::Malformed("size overflow".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn u32s(&mut self, n: usize) -> Result<Vec<u32>, FormatError> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| FormatError::Malformed("size overflow".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn finish(self) -> Result<(), FormatError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

fn dim(x: usize) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Features(format!("dimension {x} exceeds u32")))
}

/// Serializes `features`. Timestamps are not stored; see the module docs.
pub fn encode_mvff(features: &VideoFeatures) -> Result<Vec<u8>> {
    let (t, l, s, d) = (
        features.num_frames(),
        features.num_layers(),
        features.num_tokens(),
        features.channels(),
    );
    if features
        .timestamps()
        .iter()
        .enumerate()
        .any(|(i, &ts)| ts as usize != i)
    {
        return Err(Error::Features(
            "version 1 files only store timestamps 0..T".into(),
        ));
    }
    let mut out = Vec::with_capacity(MVFF_HEADER_LEN + 4 * t * l * s * d + 1 + 8 * t);
    out.extend_from_slice(&MVFF_MAGIC);
    for v in [MVFF_VERSION, dim(t)?, dim(l)?, dim(s)?, dim(d)?] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for frame in 0..t {
        for grid in features.layers() {
            for &x in grid.frame(frame) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    match features.annotations() {
        None => out.push(0),
        Some(a) => {
            out.push(1);
            for &y in &a.labels {
                out.extend_from_slice(&y.to_le_bytes());
            }
            for &p in &a.progression {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_mvff(bytes: &[u8], video_id: &str) -> Result<VideoFeatures> {
    let mut r = Reader::new(bytes);
    r.magic(MVFF_MAGIC)?;
    let version = r.u32()?;
    if version != MVFF_VERSION {
        return Err(FormatError::Version(version).into());
    }
    let [t, l, s, d] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|x| x as usize);
    if t == 0 || l == 0 || s == 0 || d == 0 {
        return Err(FormatError::Malformed(format!("zero dimension in {t}x{l}x{s}x{d}")).into());
    }
    let per_frame = s * d;
    let n = t
        .checked_mul(l)
        .and_then(|x| x.checked_mul(per_frame))
        .ok_or_else(|| FormatError::Malformed("size overflow".into()))?;
    let flat = r.f32s(n)?;
    let mut layers = vec![Vec::with_capacity(t * per_frame); l];
    for (i, chunk) in flat.chunks_exact(per_frame).enumerate() {
        layers[i % l].extend_from_slice(chunk);
    }
    let annotations = match r.u8()? {
        0 => None,
        1 => {
            let labels = r.u32s(t)?;
            let progression = r.f32s(t)?;
            Some(PhaseAnnotations {
                labels,
                progression,
            })
        }
        flag => return Err(FormatError::Malformed(format!("label flag {flag}")).into()),
    };
    r.finish()?;
    let grids = layers
        .into_iter()
        .map(|data| TokenGrid::new(t, s, d, data))
        .collect::<Result<Vec<_>>>()?;
    VideoFeatures::with_frame_timestamps(video_id, grids, annotations)
}

pub fn write_mvff(features: &VideoFeatures, path: &Path) -> Result<()> {
    fs::write(path, encode_mvff(features)?).map_err(io_err(path))
}

/// Loads a feature file; the video id is the file stem.
pub fn load_mvff(path: &Path) -> Result<VideoFeatures> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_mvff(&bytes, &id)
}
