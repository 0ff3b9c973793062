//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A decoded 8-bit image, interleaved when `channels == 3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            what: self.what.to_string(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) -> Result<()> {
        let start = self.pos;
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(self.err("unexpected end of header")),
            }
        }
        if self.pos == start {
            return Err(self.err("expected whitespace"));
        }
        Ok(())
    }

    fn number(&mut self) -> Result<usize> {
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected a decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                what: self.what.to_string(),
                offset: start,
                msg: "number out of range".into(),
            })
    }
}

pub fn decode(bytes: &[u8], what: &str) -> Result<Pnm> {
    let mut c = Cursor { bytes, pos: 0, what };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(c.err("bad magic number, expected P5 or P6")),
    };
    c.pos = 2;
    c.skip_space()?;
    let width = c.number()?;
    c.skip_space()?;
    let height = c.number()?;
    c.skip_space()?;
    let max_at = c.pos;
    let maxval = c.number()?;
    if maxval != 255 {
        c.pos = max_at;
        return Err(c.err(format!("maxval {maxval} unsupported, only 255")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.err("expected a single whitespace byte before the raster")),
    }
    if width == 0 || height == 0 {
        return Err(c.err("zero image extent"));
    }
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| c.err("image extent overflows"))?;
    let payload = &bytes[c.pos..];
    if payload.len() < n {
        c.pos = bytes.len();
        return Err(c.err(format!("truncated raster: {} of {n} bytes", payload.len())));
    }
    if payload.len() > n {
        c.pos += n;
        return Err(c.err("trailing bytes after raster"));
    }
    Ok(Pnm {
        channels,
        width,
        height,
        data: payload.to_vec(),
    })
}

pub fn encode(img: &Pnm) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read(path: &Path) -> Result<Pnm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

pub fn write(path: &Path, img: &Pnm) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

/// `round(255·v)` with halves rounded up, clamped to `[0, 255]`.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Planar `[C×H×W]` tensor in `[0, 1]`.
pub fn to_tensor<T: Real>(img: &Pnm) -> Tensor<T> {
    let (c, hw) = (img.channels, img.width * img.height);
    let mut data = vec![T::zero(); c * hw];
    for (i, px) in img.data.chunks(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * hw + i] = T::c(v as f64 / 255.0);
        }
    }
    Tensor::new(&[c, img.height, img.width], data).expect("raster size matches header")
}

pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Pnm> {
    let s = t.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::shape("save_image", format!("{s:?}: expected [1|3, H, W]")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut data = vec![0u8; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            data[i * c + ch] = quantize(t.data()[ch * h * w + i].f64());
        }
    }
    Ok(Pnm {
        channels: c,
        width: w,
        height: h,
        data,
    })
}

pub fn load_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    Ok(to_tensor(&read(path)?))
}

pub fn save_image<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write(path, &from_tensor(t)?)
}

/// Single-channel 8-bit map, for instance labels and heatmaps.
pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Pnm {
    Pnm {
        channels: 1,
        width,
        height,
        data,
    }
}
