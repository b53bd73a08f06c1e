//! Binary PGM (Netpbm "P5", maxval 255) reading and writing.
//!
//! The only on-disk image format of the toolkit: dependency-free and
//! bit-exact. Parse failures name the offending byte offset.

use std::fmt;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

#[derive(Debug)]
pub enum PgmError {
    Io(io::Error),
    Parse { offset: usize, reason: String },
}

impl fmt::Display for PgmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PgmError::Io(e) => write!(f, "pgm i/o error: {e}"),
            PgmError::Parse { offset, reason } => {
                write!(f, "pgm parse error at byte {offset}: {reason}")
            }
        }
    }
}

impl std::error::Error for PgmError {}

impl From<io::Error> for PgmError {
    fn from(e: io::Error) -> Self {
        PgmError::Io(e)
    }
}

fn parse_fail(offset: usize, reason: impl Into<String>) -> PgmError {
    PgmError::Parse { offset, reason: reason.into() }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    /// Skips whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) -> Result<(), PgmError> {
        let mut progressed = false;
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => {
                    self.pos += 1;
                    progressed = true;
                }
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                    progressed = true;
                }
                _ => break,
            }
        }
        if !progressed {
            return Err(parse_fail(self.pos, "expected whitespace separator"));
        }
        Ok(())
    }

    fn read_number(&mut self, what: &str) -> Result<usize, PgmError> {
        let start = self.pos;
        let mut value: usize = 0;
        let mut digits = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .ok_or_else(|| parse_fail(start, format!("{what} overflows")))?;
            digits += 1;
            self.pos += 1;
        }
        if digits == 0 {
            return Err(parse_fail(self.pos, format!("expected decimal {what}")));
        }
        Ok(value)
    }
}

/// Parses raw PGM bytes into `(height, width, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), PgmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let found = bytes.get(..2).map(String::from_utf8_lossy).unwrap_or_default();
        return Err(parse_fail(0, format!("expected magic \"P5\", found {found:?}")));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    cur.skip_separators()?;
    let width_off = cur.pos;
    let width = cur.read_number("width")?;
    cur.skip_separators()?;
    let height_off = cur.pos;
    let height = cur.read_number("height")?;
    cur.skip_separators()?;
    let maxval_off = cur.pos;
    let maxval = cur.read_number("maxval")?;
    if width == 0 {
        return Err(parse_fail(width_off, "width must be positive"));
    }
    if height == 0 {
        return Err(parse_fail(height_off, "height must be positive"));
    }
    if maxval != 255 {
        return Err(parse_fail(maxval_off, format!("maxval must be 255, found {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(parse_fail(cur.pos, "expected single whitespace before payload")),
    }
    let expected = width * height;
    let available = bytes.len() - cur.pos;
    if available < expected {
        return Err(parse_fail(
            bytes.len(),
            format!("payload truncated: expected {expected} bytes, found {available}"),
        ));
    }
    if available > expected {
        return Err(parse_fail(
            cur.pos + expected,
            format!("trailing data: expected {expected} payload bytes, found {available}"),
        ));
    }
    Ok((height, width, bytes[cur.pos..].to_vec()))
}

/// Loads a PGM file as a `[1, H, W]` tensor with values `byte / 255`.
pub fn load_pgm(path: &Path) -> Result<Tensor, PgmError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (h, w, pixels) = parse_pgm(&bytes)?;
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::new(vec![1, h, w], data).expect("parser checked the element count"))
}

/// Encodes a `[H, W]` or `[1, H, W]` tensor; values are clamped to `[0, 1]`
/// and quantized with round-half-up.
pub fn encode_pgm(tensor: &Tensor) -> Result<Vec<u8>, PgmError> {
    let (h, w) = match *tensor.shape() {
        [h, w] => (h, w),
        [1, h, w] => (h, w),
        ref s => {
            return Err(parse_fail(0, format!("cannot encode tensor of shape {s:?} as pgm")));
        }
    };
    let mut out = Vec::with_capacity(32 + h * w);
    write!(out, "P5\n{w} {h}\n255\n").expect("vec write");
    for &v in tensor.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn save_pgm(tensor: &Tensor, path: &Path) -> Result<(), PgmError> {
    let bytes = encode_pgm(tensor)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}
