//! Binary PGM (P5) reading and writing.
//!
//! The writer always emits the canonical header `P5\n<w> <h>\n255\n`
//! followed by the raw pixel bytes, so output files are byte-reproducible.
//! The reader is tolerant: any whitespace between header tokens and `#`
//! comments up to end of line are accepted. Only maxval 255 is supported.

use std::fs;
use std::path::Path;

use crate::edge::GrayImage;
use crate::{Error, Result};

/// Serialize an image to PGM bytes.
pub fn pgm_bytes(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    fs::write(path, pgm_bytes(img)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_pgm(&bytes)
}

/// Parse PGM bytes. Errors report the byte offset at which parsing failed.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::parse(0, format!("expected magic 'P5', found '{found}'")));
    }
    let mut pos = 2usize;

    let width = next_field(bytes, &mut pos, "width")?;
    let height = next_field(bytes, &mut pos, "height")?;
    skip_separators(bytes, &mut pos);
    let maxval_at = pos;
    let maxval = next_field(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::parse(maxval_at, format!("unsupported maxval {maxval}, want 255")));
    }

    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::parse(pos, "expected single whitespace before pixel data"));
    }
    pos += 1;

    let need = width
        .checked_mul(height)
        .ok_or_else(|| Error::parse(2, format!("image dimensions {width}x{height} overflow")))?;
    let have = bytes.len() - pos;
    if have < need {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated pixel data: need {need} bytes, have {have}"),
        ));
    }
    GrayImage::new(width, height, bytes[pos..pos + need].to_vec())
}

/// Read the next whitespace-delimited decimal header field.
fn next_field(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    skip_separators(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::parse(start, format!("missing {what}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            let tok = String::from_utf8_lossy(&bytes[start..*pos]).into_owned();
            Error::parse(start, format!("bad {what} '{tok}'"))
        })
}

/// Advance past whitespace and `#` comments.
fn skip_separators(bytes: &[u8], pos: &mut usize) {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            return;
        }
    }
}
