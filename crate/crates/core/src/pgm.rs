//! Binary PGM (P5, maxval 255) read/write. Masks use 0 = background,
//! 255 = foreground.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub fn write_gray(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_p5(&raw).map_err(|detail| Error::Format { what: "PGM", detail: format!("{}: {detail}", path.display()) })
}

fn parse_p5(raw: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0usize;
    let mut token = |raw: &[u8]| -> std::result::Result<String, String> {
        // skip whitespace and comments
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };
    let magic = token(raw)?;
    if magic != "P5" {
        return Err(format!("expected P5, got {magic}"));
    }
    let width: usize = token(raw)?.parse().map_err(|_| "bad width".to_string())?;
    let height: usize = token(raw)?.parse().map_err(|_| "bad height".to_string())?;
    let maxval: usize = token(raw)?.parse().map_err(|_| "bad maxval".to_string())?;
    if maxval != 255 {
        return Err(format!("only maxval 255 supported, got {maxval}"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height;
    if raw.len() < pos + need {
        return Err(format!("truncated pixel data: need {need}, have {}", raw.len() - pos));
    }
    Ok((width, height, raw[pos..pos + need].to_vec()))
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let pixels: Vec<u8> = mask.bits.iter().map(|b| if *b { 255 } else { 0 }).collect();
    write_gray(path, mask.width, mask.height, &pixels)
}

/// Any nonzero pixel counts as foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let (w, h, px) = read_gray(path)?;
    Ok(BinaryMask::from_bits(w, h, px.iter().map(|p| *p != 0).collect()))
}
