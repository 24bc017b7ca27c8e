//! Binary netpbm codecs: 8-bit PGM (P5) and PPM (P6) reading, PGM writing.

use crate::{Error, Result};
use std::fs;
use std::path::Path;

/// A decoded netpbm image; `data` is interleaved RGB when `channels == 3`.
#[derive(Debug, Clone)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Reads a binary P5 (grayscale) or P6 (RGB) file with max value <= 255.
pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|reason| Error::Pnm(format!("{}: {reason}", path.display())))
}

fn decode_pnm(bytes: &[u8]) -> std::result::Result<PnmImage, String> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos).ok_or("missing magic number")?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported magic '{other}' (expected P5 or P6)")),
    };
    let width: usize = parse_header_number(bytes, &mut pos, "width")?;
    let height: usize = parse_header_number(bytes, &mut pos, "height")?;
    let maxval: usize = parse_header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("degenerate dimensions {width}x{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!(
            "unsupported maxval {maxval} (only 8-bit supported)"
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing whitespace before raster data".to_string());
    }
    pos += 1;
    let expected = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(format!(
            "truncated raster: expected {expected} bytes, found {}",
            raster.len()
        ));
    }
    Ok(PnmImage {
        width,
        height,
        channels,
        data: raster[..expected].to_vec(),
    })
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_header_number(
    bytes: &[u8],
    pos: &mut usize,
    what: &str,
) -> std::result::Result<usize, String> {
    let tok = next_token(bytes, pos).ok_or_else(|| format!("missing {what}"))?;
    tok.parse::<usize>()
        .map_err(|_| format!("invalid {what} '{tok}'"))
}

/// Writes an 8-bit binary PGM (P5) file.
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::shape(
            "pgm raster length",
            vec![width * height],
            vec![data.len()],
        ));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_p5_with_comment() {
        let mut bytes = b"P5 # small test image\n# another comment\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (3, 2, 1));
        assert_eq!(img.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn decodes_p6_rgb() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 3));
        assert_eq!(img.data, vec![255, 0, 0, 0, 255, 0]);
    }

    #[test]
    fn rejects_truncated_raster() {
        let mut bytes = b"P5\n4 4\n255\n".to_vec();
        bytes.extend_from_slice(&[0; 10]);
        let err = decode_pnm(&bytes).unwrap_err();
        assert!(err.contains("expected 16"), "{err}");
        assert!(err.contains("found 10"), "{err}");
    }

    #[test]
    fn rejects_16_bit_maxval() {
        let bytes = b"P5\n1 1\n65535\n\0\0".to_vec();
        assert!(decode_pnm(&bytes).unwrap_err().contains("maxval"));
    }

    #[test]
    fn rejects_unknown_magic() {
        let bytes = b"P3\n1 1\n255\n0".to_vec();
        assert!(decode_pnm(&bytes).unwrap_err().contains("magic"));
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let data = vec![0u8, 128, 255, 7, 42, 99];
        write_pgm(&path, 3, 2, &data).unwrap();
        let img = read_pnm(&path).unwrap();
        assert_eq!((img.width, img.height, img.channels), (3, 2, 1));
        assert_eq!(img.data, data);
    }
}
