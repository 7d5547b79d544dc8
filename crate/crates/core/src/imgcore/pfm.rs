//! Portable Float Map.
//!
//! Header: `Pf` (gray) or `PF` (RGB), then `width height`, then a scale
//! whose sign gives the byte order (negative means little-endian). The
//! payload is 32-bit floats, channel-interleaved, rows bottom to top.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imgcore::{Image, Precision};

/// Serializes as little-endian (`-1.0` scale line).
pub fn encode_pfm(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Channels(c)),
    };
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * ch * 4);
    let data = img.data();
    for y in (0..h).rev() {
        for v in &data[y * w * ch..(y + 1) * w * ch] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    little_endian: bool,
    payload_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Pfm("truncated header".into()));
        }
        let token = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::Pfm("non-ascii header".into()))?;
        tokens.push(token.to_owned());
    }
    // exactly one whitespace byte separates the scale from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Pfm("missing separator after scale".into()));
    }
    let channels = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::Pfm(format!("bad magic {other:?}"))),
    };
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Pfm(format!("bad dimension {s:?}")))
    };
    let width = parse_dim(&tokens[1])?;
    let height = parse_dim(&tokens[2])?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::Pfm(format!("bad scale {:?}", tokens[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Pfm(format!("bad scale {scale}")));
    }
    Ok(Header {
        channels,
        width,
        height,
        little_endian: scale < 0.0,
        payload_start: pos + 1,
    })
}

/// Parses a PFM. The result is tagged single precision.
pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    let hd = parse_header(bytes)?;
    let count = hd.width * hd.height * hd.channels;
    let payload = &bytes[hd.payload_start..];
    if payload.len() != count * 4 {
        return Err(Error::Pfm(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            count * 4
        )));
    }
    let row_len = hd.width * hd.channels;
    let mut data = vec![0.0; count];
    for (file_row, chunk) in payload.chunks_exact(row_len * 4).enumerate() {
        let y = hd.height - 1 - file_row;
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let raw = [b[0], b[1], b[2], b[3]];
            let v = if hd.little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            data[y * row_len + i] = v as f64;
        }
    }
    Image::new(hd.height, hd.width, hd.channels, data, Precision::Single)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image> {
    decode_pfm(&fs::read(path)?)
}

pub fn write_pfm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    fs::write(path, encode_pfm(img)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_rows_bottom_to_top() {
        // hand-built fixture: top row (1, 2), bottom row (3, 4)
        let img = Image::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0], Precision::Single).unwrap();
        let bytes = encode_pfm(&img).unwrap();
        let mut expected = b"Pf\n2 2\n-1.0\n".to_vec();
        for v in [3.0f32, 4.0, 1.0, 2.0] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
        assert_eq!(decode_pfm(&bytes).unwrap(), img);
    }

    #[test]
    fn big_endian_payload_is_honored() {
        let mut bytes = b"Pf\n1 2\n1.0\n".to_vec();
        bytes.extend_from_slice(&0.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_be_bytes());
        let img = decode_pfm(&bytes).unwrap();
        assert_eq!(img.get(0, 0, 0), -2.0);
        assert_eq!(img.get(1, 0, 0), 0.5);
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(decode_pfm(b"P6\n1 1\n-1.0\n\0\0\0\0"), Err(Error::Pfm(_))));
        assert!(matches!(decode_pfm(b"Pf\n1 x\n-1.0\n\0\0\0\0"), Err(Error::Pfm(_))));
        assert!(matches!(decode_pfm(b"Pf\n1 1\n0\n\0\0\0\0"), Err(Error::Pfm(_))));
        assert!(matches!(decode_pfm(b"Pf\n2 2\n-1.0\n\0\0\0\0"), Err(Error::Pfm(_))));
        assert!(matches!(decode_pfm(b"Pf\n2 2"), Err(Error::Pfm(_))));
    }

    #[test]
    fn color_magic() {
        let img = Image::from_fn(3, 2, 3, |y, x, c| (y * 6 + x * 3 + c) as f64).unwrap();
        let bytes = encode_pfm(&img).unwrap();
        assert!(bytes.starts_with(b"PF\n2 3\n-1.0\n"));
        assert_eq!(decode_pfm(&bytes).unwrap().data(), img.data());
    }
}
