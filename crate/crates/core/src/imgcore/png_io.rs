use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use png::{BitDepth, ColorType, Decoder, Encoder, Transformations};

use crate::error::{Error, Result};
use crate::imgcore::{Image, Precision};

/// Sample depth of an encoded PNG.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PngDepth {
    Eight,
    Sixteen,
}

impl PngDepth {
    pub fn max_value(self) -> f64 {
        match self {
            PngDepth::Eight => 255.0,
            PngDepth::Sixteen => 65535.0,
        }
    }
}

/// Decodes an 8/16-bit gray or RGB PNG into `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<(Image, PngDepth)> {
    let mut decoder = Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::IDENTITY);
    let header = decoder
        .read_header_info()
        .map_err(|e| Error::PngDecode(e.to_string()))?;
    let channels = match header.color_type {
        ColorType::Grayscale => 1,
        ColorType::Rgb => 3,
        other => return Err(Error::UnsupportedColorType(format!("{other:?}"))),
    };
    let depth = match header.bit_depth {
        BitDepth::Eight => PngDepth::Eight,
        BitDepth::Sixteen => PngDepth::Sixteen,
        other => return Err(Error::UnsupportedBitDepth(other as u8)),
    };
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::PngDecode(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::PngDecode("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::PngDecode(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let max = depth.max_value();
    let data: Vec<f64> = match depth {
        PngDepth::Eight => buf[..h * w * channels].iter().map(|&b| b as f64 / max).collect(),
        PngDepth::Sixteen => buf[..h * w * channels * 2]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / max)
            .collect(),
    };
    Ok((Image::new(h, w, channels, data, Precision::Double)?, depth))
}

/// Reads an 8/16-bit gray or RGB PNG, mapping samples linearly to `[0, 1]`.
pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_png(&bytes).map(|(img, _)| img)
}

/// Quantizes `[0, 1]` values with round-half-up, clamping out-of-range input.
#[inline]
pub fn quantize(v: f64, depth: PngDepth) -> u16 {
    let max = depth.max_value();
    (v * max + 0.5).floor().clamp(0.0, max) as u16
}

pub fn encode_png(img: &Image, depth: PngDepth, out: impl Write) -> Result<()> {
    let color = match img.channels() {
        1 => ColorType::Grayscale,
        3 => ColorType::Rgb,
        c => return Err(Error::Channels(c)),
    };
    let mut encoder = Encoder::new(out, img.width() as u32, img.height() as u32);
    encoder.set_color(color);
    encoder.set_depth(match depth {
        PngDepth::Eight => BitDepth::Eight,
        PngDepth::Sixteen => BitDepth::Sixteen,
    });
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::PngEncode(e.to_string()))?;
    let bytes: Vec<u8> = match depth {
        PngDepth::Eight => img.data().iter().map(|&v| quantize(v, depth) as u8).collect(),
        PngDepth::Sixteen => img
            .data()
            .iter()
            .flat_map(|&v| quantize(v, depth).to_be_bytes())
            .collect(),
    };
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::PngEncode(e.to_string()))?;
    writer.finish().map_err(|e| Error::PngEncode(e.to_string()))
}

pub fn write_png(path: impl AsRef<Path>, img: &Image, depth: PngDepth) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    encode_png(img, depth, file)
}
