//! Binary netpbm: PPM (P6) for images, PGM (P5) for masks and heatmaps.
//! Only `maxval = 255` is written; reading accepts any maxval up to 255.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::segment::{BinaryMask, ForegroundMap, Image, SegmentError};

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("bad netpbm header: {0}")]
    Header(String),
    #[error("expected magic {expected}, found {found}")]
    Magic {
        expected: &'static str,
        found: String,
    },
    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Image(#[from] SegmentError),
}

struct Header {
    magic: String,
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PnmError> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(PnmError::Header("unexpected end of header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PnmError::Header("missing separator before raster".into()));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| PnmError::Header(format!("not a number: {s:?}")))
    };
    let header = Header {
        magic: fields[0].clone(),
        width: num(&fields[1])?,
        height: num(&fields[2])?,
        maxval: num(&fields[3])?,
        data_start: pos + 1,
    };
    if header.maxval == 0 || header.maxval > 255 {
        return Err(PnmError::Header(format!(
            "unsupported maxval {}",
            header.maxval
        )));
    }
    Ok(header)
}

fn raster<'a>(
    bytes: &'a [u8],
    header: &Header,
    channels: usize,
    magic: &'static str,
) -> Result<&'a [u8], PnmError> {
    if header.magic != magic {
        return Err(PnmError::Magic {
            expected: magic,
            found: header.magic.clone(),
        });
    }
    let expected = header.width * header.height * channels;
    let data = &bytes[header.data_start.min(bytes.len())..];
    if data.len() < expected {
        return Err(PnmError::Truncated {
            expected,
            found: data.len(),
        });
    }
    Ok(&data[..expected])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, PnmError> {
    let h = parse_header(bytes)?;
    let data = raster(bytes, &h, 3, "P6")?;
    let maxval = h.maxval as f64;
    let values = data
        .iter()
        .map(|&b| (f64::from(b) / maxval).min(1.0))
        .collect();
    Ok(Image::new(h.height, h.width, values)?)
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    out
}

/// Mask pixels at or above half of maxval read as foreground.
pub fn decode_pgm_mask(bytes: &[u8]) -> Result<BinaryMask, PnmError> {
    let h = parse_header(bytes)?;
    let data = raster(bytes, &h, 1, "P5")?;
    let cut = h.maxval.div_ceil(2);
    let values = data
        .iter()
        .map(|&b| u8::from(usize::from(b) >= cut))
        .collect();
    Ok(BinaryMask::new(h.height, h.width, values)?)
}

pub fn encode_pgm_mask(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&v| if v == 1 { 255u8 } else { 0 }));
    out
}

/// Grayscale heatmap with `value = round(255 p)`.
pub fn encode_pgm_heatmap(map: &ForegroundMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(map.data.iter().map(|&v| to_byte(v)));
    out
}

/// Raw 8-bit grayscale values of a P5 file.
pub fn decode_pgm_bytes(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), PnmError> {
    let h = parse_header(bytes)?;
    let data = raster(bytes, &h, 1, "P5")?;
    Ok((h.height, h.width, data.to_vec()))
}

fn to_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn read_ppm(path: &Path) -> Result<Image, PnmError> {
    decode_ppm(&fs::read(path)?)
}

pub fn read_pgm_mask(path: &Path) -> Result<BinaryMask, PnmError> {
    decode_pgm_mask(&fs::read(path)?)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.flush()
}
