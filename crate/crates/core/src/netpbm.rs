//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit image with `channels` interleaved samples per pixel (1 or 3).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) || data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{width}x{height}x{channels} image given {} samples",
                data.len()
            )));
        }
        Ok(Image8 {
            width,
            height,
            channels,
            data,
        })
    }

    fn magic(&self) -> &'static str {
        if self.channels == 3 {
            "P6"
        } else {
            "P5"
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("{}\n{} {}\n255\n", self.magic(), self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.encode())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn decode(bytes: &[u8]) -> Result<Image8> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        let channels = match magic.as_slice() {
            b"P6" => 3,
            b"P5" => 1,
            other => {
                return Err(malformed(format!(
                    "unsupported magic {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        };
        let width = parse_usize(&next_token(bytes, &mut pos)?)?;
        let height = parse_usize(&next_token(bytes, &mut pos)?)?;
        let maxval = parse_usize(&next_token(bytes, &mut pos)?)?;
        if maxval != 255 {
            return Err(malformed(format!("maxval {maxval}, only 255 is supported")));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(malformed("missing separator after header"));
        }
        pos += 1;
        let need = width * height * channels;
        let raster = &bytes[pos..];
        if raster.len() < need {
            return Err(Error::Format {
                format: "netpbm",
                reason: format!("truncated payload: expected {need} bytes, found {}", raster.len()),
            });
        }
        Image8::new(width, height, channels, raster[..need].to_vec())
    }

    pub fn read_from(mut r: impl Read) -> Result<Image8> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<reader>", e))?;
        Image8::decode(&bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Image8> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image8::decode(&bytes)
    }
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "netpbm",
        reason: reason.into(),
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<Vec<u8>> {
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
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(malformed("header ended early"));
    }
    Ok(bytes[start..*pos].to_vec())
}

fn parse_usize(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| malformed(format!("bad header number {:?}", String::from_utf8_lossy(tok))))
}
