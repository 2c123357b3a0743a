//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::path::Path;

use crate::error::{AhanError, Result};
use crate::tensor::Tensor;

/// 8-bit image, `height × width × channels` interleaved; channels is 1 or 3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(AhanError::invalid("image", "zero-sized image"));
        }
        if channels != 1 && channels != 3 {
            return Err(AhanError::invalid(
                "image",
                format!("{channels} channels; only 1 (PGM) and 3 (PPM) are supported"),
            ));
        }
        if pixels.len() != width * height * channels {
            return Err(AhanError::invalid(
                "image",
                format!(
                    "{} bytes for {width}x{height}x{channels}",
                    pixels.len()
                ),
            ));
        }
        Ok(Image8 {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Quantizes `[0, 1]` values (clamped) of an `H×W×C` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(AhanError::shape("image", format!("expected HxWxC, got {s:?}")));
        }
        let pixels = t.data().iter().map(|&v| quantize(v)).collect();
        Self::new(s[1], s[0], s[2], pixels)
    }

    /// `H×W×C` tensor with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
        Tensor::new(vec![self.height, self.width, self.channels], data).expect("consistent size")
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // whitespace and comments
            while pos < bytes.len() {
                if bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                } else if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
        }
        let channels = match fields[0] {
            "P5" => 1,
            "P6" => 3,
            other => return Err(format!("unsupported magic `{other}` (expected P5 or P6)")),
        };
        let num = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| format!("invalid {what} `{s}`"))
        };
        let (width, height, maxval) = (
            num(fields[1], "width")?,
            num(fields[2], "height")?,
            num(fields[3], "maxval")?,
        );
        if maxval != 255 {
            return Err(format!("maxval {maxval} unsupported (expected 255)"));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err("missing raster".into());
        }
        pos += 1;
        let raster = &bytes[pos..];
        let expected = width * height * channels;
        if raster.len() != expected {
            return Err(format!("raster has {} bytes, expected {expected}", raster.len()));
        }
        Image8::new(width, height, channels, raster.to_vec()).map_err(|e| e.to_string())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| AhanError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| AhanError::io(path, e))?;
        Self::decode(&bytes).map_err(|d| AhanError::format(path, d))
    }
}

/// Nearest 8-bit level of a clamped `[0, 1]` value.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a PGM/PPM file as an `H×W×C` tensor in `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(Image8::read(path)?.to_tensor())
}

pub fn write_image(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    Image8::from_tensor(t)?.write(path)
}
