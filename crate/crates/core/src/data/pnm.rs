//! Binary greymap (P5) and pixmap (P6) images with maxval 255, and
//! conversion to and from tensors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelKind {
    Gray,
    Rgb,
}

impl PixelKind {
    pub fn channels(self) -> usize {
        match self {
            PixelKind::Gray => 1,
            PixelKind::Rgb => 3,
        }
    }
}

/// Interleaved 8-bit samples, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    kind: PixelKind,
    samples: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, kind: PixelKind, samples: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::format("image dimensions must be positive"));
        }
        let expected = width * height * kind.channels();
        if samples.len() != expected {
            return Err(Error::format(format!("{} samples, expected {expected}", samples.len())));
        }
        Ok(Self {
            width,
            height,
            kind,
            samples,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn kind(&self) -> PixelKind {
        self.kind
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }
}

pub fn encode_pnm(image: &Image) -> Vec<u8> {
    let magic = match image.kind {
        PixelKind::Gray => "P5",
        PixelKind::Rgb => "P6",
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.samples);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.at) {
            if b == b'#' {
                while self.bytes.get(self.at).is_some_and(|&c| c != b'\n') {
                    self.at += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.at += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.at;
        while self.bytes.get(self.at).is_some_and(u8::is_ascii_digit) {
            self.at += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.at])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(format!("missing or malformed {what} in PNM header")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let kind = match bytes.get(..2) {
        Some(b"P5") => PixelKind::Gray,
        Some(b"P6") => PixelKind::Rgb,
        Some(m) if m[0] == b'P' => {
            return Err(Error::format(format!(
                "unsupported PNM format {}",
                String::from_utf8_lossy(m)
            )))
        }
        _ => return Err(Error::format("unsupported file: not a PNM image")),
    };
    let mut h = Header { bytes, at: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported maxval {maxval}; only 255 is accepted")));
    }
    // exactly one whitespace byte separates the header from the samples
    if !bytes.get(h.at).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("malformed PNM header"));
    }
    let payload = &bytes[h.at + 1..];
    let expected = width * height * kind.channels();
    if payload.len() < expected {
        return Err(Error::format(format!("truncated PNM payload: {} of {expected} bytes", payload.len())));
    }
    if payload.len() > expected {
        return Err(Error::format("trailing data after PNM payload"));
    }
    Image::new(width, height, kind, payload.to_vec())
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    decode_pnm(&std::fs::read(path)?)
}

pub fn write_pnm(image: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pnm(image))?;
    Ok(())
}

/// A `(1, channels, height, width)` tensor with samples scaled to `[0, 1]`.
pub fn image_to_tensor(image: &Image) -> Tensor4 {
    let c = image.kind.channels();
    let dims = Dims::derived(1, c, image.height, image.width);
    Tensor4::from_fn(dims, |_, ch, y, x| {
        f64::from(image.samples[((y - 1) * image.width + (x - 1)) * c + ch]) / 255.0
    })
}

/// Quantizes a `(1, 1 | 3, h, w)` tensor, rounding half up. Values outside
/// `[0, 1]` (and NaN, mapped to 0) are clamped; the second value counts them.
pub fn tensor_to_image(t: &Tensor4) -> Result<(Image, usize)> {
    let d = t.dims();
    let kind = match (d.n(), d.c()) {
        (1, 1) => PixelKind::Gray,
        (1, 3) => PixelKind::Rgb,
        _ => {
            return Err(Error::format(format!(
                "expected a single image with 1 or 3 channels, got {d}"
            )))
        }
    };
    let c = d.c();
    let mut clamped = 0;
    let mut samples = vec![0u8; d.len()];
    for ch in 0..c {
        for (i, &v) in t.plane(0, ch).iter().enumerate() {
            let q = (v * 255.0 + 0.5).floor();
            let q = if q.is_nan() || q < 0.0 {
                clamped += 1;
                0.0
            } else if q > 255.0 {
                clamped += 1;
                255.0
            } else {
                q
            };
            samples[i * c + ch] = q as u8;
        }
    }
    Ok((Image::new(d.w(), d.h(), kind, samples)?, clamped))
}
