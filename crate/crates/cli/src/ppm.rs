//! Binary PPM (P6) frames. The first three latent channels become RGB,
//! mapped linearly from [−1, 1] to [0, 255] with rounding and clamping.

use std::fs;
use std::path::Path;

use gentron::numerics::Tensor;

use crate::error::CliError;

pub fn quantize(v: f32) -> u8 {
    (((v as f64 + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

pub fn dequantize(b: u8) -> f32 {
    (b as f64 / 127.5 - 1.0) as f32
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub rgb: Vec<u8>,
}

impl Image {
    /// `[H, W, C]` latent, `C ≥ 1`; missing colour channels repeat the last one.
    pub fn from_latent(latent: &Tensor) -> Result<Self, CliError> {
        let &[h, w, c] = latent.shape() else {
            return Err(CliError::Schema(format!("expected [H, W, C], got {:?}", latent.shape())));
        };
        let mut rgb = Vec::with_capacity(h * w * 3);
        for px in latent.data().chunks(c) {
            for ch in 0..3 {
                rgb.push(quantize(px[ch.min(c - 1)]));
            }
        }
        Ok(Self { width: w, height: h, rgb })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let bad = |m: &str| CliError::Schema(format!("PPM: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("not a binary PPM"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if max != 255 {
            return Err(bad("only 8-bit PPM is supported"));
        }
        let rgb = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?.to_vec();
        if rgb.len() != width * height * 3 {
            return Err(bad("pixel data length does not match the header"));
        }
        Ok(Self { width, height, rgb })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
