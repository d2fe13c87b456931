//! RGB8 images, bilinear resize, cropping, and the codecs selectable on the wire.

use crate::roi::PixelRect;
use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("pixel buffer has {actual} bytes, expected {expected} for {width}x{height}")]
    BufferSize {
        width: u32,
        height: u32,
        expected: usize,
        actual: usize,
    },
    #[error("image dimensions must be positive, got {0}x{1}")]
    ZeroSized(u32, u32),
    #[error("rectangle {rect:?} is outside a {width}x{height} image")]
    RectOutOfBounds {
        rect: PixelRect,
        width: u32,
        height: u32,
    },
    #[error("unknown codec id {0}")]
    UnknownCodec(u8),
    #[error("corrupt {codec} payload: {reason}")]
    Corrupt { codec: &'static str, reason: String },
    #[error("quality must be in 1..=100, got {0}")]
    InvalidQuality(u8),
}

#[derive(Clone, PartialEq, Eq)]
pub struct RawImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl fmt::Debug for RawImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RawImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RawImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroSized(width, height));
        }
        let expected = 3 * width as usize * height as usize;
        if pixels.len() != expected {
            return Err(ImageError::BufferSize {
                width,
                height,
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, ImageError> {
        let n = width as usize * height as usize;
        Self::new(width, height, rgb.repeat(n))
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> [u8; 3],
    ) -> Result<Self, ImageError> {
        let mut pixels = Vec::with_capacity(3 * width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Source coordinate and blend weight for each destination index along one axis.
fn sample_axis(src: u32, dst: u32) -> Vec<(usize, usize, f64)> {
    let scale = f64::from(src) / f64::from(dst);
    let max = f64::from(src - 1);
    (0..dst)
        .map(|i| {
            let s = ((f64::from(i) + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src as usize - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel-centred sampling and edge clamping.
pub fn resize(img: &RawImage, target_w: u32, target_h: u32) -> RawImage {
    assert!(target_w > 0 && target_h > 0, "resize target must be non-empty");
    if (target_w, target_h) == (img.width, img.height) {
        return img.clone();
    }
    let xs = sample_axis(img.width, target_w);
    let ys = sample_axis(img.height, target_h);
    let stride = 3 * img.width as usize;
    let src = &img.pixels;
    let mut out = vec![0u8; 3 * target_w as usize * target_h as usize];
    if xs.iter().chain(&ys).all(|&(_, _, w)| w == 0.5) {
        // every output pixel is the plain mean of four sources; the float path
        // below computes that mean exactly, so integers give the same bytes
        for (row, &(y0, y1, _)) in out.chunks_exact_mut(3 * target_w as usize).zip(&ys) {
            let (r0, r1) = (&src[y0 * stride..][..stride], &src[y1 * stride..][..stride]);
            for (px, &(x0, x1, _)) in row.chunks_exact_mut(3).zip(&xs) {
                for c in 0..3 {
                    let sum = u16::from(r0[3 * x0 + c])
                        + u16::from(r0[3 * x1 + c])
                        + u16::from(r1[3 * x0 + c])
                        + u16::from(r1[3 * x1 + c]);
                    px[c] = ((sum + 2) >> 2) as u8;
                }
            }
        }
        return RawImage {
            width: target_w,
            height: target_h,
            pixels: out,
        };
    }
    for (row, &(y0, y1, wy)) in out.chunks_exact_mut(3 * target_w as usize).zip(&ys) {
        let (r0, r1) = (&src[y0 * stride..][..stride], &src[y1 * stride..][..stride]);
        for (px, &(x0, x1, wx)) in row.chunks_exact_mut(3).zip(&xs) {
            let (a0, a1) = (&r0[3 * x0..3 * x0 + 3], &r0[3 * x1..3 * x1 + 3]);
            let (b0, b1) = (&r1[3 * x0..3 * x0 + 3], &r1[3 * x1..3 * x1 + 3]);
            for c in 0..3 {
                let top = f64::from(a0[c]) * (1.0 - wx) + f64::from(a1[c]) * wx;
                let bot = f64::from(b0[c]) * (1.0 - wx) + f64::from(b1[c]) * wx;
                let v = top * (1.0 - wy) + bot * wy;
                // v lies in [0, 255]; adding one half and truncating rounds half up
                px[c] = (v + 0.5) as u8;
            }
        }
    }
    RawImage {
        width: target_w,
        height: target_h,
        pixels: out,
    }
}

/// Exact pixel copy of `rect`.
pub fn crop(img: &RawImage, rect: PixelRect) -> Result<RawImage, ImageError> {
    let inside = rect.width > 0
        && rect.height > 0
        && u64::from(rect.x) + u64::from(rect.width) <= u64::from(img.width)
        && u64::from(rect.y) + u64::from(rect.height) <= u64::from(img.height);
    if !inside {
        return Err(ImageError::RectOutOfBounds {
            rect,
            width: img.width,
            height: img.height,
        });
    }
    let stride = 3 * img.width as usize;
    let mut out = Vec::with_capacity(3 * rect.width as usize * rect.height as usize);
    for y in rect.y..rect.y + rect.height {
        let start = y as usize * stride + 3 * rect.x as usize;
        out.extend_from_slice(&img.pixels[start..start + 3 * rect.width as usize]);
    }
    RawImage::new(rect.width, rect.height, out)
}

/// Image codec selectable per payload. `Raw` and `Deflate` are lossless.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Codec {
    Raw,
    Deflate,
    Dct { quality: u8 },
}

impl Codec {
    pub const RAW_ID: u8 = 0;
    pub const DEFLATE_ID: u8 = 1;
    pub const DCT_ID: u8 = 2;

    pub fn id(self) -> u8 {
        match self {
            Self::Raw => Self::RAW_ID,
            Self::Deflate => Self::DEFLATE_ID,
            Self::Dct { .. } => Self::DCT_ID,
        }
    }

    pub fn is_lossless(self) -> bool {
        !matches!(self, Self::Dct { .. })
    }

    pub fn encode(self, img: &RawImage) -> Result<Vec<u8>, ImageError> {
        match self {
            Self::Raw => Ok(img.pixels.clone()),
            Self::Deflate => Ok(deflate(&img.pixels)),
            Self::Dct { quality } => dct::encode(img, quality),
        }
    }

    /// Decodes `data` for an image of the given dimensions. The lossy codec reads its
    /// quality from the payload.
    pub fn decode(codec_id: u8, width: u32, height: u32, data: &[u8]) -> Result<RawImage, ImageError> {
        match codec_id {
            Self::RAW_ID => RawImage::new(width, height, data.to_vec()),
            Self::DEFLATE_ID => {
                let expected = 3 * width as usize * height as usize;
                let pixels = inflate(data, expected).map_err(|reason| ImageError::Corrupt {
                    codec: "deflate",
                    reason,
                })?;
                RawImage::new(width, height, pixels)
            }
            Self::DCT_ID => dct::decode(width, height, data),
            other => Err(ImageError::UnknownCodec(other)),
        }
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Raw => f.write_str("raw"),
            Self::Deflate => f.write_str("deflate"),
            Self::Dct { quality } => write!(f, "dct:{quality}"),
        }
    }
}

impl FromStr for Codec {
    type Err = String;

    /// Accepts `raw`, `deflate`, `dct` (quality 75) or `dct:<quality>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "raw" => Ok(Self::Raw),
            "deflate" => Ok(Self::Deflate),
            "dct" => Ok(Self::Dct { quality: 75 }),
            other => {
                let q = other
                    .strip_prefix("dct:")
                    .and_then(|q| q.parse::<u8>().ok())
                    .filter(|q| (1..=100).contains(q))
                    .ok_or_else(|| format!("unknown codec '{other}'"))?;
                Ok(Self::Dct { quality: q })
            }
        }
    }
}

fn deflate(bytes: &[u8]) -> Vec<u8> {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

fn inflate(bytes: &[u8], expected: usize) -> Result<Vec<u8>, String> {
    let mut out = Vec::with_capacity(expected);
    // one extra byte lets oversized streams be detected without unbounded reads
    ZlibDecoder::new(bytes)
        .take(expected as u64 + 1)
        .read_to_end(&mut out)
        .map_err(|e| e.to_string())?;
    if out.len() != expected {
        return Err(format!("inflated to {} bytes, expected {expected}", out.len()));
    }
    Ok(out)
}

/// Baseline-JPEG-style block codec: per-channel 8x8 DCT, quality-scaled quantisation,
/// zigzag coefficient order, then zlib. Payload is `[quality][zlib stream]`.
mod dct {
    use super::{deflate, inflate, ImageError, RawImage};
    use std::sync::OnceLock;

    const N: usize = 8;

    #[rustfmt::skip]
    const LUMA_QUANT: [u16; 64] = [
        16, 11, 10, 16, 24, 40, 51, 61,
        12, 12, 14, 19, 26, 58, 60, 55,
        14, 13, 16, 24, 40, 57, 69, 56,
        14, 17, 22, 29, 51, 87, 80, 62,
        18, 22, 37, 56, 68, 109, 103, 77,
        24, 35, 55, 64, 81, 104, 113, 92,
        49, 64, 78, 87, 103, 121, 120, 101,
        72, 92, 95, 98, 112, 100, 103, 99,
    ];

    #[rustfmt::skip]
    const ZIGZAG: [usize; 64] = [
         0,  1,  8, 16,  9,  2,  3, 10,
        17, 24, 32, 25, 18, 11,  4,  5,
        12, 19, 26, 33, 40, 48, 41, 34,
        27, 20, 13,  6,  7, 14, 21, 28,
        35, 42, 49, 56, 57, 50, 43, 36,
        29, 22, 15, 23, 30, 37, 44, 51,
        58, 59, 52, 45, 38, 31, 39, 46,
        53, 60, 61, 54, 47, 55, 62, 63,
    ];

    fn quant_table(quality: u8) -> [f64; 64] {
        let q = u32::from(quality);
        let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
        let mut t = [0.0; 64];
        for (dst, &base) in t.iter_mut().zip(&LUMA_QUANT) {
            *dst = ((u32::from(base) * scale + 50) / 100).clamp(1, 255) as f64;
        }
        t
    }

    /// Orthonormal DCT-II basis, `basis[k][n]`.
    fn basis() -> &'static [[f64; N]; N] {
        static BASIS: OnceLock<[[f64; N]; N]> = OnceLock::new();
        BASIS.get_or_init(|| {
            let mut b = [[0.0; N]; N];
            for (k, row) in b.iter_mut().enumerate() {
                let a = if k == 0 { (1.0 / N as f64).sqrt() } else { (2.0 / N as f64).sqrt() };
                for (n, v) in row.iter_mut().enumerate() {
                    *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * N) as f64).cos();
                }
            }
            b
        })
    }

    fn forward(block: &[f64; 64]) -> [f64; 64] {
        let b = basis();
        let mut tmp = [0.0; 64];
        for y in 0..N {
            for k in 0..N {
                tmp[y * N + k] = (0..N).map(|x| b[k][x] * block[y * N + x]).sum();
            }
        }
        let mut out = [0.0; 64];
        for k in 0..N {
            for x in 0..N {
                out[k * N + x] = (0..N).map(|y| b[k][y] * tmp[y * N + x]).sum();
            }
        }
        out
    }

    fn inverse(coef: &[f64; 64]) -> [f64; 64] {
        let b = basis();
        let mut tmp = [0.0; 64];
        for y in 0..N {
            for x in 0..N {
                tmp[y * N + x] = (0..N).map(|k| b[k][y] * coef[k * N + x]).sum();
            }
        }
        let mut out = [0.0; 64];
        for y in 0..N {
            for x in 0..N {
                out[y * N + x] = (0..N).map(|k| b[k][x] * tmp[y * N + k]).sum();
            }
        }
        out
    }

    fn blocks(width: u32, height: u32) -> (usize, usize) {
        ((width as usize).div_ceil(N), (height as usize).div_ceil(N))
    }

    pub(super) fn encode(img: &RawImage, quality: u8) -> Result<Vec<u8>, ImageError> {
        if !(1..=100).contains(&quality) {
            return Err(ImageError::InvalidQuality(quality));
        }
        let table = quant_table(quality);
        let (bw, bh) = blocks(img.width, img.height);
        let (w, h) = (img.width as usize, img.height as usize);
        let mut coeffs = Vec::with_capacity(3 * bw * bh * 64 * 2);
        for c in 0..3 {
            for by in 0..bh {
                for bx in 0..bw {
                    let mut block = [0.0; 64];
                    for y in 0..N {
                        let sy = (by * N + y).min(h - 1);
                        for x in 0..N {
                            let sx = (bx * N + x).min(w - 1);
                            block[y * N + x] = f64::from(img.pixels[3 * (sy * w + sx) + c]) - 128.0;
                        }
                    }
                    let f = forward(&block);
                    for &z in &ZIGZAG {
                        let q = (f[z] / table[z]).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                        coeffs.extend_from_slice(&q.to_be_bytes());
                    }
                }
            }
        }
        let mut out = vec![quality];
        out.extend(deflate(&coeffs));
        Ok(out)
    }

    pub(super) fn decode(width: u32, height: u32, data: &[u8]) -> Result<RawImage, ImageError> {
        let corrupt = |reason: String| ImageError::Corrupt { codec: "dct", reason };
        let (&quality, stream) = data.split_first().ok_or_else(|| corrupt("empty payload".into()))?;
        if !(1..=100).contains(&quality) {
            return Err(ImageError::InvalidQuality(quality));
        }
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroSized(width, height));
        }
        let table = quant_table(quality);
        let (bw, bh) = blocks(width, height);
        let coeffs = inflate(stream, 3 * bw * bh * 64 * 2).map_err(corrupt)?;
        let (w, h) = (width as usize, height as usize);
        let mut pixels = vec![0u8; 3 * w * h];
        let mut chunks = coeffs.chunks_exact(2);
        for c in 0..3 {
            for by in 0..bh {
                for bx in 0..bw {
                    let mut coef = [0.0; 64];
                    for &z in &ZIGZAG {
                        let pair = chunks.next().expect("length checked by inflate");
                        coef[z] = f64::from(i16::from_be_bytes([pair[0], pair[1]])) * table[z];
                    }
                    let block = inverse(&coef);
                    for y in 0..N {
                        let py = by * N + y;
                        if py >= h {
                            break;
                        }
                        for x in 0..N {
                            let px = bx * N + x;
                            if px >= w {
                                break;
                            }
                            let v = (block[y * N + x] + 128.0).round().clamp(0.0, 255.0);
                            pixels[3 * (py * w + px) + c] = v as u8;
                        }
                    }
                }
            }
        }
        RawImage::new(width, height, pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient(w: u32, h: u32) -> RawImage {
        RawImage::from_fn(w, h, |x, y| [(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8])
            .unwrap()
    }

    #[test]
    fn resize_identity() {
        let img = gradient(13, 7);
        assert_eq!(resize(&img, 13, 7), img);
    }

    #[test]
    fn resize_preserves_constant_colour() {
        let img = RawImage::filled(2, 2, [12, 200, 77]).unwrap();
        for (w, h) in [(1, 1), (5, 3), (17, 40)] {
            let out = resize(&img, w, h);
            assert_eq!((out.width(), out.height()), (w, h));
            assert!(out.pixels().chunks(3).all(|p| p == [12, 200, 77]));
        }
    }

    #[test]
    fn halving_matches_general_path() {
        let img = RawImage::from_fn(14, 10, |x, y| [(x * 37 + y * 11) as u8, ((x ^ y) * 19) as u8, (255 - y * 23) as u8])
            .unwrap();
        let fast = resize(&img, 7, 5);
        let xs = sample_axis(14, 7);
        let ys = sample_axis(10, 5);
        for (j, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (i, &(x0, x1, wx)) in xs.iter().enumerate() {
                let p = |x: usize, y: usize, c: usize| f64::from(img.pixel(x as u32, y as u32)[c]);
                for c in 0..3 {
                    let top = p(x0, y0, c) * (1.0 - wx) + p(x1, y0, c) * wx;
                    let bot = p(x0, y1, c) * (1.0 - wx) + p(x1, y1, c) * wx;
                    let v = top * (1.0 - wy) + bot * wy;
                    assert_eq!(fast.pixel(i as u32, j as u32)[c], (v + 0.5) as u8);
                }
            }
        }
    }

    #[test]
    fn resize_ramp() {
        let img = RawImage::new(2, 1, vec![0, 0, 0, 255, 255, 255]).unwrap();
        let out = resize(&img, 4, 1);
        let row: Vec<u8> = out.pixels().chunks(3).map(|p| p[0]).collect();
        // source positions -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
        assert_eq!(row, vec![0, 64, 191, 255]);
    }

    #[test]
    fn crop_examples() {
        let img = gradient(9, 6);
        let full = PixelRect { x: 0, y: 0, width: 9, height: 6 };
        assert_eq!(crop(&img, full).unwrap(), img);
        let one = crop(&img, PixelRect { x: 0, y: 0, width: 1, height: 1 }).unwrap();
        assert_eq!(one.pixels(), &img.pixel(0, 0));
        let inner = crop(&img, PixelRect { x: 3, y: 2, width: 4, height: 3 }).unwrap();
        assert_eq!(inner.pixel(0, 0), img.pixel(3, 2));
        assert_eq!(inner.pixel(3, 2), img.pixel(6, 4));
        assert!(crop(&img, PixelRect { x: 8, y: 0, width: 2, height: 1 }).is_err());
        assert!(crop(&img, PixelRect { x: 0, y: 0, width: 0, height: 1 }).is_err());
    }

    #[test]
    fn lossless_codecs_round_trip() {
        let img = gradient(31, 17);
        for codec in [Codec::Raw, Codec::Deflate] {
            let data = codec.encode(&img).unwrap();
            assert_eq!(Codec::decode(codec.id(), 31, 17, &data).unwrap(), img);
        }
    }

    #[test]
    fn dct_quality_trades_bytes_for_fidelity() {
        let img = RawImage::from_fn(64, 48, |x, y| {
            let v = (128.0 + 100.0 * ((x as f64) / 5.0).sin() * ((y as f64) / 7.0).cos()) as u8;
            [v, v / 2, 255 - v]
        })
        .unwrap();
        let err = |q: u8| -> (usize, f64) {
            let data = Codec::Dct { quality: q }.encode(&img).unwrap();
            let out = Codec::decode(Codec::DCT_ID, 64, 48, &data).unwrap();
            let mse = img
                .pixels()
                .iter()
                .zip(out.pixels())
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                .sum::<f64>()
                / img.pixels().len() as f64;
            (data.len(), mse)
        };
        let (b10, e10) = err(10);
        let (b90, e90) = err(90);
        let (_, e100) = err(100);
        assert!(b10 < b90, "{b10} vs {b90}");
        assert!(e10 > e90);
        assert!(e100 < 1.0, "q100 mse {e100}");
    }

    #[test]
    fn dct_handles_non_multiple_of_eight() {
        let img = gradient(13, 9);
        let data = Codec::Dct { quality: 95 }.encode(&img).unwrap();
        let out = Codec::decode(Codec::DCT_ID, 13, 9, &data).unwrap();
        assert_eq!((out.width(), out.height()), (13, 9));
    }

    #[test]
    fn decode_rejects_bad_payloads() {
        assert!(Codec::decode(0, 2, 2, &[0; 11]).is_err());
        assert!(Codec::decode(1, 2, 2, &[1, 2, 3]).is_err());
        assert!(Codec::decode(2, 2, 2, &[]).is_err());
        assert!(Codec::decode(2, 2, 2, &[0, 1]).is_err());
        assert_eq!(Codec::decode(9, 2, 2, &[]), Err(ImageError::UnknownCodec(9)));
        // a deflate stream for a larger image must not decode as a smaller one
        let big = Codec::Deflate.encode(&gradient(4, 4)).unwrap();
        assert!(Codec::decode(1, 2, 2, &big).is_err());
    }

    #[test]
    fn codec_names() {
        assert_eq!("raw".parse(), Ok(Codec::Raw));
        assert_eq!("dct:40".parse(), Ok(Codec::Dct { quality: 40 }));
        assert!("dct:0".parse::<Codec>().is_err());
        assert_eq!(Codec::Dct { quality: 40 }.to_string(), "dct:40");
    }

    proptest! {
        #[test]
        fn crop_stays_in_bounds(w in 1u32..40, h in 1u32..40, x in 0u32..60, y in 0u32..60, cw in 0u32..60, ch in 0u32..60) {
            let img = gradient(w, h);
            let rect = PixelRect { x, y, width: cw, height: ch };
            match crop(&img, rect) {
                Ok(out) => {
                    prop_assert!(x + cw <= w && y + ch <= h);
                    prop_assert_eq!(out.pixels().len(), 3 * (cw * ch) as usize);
                }
                Err(_) => prop_assert!(cw == 0 || ch == 0 || x + cw > w || y + ch > h),
            }
        }
    }
}
