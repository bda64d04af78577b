//! Binary PGM (`P5`) images: 16-bit for intensities, 8-bit for masks.

use std::fs;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};
use crate::metrics::Mask;

const IMAGE_MAXVAL: u32 = 65535;
const MASK_MAXVAL: u32 = 255;

fn header(width: usize, height: usize, maxval: u32) -> Vec<u8> {
    format!("P5\n{width} {height}\n{maxval}\n").into_bytes()
}

/// Image values are quantised to `round(65535 * v)` and stored big-endian.
pub fn encode_image(img: &Image) -> Vec<u8> {
    let mut out = header(img.width, img.height, IMAGE_MAXVAL);
    out.reserve(img.data.len() * 2);
    for &v in &img.data {
        let q = (v.clamp(0.0, 1.0) as f64 * IMAGE_MAXVAL as f64).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut out = header(mask.width(), mask.height(), MASK_MAXVAL);
    out.extend(mask.data().iter().map(|&v| if v { MASK_MAXVAL as u8 } else { 0 }));
    out
}

struct Raster<'a> {
    width: usize,
    height: usize,
    maxval: u32,
    pixels: &'a [u8],
}

fn parse(bytes: &[u8]) -> Result<Raster<'_>> {
    let bad = |m: &str| Error::MalformedPgm(m.to_string());
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("zero dimension or maxval outside 1..=65535"));
    }
    let depth = if maxval > 255 { 2 } else { 1 };
    let need = width as usize * height as usize * depth;
    let pixels = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated raster"))?;
    Ok(Raster {
        width: width as usize,
        height: height as usize,
        maxval,
        pixels,
    })
}

impl Raster<'_> {
    fn values(&self) -> Vec<u32> {
        if self.maxval > 255 {
            self.pixels.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect()
        } else {
            self.pixels.iter().map(|&b| b as u32).collect()
        }
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let r = parse(bytes)?;
    let scale = r.maxval as f64;
    let data = r
        .values()
        .into_iter()
        .map(|v| {
            if v > r.maxval {
                Err(Error::MalformedPgm(format!("sample {v} exceeds maxval {}", r.maxval)))
            } else {
                Ok((v as f64 / scale) as f32)
            }
        })
        .collect::<Result<_>>()?;
    Ok(Image {
        height: r.height,
        width: r.width,
        data,
    })
}

/// Masks must contain only `0` and `maxval`.
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let r = parse(bytes)?;
    let data = r
        .values()
        .into_iter()
        .map(|v| match v {
            0 => Ok(false),
            v if v == r.maxval => Ok(true),
            v => Err(Error::MalformedPgm(format!("mask sample {v} is neither 0 nor {}", r.maxval))),
        })
        .collect::<Result<_>>()?;
    Mask::new(r.height, r.width, data)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_image(&read(path)?)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_mask(&read(path)?)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write(path, &encode_image(img))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write(path, &encode_mask(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomConfig};

    #[test]
    fn image_round_trip_within_quantisation() {
        let cfg = PhantomConfig {
            image_size: 32,
            max_width: 3.0,
            ..PhantomConfig::default()
        };
        let (img, mask) = generate_phantom(&cfg, 0).unwrap();
        let back = decode_image(&encode_image(&img)).unwrap();
        assert_eq!((back.height, back.width), (32, 32));
        let worst = img.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst as f64 <= 1.0 / 65535.0, "{worst}");
        assert_eq!(decode_mask(&encode_mask(&mask)).unwrap(), mask);
    }

    #[test]
    fn file_round_trip_and_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image {
            height: 2,
            width: 3,
            data: vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125],
        };
        let p = dir.path().join("a.pgm");
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p).unwrap().width, 3);
        assert!(matches!(read_image(&dir.path().join("missing.pgm")), Err(Error::Io { .. })));
    }

    #[test]
    fn header_comments_and_8_bit_images() {
        let mut bytes = b"P5 # made by hand\n2 1\n# maxval next\n255\n".to_vec();
        bytes.extend([0, 255]);
        let img = decode_image(&bytes).unwrap();
        assert_eq!(img.data, vec![0.0, 1.0]);
        assert_eq!(decode_mask(&bytes).unwrap().data(), &[false, true]);
    }

    #[test]
    fn malformed_inputs() {
        for bytes in [
            b"P2\n1 1\n255\n\x00".to_vec(),
            b"P5\n1 1\n255\n".to_vec(),
            b"P5\n1\n".to_vec(),
            b"P5\n0 1\n255\n".to_vec(),
            b"".to_vec(),
        ] {
            assert!(matches!(decode_image(&bytes), Err(Error::MalformedPgm(_))), "{bytes:?}");
        }
        let mut gray = b"P5\n1 1\n255\n".to_vec();
        gray.push(7);
        assert!(matches!(decode_mask(&gray), Err(Error::MalformedPgm(_))));
    }
}
