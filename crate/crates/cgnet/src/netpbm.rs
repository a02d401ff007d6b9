//! Binary PPM (P6) and PGM (P5) image I/O, maxval 255.
//!
//! Pixel values map linearly: byte v becomes v / 255 on read, and writes
//! quantize with round(clamp(v, 0, 1) * 255), so write-then-read is bit-exact
//! for data that started as 8-bit.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Header tokenizer: skips whitespace and '#' comment lines (legal anywhere
/// in the header per the format).
struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        HeaderScanner { bytes, pos: 0 }
    }

    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len()
            && !self.bytes[self.pos].is_ascii_whitespace()
            && self.bytes[self.pos] != b'#'
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::ImageFormat("truncated header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::ImageFormat("malformed header number".into()))
    }

    /// Payload starts after exactly one whitespace byte following the maxval.
    fn payload(&mut self) -> Result<&'a [u8]> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(Error::ImageFormat("missing separator before payload".into()));
        }
        self.pos += 1;
        Ok(&self.bytes[self.pos..])
    }
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    let mut scan = HeaderScanner::new(bytes);
    let found = scan.token()?;
    if found != magic.as_bytes() {
        return Err(Error::ImageFormat(format!(
            "bad magic: expected {magic}, found {:?}",
            String::from_utf8_lossy(found)
        )));
    }
    let w = scan.number()?;
    let h = scan.number()?;
    let maxval = scan.number()?;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!(
            "unsupported maxval {maxval}, expected 255"
        )));
    }
    if w == 0 || h == 0 {
        return Err(Error::ImageFormat("zero image extent".into()));
    }
    Ok((w, h, scan.payload()?))
}

/// Read a binary RGB PPM into a (1, 3, h, w) tensor with values in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path)?;
    let (w, h, payload) = parse_header(&bytes, "P6")?;
    let need = w * h * 3;
    if payload.len() < need {
        return Err(Error::ImageFormat(format!(
            "truncated payload: need {need} bytes, have {}",
            payload.len()
        )));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = (y * w + x) * 3;
            for c in 0..3 {
                data[c * h * w + y * w + x] = payload[px + c] as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a (1, 3, h, w) tensor as a binary RGB PPM.
pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape("write_ppm", format!("expected 1x3xHxW, got {s}")));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", s.w, s.h)?;
    let d = img.data();
    let hw = s.h * s.w;
    let mut row = Vec::with_capacity(s.w * 3);
    for y in 0..s.h {
        row.clear();
        for x in 0..s.w {
            for c in 0..3 {
                row.push(quantize(d[c * hw + y * s.w + x]));
            }
        }
        out.write_all(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Read a binary grayscale PGM as (bytes, height, width).
pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = std::fs::read(path)?;
    let (w, h, payload) = parse_header(&bytes, "P5")?;
    if payload.len() < w * h {
        return Err(Error::ImageFormat(format!(
            "truncated payload: need {} bytes, have {}",
            w * h,
            payload.len()
        )));
    }
    Ok((payload[..w * h].to_vec(), h, w))
}

/// Write grayscale bytes as a binary PGM.
pub fn write_pgm(path: &Path, gray: &[u8], h: usize, w: usize) -> Result<()> {
    if gray.len() != h * w {
        return Err(Error::shape(
            "write_pgm",
            format!("buffer holds {} bytes, extents say {}", gray.len(), h * w),
        ));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.write_all(gray)?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("cgnet-netpbm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn ppm_roundtrip_is_bit_exact() {
        let img = crate::data::synth_image(5, 13, 17).unwrap();
        let p1 = tmp("a.ppm");
        let p2 = tmp("b.ppm");
        write_ppm(&p1, &img).unwrap();
        let back = read_ppm(&p1).unwrap();
        write_ppm(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn single_white_pixel_reads_as_one() {
        let p = tmp("white.ppm");
        std::fs::write(&p, b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        let img = read_ppm(&p).unwrap();
        assert_eq!(img.shape(), Shape::new(1, 3, 1, 1));
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn header_comments_are_legal() {
        let p = tmp("comments.ppm");
        std::fs::write(
            &p,
            b"P6\n# made by hand\n2 # width then height\n1\n# maxval next\n255\n\x00\x01\x02\x10\x20\x30",
        )
        .unwrap();
        let img = read_ppm(&p).unwrap();
        assert_eq!(img.shape(), Shape::new(1, 3, 1, 2));
        assert!((img.at(0, 2, 0, 0) - 2.0 / 255.0).abs() < 1e-7);
        assert!((img.at(0, 0, 0, 1) - 16.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn bad_magic_and_truncation_are_errors() {
        let p = tmp("bad.ppm");
        std::fs::write(&p, b"P3\n1 1\n255\n").unwrap();
        assert!(matches!(read_ppm(&p), Err(Error::ImageFormat(_))));
        std::fs::write(&p, b"P6\n2 2\n255\n\x00\x01").unwrap();
        assert!(matches!(read_ppm(&p), Err(Error::ImageFormat(_))));
        std::fs::write(&p, b"P6\n1 1\n65535\n\x00\x00").unwrap();
        assert!(matches!(read_ppm(&p), Err(Error::ImageFormat(_))));
    }

    #[test]
    fn pgm_roundtrip() {
        let p = tmp("gray.pgm");
        let data: Vec<u8> = (0..12).collect();
        write_pgm(&p, &data, 3, 4).unwrap();
        let (back, h, w) = read_pgm(&p).unwrap();
        assert_eq!((h, w), (3, 4));
        assert_eq!(back, data);
    }
}
