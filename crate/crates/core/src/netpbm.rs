//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit raster with 1 (gray) or 3 (RGB) interleaved samples per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub samples: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, samples: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * samples {
            return Err(Error::Dimension(format!(
                "{}x{}x{} raster needs {} bytes, got {}",
                width,
                height,
                samples,
                width * height * samples,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            samples,
            data,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()?
            .parse()
            .ok()
    }
}

/// Decodes a P5 or P6 image from memory. `path` is only used in errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Raster> {
    let bad = |msg: &str| Error::parse(path, msg);
    let samples = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("not a binary PGM/PPM (expected P5 or P6 magic)")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur
        .number()
        .ok_or_else(|| bad("missing or malformed width"))?;
    let height = cur
        .number()
        .ok_or_else(|| bad("missing or malformed height"))?;
    let maxval = cur
        .number()
        .ok_or_else(|| bad("missing or malformed maxval"))?;
    if width == 0 || height == 0 {
        return Err(bad("zero image extent"));
    }
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval}, expected 255")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(bad("header not terminated by whitespace")),
    }
    let need = width * height * samples;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        return Err(bad(&format!(
            "truncated raster: expected {need} bytes, found {}",
            raster.len()
        )));
    }
    if raster.len() > need {
        return Err(bad(&format!(
            "{} trailing bytes after raster",
            raster.len() - need
        )));
    }
    Raster::new(width, height, samples, raster.to_vec())
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.samples == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    if r.samples != 1 && r.samples != 3 {
        return Err(Error::Parameter(format!(
            "cannot write {} samples per pixel",
            r.samples
        )));
    }
    fs::write(path, encode(r)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_white_pixel() {
        let r = decode(b"P6\n1 1\n255\n\xff\xff\xff", Path::new("w.ppm")).unwrap();
        assert_eq!(r.data, vec![255, 255, 255]);
        assert_eq!((r.width, r.height, r.samples), (1, 1, 3));
    }

    #[test]
    fn comments_in_header() {
        let r = decode(b"P5 # gray\n2 # w\n1\n255\n\x01\x02", Path::new("c.pgm")).unwrap();
        assert_eq!(r.data, vec![1, 2]);
    }

    #[test]
    fn round_trip_bytes() {
        let r = Raster::new(3, 2, 3, (0..18).collect()).unwrap();
        let bytes = encode(&r);
        let back = decode(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!(back, r);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn malformed_inputs_are_parse_errors() {
        for bytes in [
            &b"P6\n2 2\n255\n\x00\x00"[..],
            b"P3\n1 1\n255\n0 0 0",
            b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00",
            b"P6\n1\n",
            b"P5\n1 1\n255\n\x00\x00",
            b"",
        ] {
            let err = decode(bytes, Path::new("bad.ppm")).unwrap_err();
            match err {
                Error::Parse { path, .. } => assert_eq!(path, Path::new("bad.ppm")),
                other => panic!("unexpected {other:?}"),
            }
        }
    }
}
