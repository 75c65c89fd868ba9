//! Binary portable pixmap (P6) and bitmap (P4) codecs.
//!
//! Encoders always emit the canonical header `P6\n<w> <h>\n255\n` /
//! `P4\n<w> <h>\n`; decoders accept any conforming header (comments,
//! arbitrary whitespace) but require the exact raster length.

use crate::error::{Error, Result};
use crate::types::{Frame, Mask, ViewRole};

pub fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", frame.width(), frame.height());
    let mut out = Vec::with_capacity(header.len() + frame.pixels().len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(frame.pixels());
    out
}

/// Decode a P6 image with maxval 255.
pub fn decode_ppm(data: &[u8], timestamp_ns: u64, role: ViewRole) -> Result<Frame> {
    let mut cur = Cursor { data, pos: 0 };
    cur.expect_magic(b"P6")?;
    let width = cur.read_uint()?;
    let height = cur.read_uint()?;
    let maxval = cur.read_uint()?;
    if maxval != 255 {
        return Err(bad(format!("unsupported maxval {maxval}")));
    }
    cur.single_whitespace()?;
    let expected = raster_len(width, height, 3)?;
    let body = cur.rest();
    if body.len() != expected {
        return Err(bad(format!(
            "raster length {} does not match {width}x{height}",
            body.len()
        )));
    }
    Frame::new(timestamp_ns, width, height, body.to_vec(), role)
}

pub fn encode_pbm(mask: &Mask) -> Vec<u8> {
    let (w, h) = mask.dims();
    let row_bytes = (w as usize).div_ceil(8);
    let header = format!("P4\n{w} {h}\n");
    let mut out = Vec::with_capacity(header.len() + row_bytes * h as usize);
    out.extend_from_slice(header.as_bytes());
    for row in mask.bits().chunks(w as usize) {
        for byte_bits in row.chunks(8) {
            let mut byte = 0u8;
            for (i, &b) in byte_bits.iter().enumerate() {
                if b {
                    byte |= 0x80 >> i;
                }
            }
            out.push(byte);
        }
    }
    out
}

pub fn decode_pbm(data: &[u8]) -> Result<Mask> {
    let mut cur = Cursor { data, pos: 0 };
    cur.expect_magic(b"P4")?;
    let width = cur.read_uint()?;
    let height = cur.read_uint()?;
    cur.single_whitespace()?;
    let row_bytes = (width as usize).div_ceil(8);
    let expected = row_bytes
        .checked_mul(height as usize)
        .ok_or_else(|| bad("dimensions overflow"))?;
    let body = cur.rest();
    if body.len() != expected {
        return Err(bad(format!(
            "raster length {} does not match {width}x{height}",
            body.len()
        )));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero dimension"));
    }
    let mut bits = Vec::with_capacity(width as usize * height as usize);
    for row in body.chunks(row_bytes) {
        for x in 0..width as usize {
            bits.push(row[x / 8] & (0x80 >> (x % 8)) != 0);
        }
    }
    Mask::new(width, height, bits)
}

fn bad(reason: impl Into<String>) -> Error {
    Error::malformed("pnm", reason.into())
}

fn raster_len(width: u32, height: u32, channels: usize) -> Result<usize> {
    if width == 0 || height == 0 {
        return Err(bad("zero dimension"));
    }
    (width as usize)
        .checked_mul(height as usize)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| bad("dimensions overflow"))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.data.len() < magic.len() || &self.data[..magic.len()] != magic {
            return Err(bad("bad magic number"));
        }
        self.pos = magic.len();
        Ok(())
    }

    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.data.len() {
            match self.data[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_uint(&mut self) -> Result<u32> {
        let start = self.pos;
        self.skip_whitespace_and_comments();
        if self.pos == start {
            return Err(bad("missing separator in header"));
        }
        let digits_start = self.pos;
        let mut value: u32 = 0;
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add(u32::from(self.data[self.pos] - b'0')))
                .ok_or_else(|| bad("header integer overflow"))?;
            self.pos += 1;
        }
        if self.pos == digits_start {
            return Err(bad("expected integer in header"));
        }
        Ok(value)
    }

    fn single_whitespace(&mut self) -> Result<()> {
        match self.data.get(self.pos) {
            Some(b' ' | b'\t' | b'\n' | b'\r') => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(bad("missing whitespace before raster")),
        }
    }

    fn rest(&self) -> &'a [u8] {
        &self.data[self.pos..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_header() {
        let f = Frame::filled(0, 2, 1, [1, 2, 3], ViewRole::Ego);
        assert_eq!(
            encode_ppm(&f),
            b"P6\n2 1\n255\n\x01\x02\x03\x01\x02\x03".to_vec()
        );
        let m = Mask::new(10, 1, (0..10).map(|i| i % 3 == 0).collect()).unwrap();
        assert_eq!(encode_pbm(&m), b"P4\n10 1\n\x92\x40".to_vec());
    }

    #[test]
    fn accepts_comments() {
        let data = b"P6 # made by hand\n1\n1 255\n\x09\x08\x07";
        let f = decode_ppm(data, 5, ViewRole::Ego).unwrap();
        assert_eq!(f.get(0, 0), [9, 8, 7]);
        assert_eq!(f.timestamp_ns, 5);
    }

    #[test]
    fn rejects_truncated_and_bad_maxval() {
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00", 0, ViewRole::Ego).is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00", 0, ViewRole::Ego).is_err());
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00", 0, ViewRole::Ego).is_err());
        assert!(decode_ppm(b"P6\n99999999999 1\n255\n", 0, ViewRole::Ego).is_err());
        assert!(decode_pbm(b"P4\n0 0\n").is_err());
        assert!(decode_pbm(b"P4\n9 1\n\x00").is_err());
    }

    proptest! {
        #[test]
        fn ppm_roundtrip(w in 1u32..20, h in 1u32..20, seed in any::<u64>()) {
            let pixels: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
            let f = Frame::new(3, w, h, pixels, ViewRole::ThirdHuman).unwrap();
            prop_assert_eq!(decode_ppm(&encode_ppm(&f), 3, ViewRole::ThirdHuman).unwrap(), f);
        }

        #[test]
        fn pbm_roundtrip(w in 1u32..40, h in 1u32..10, bits in proptest::collection::vec(any::<bool>(), 400)) {
            let m = Mask::new(w, h, bits[..(w * h) as usize].to_vec()).unwrap();
            prop_assert_eq!(decode_pbm(&encode_pbm(&m)).unwrap(), m);
        }

        #[test]
        fn decoders_never_panic(data in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_ppm(&data, 0, ViewRole::Ego);
            let _ = decode_pbm(&data);
        }
    }
}
