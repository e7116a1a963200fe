//! Minimal netpbm support: binary PPM (P6) frames in, binary PGM (P5)
//! saliency renders out. 8-bit only.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads a P6 PPM into a `[3,H,W]` tensor with values scaled to `[0,1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let (magic, rest) = split_token(&bytes)?;
    if magic != b"P6" {
        return Err(Error::BadImage("expected P6 magic".into()));
    }
    let (w, rest) = parse_number(rest)?;
    let (h, rest) = parse_number(rest)?;
    let (maxval, rest) = parse_number(rest)?;
    if maxval != 255 {
        return Err(Error::BadImage(format!("only 8-bit images supported, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the payload
    let payload = rest
        .get(1..)
        .ok_or_else(|| Error::BadImage("missing pixel payload".into()))?;
    if w == 0 || h == 0 {
        return Err(Error::BadImage("zero image extent".into()));
    }
    if payload.len() < w * h * 3 {
        return Err(Error::BadImage(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            w * h * 3
        )));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[c * h * w + y * w + x] = payload[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes a `[H,W]` tensor of values in `[0,1]` as a P5 PGM,
/// quantizing with `round(255 * v)` (half-up).
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch(format!("PGM image must be rank 2, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(out, "P5\n{w} {h}\n255\n").map_err(io)?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8)
        .collect();
    out.write_all(&bytes).map_err(io)?;
    out.flush().map_err(io)
}

/// Reads back a P5 PGM as values in `[0,1]` (test support / round-trip checks).
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, rest) = split_token(&bytes)?;
    if magic != b"P5" {
        return Err(Error::BadImage("expected P5 magic".into()));
    }
    let (w, rest) = parse_number(rest)?;
    let (h, rest) = parse_number(rest)?;
    let (maxval, rest) = parse_number(rest)?;
    if maxval != 255 {
        return Err(Error::BadImage("only 8-bit images supported".into()));
    }
    let payload = rest
        .get(1..1 + w * h)
        .ok_or_else(|| Error::BadImage("truncated PGM payload".into()))?;
    Tensor::new(vec![h, w], payload.iter().map(|&b| b as f32 / 255.0).collect())
}

fn split_token(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let bytes = skip_space(bytes);
    let end = bytes
        .iter()
        .position(|b| b.is_ascii_whitespace())
        .ok_or_else(|| Error::BadImage("truncated header".into()))?;
    Ok((&bytes[..end], &bytes[end..]))
}

fn skip_space(mut bytes: &[u8]) -> &[u8] {
    loop {
        while let Some(&b) = bytes.first() {
            if b.is_ascii_whitespace() {
                bytes = &bytes[1..];
            } else {
                break;
            }
        }
        if bytes.first() == Some(&b'#') {
            let end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
            bytes = &bytes[end..];
        } else {
            return bytes;
        }
    }
}

fn parse_number(bytes: &[u8]) -> Result<(usize, &[u8])> {
    let (tok, rest) = split_token(bytes)?;
    let s = std::str::from_utf8(tok).map_err(|_| Error::BadImage("non-ascii header".into()))?;
    let v = s
        .parse()
        .map_err(|_| Error::BadImage(format!("bad header number {s:?}")))?;
    Ok((v, rest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_via_handwritten_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ppm");
        // 2x1 image: red pixel, then (0, 128, 255)
        let mut bytes = b"P6\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 128, 255]);
        std::fs::write(&path, &bytes).unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.at(&[0, 0, 0]), 1.0);
        assert_eq!(img.at(&[1, 0, 0]), 0.0);
        assert!((img.at(&[1, 0, 1]) - 128.0 / 255.0).abs() < 1e-6);
        assert_eq!(img.at(&[2, 0, 1]), 1.0);
    }

    #[test]
    fn pgm_quantization_rule() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let img = Tensor::new(vec![1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        write_pgm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let payload = &bytes[bytes.len() - 3..];
        // round(127.5) rounds half up to 128
        assert_eq!(payload, &[0, 128, 255]);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        std::fs::write(&path, b"P3\n1 1\n255\n0 0 0").unwrap();
        assert!(read_ppm(&path).is_err());
    }
}
