//! Portable float map: `Pf` header, width and height, a scale whose sign
//! selects endianness (negative = little), then 32-bit rows bottom-to-top.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::DisparityMap;
use crate::tensor::{Shape, Tensor};

/// Splits off `count` whitespace-separated header tokens; the payload starts
/// after the single whitespace byte following the last token.
pub(crate) fn header_tokens<'a>(
    bytes: &'a [u8],
    count: usize,
    path: &Path,
    allow_comments: bool,
) -> Result<(Vec<&'a str>, &'a [u8])> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || (allow_comments && bytes[i] == b'#')) {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Truncated {
                path: path.into(),
                reason: "incomplete header".into(),
            });
        }
        let tok = std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::format(path, "non-ASCII header"))?;
        tokens.push(tok);
    }
    if i >= bytes.len() {
        return Err(Error::Truncated {
            path: path.into(),
            reason: "missing payload".into(),
        });
    }
    Ok((tokens, &bytes[i + 1..]))
}

pub(crate) fn parse_extent(tok: &str, what: &str, path: &Path) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(path, format!("bad {what} `{tok}`"))),
    }
}

/// Reads a single-channel PFM as a (1, 1, H, W) tensor with row 0 at the top.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(b"Pf") || bytes.get(2).is_some_and(|b| !b.is_ascii_whitespace()) {
        return Err(Error::format(path, "bad magic (expected `Pf`)"));
    }
    let (tokens, payload) = header_tokens(&bytes, 4, path, false)?;
    let width = parse_extent(tokens[1], "width", path)?;
    let height = parse_extent(tokens[2], "height", path)?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::format(path, format!("bad scale `{}`", tokens[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(path, "scale must be non-zero"));
    }
    let little = scale < 0.0;
    let n = width * height;
    if payload.len() < 4 * n {
        return Err(Error::Truncated {
            path: path.into(),
            reason: format!("payload has {} bytes, expected {}", payload.len(), 4 * n),
        });
    }
    let mut data = vec![0f32; n];
    for (i, chunk) in payload[..4 * n].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, col) = (i / width, i % width);
        data[(height - 1 - row) * width + col] = v;
    }
    Tensor::from_vec(Shape::new(1, 1, height, width), data)
}

/// Writes a (1, 1, H, W) tensor as little-endian PFM.
pub fn write_pfm(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = image.shape();
    if s.n() != 1 || s.c() != 1 {
        return Err(Error::shape(format!("PFM writer needs a 1x1xHxW tensor, got {s}")));
    }
    let (h, w) = (s.h(), s.w());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    for row in (0..h).rev() {
        for &v in &image.data()[row * w..(row + 1) * w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Invalid pixels are stored as +inf.
pub fn write_disparity_pfm(map: &DisparityMap, path: impl AsRef<Path>) -> Result<()> {
    let values = map
        .values()
        .iter()
        .zip(map.valid())
        .map(|(&v, &ok)| if ok { v } else { f32::INFINITY })
        .collect();
    write_pfm(&Tensor::from_plane(map.height(), map.width(), values)?, path)
}

/// Non-finite and negative values become invalid pixels.
pub fn read_disparity_pfm(path: impl AsRef<Path>) -> Result<DisparityMap> {
    let t = read_pfm(path)?;
    let s = t.shape();
    DisparityMap::dense(s.h(), s.w(), t.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(scale: &str, little: bool) -> Vec<u8> {
        // Rows on disk bottom-to-top: [3, 4] then [1, 2].
        let mut b = format!("Pf\n2 2\n{scale}\n").into_bytes();
        for v in [3.0f32, 4.0, 1.0, 2.0] {
            b.extend_from_slice(&if little { v.to_le_bytes() } else { v.to_be_bytes() });
        }
        b
    }

    #[test]
    fn both_endiannesses_decode_identically() {
        let dir = tempfile::tempdir().unwrap();
        let le = dir.path().join("le.pfm");
        let be = dir.path().join("be.pfm");
        fs::write(&le, fixture("-1.0", true)).unwrap();
        fs::write(&be, fixture("1.0", false)).unwrap();
        let a = read_pfm(&le).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a, read_pfm(&be).unwrap());
    }

    #[test]
    fn distinct_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pfm");
        let mut bad = fixture("-1.0", true);
        bad[1] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Format { .. })));
        let mut short = fixture("-1.0", true);
        short.truncate(short.len() - 3);
        fs::write(&p, &short).unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Truncated { .. })));
        fs::write(&p, fixture("0.0", true)).unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn disparity_invalid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let m = DisparityMap::new(1, 3, vec![1.5, 0.0, 2.0], vec![true, false, true]).unwrap();
        write_disparity_pfm(&m, &p).unwrap();
        let back = read_disparity_pfm(&p).unwrap();
        assert_eq!(back.valid(), m.valid());
        assert_eq!(back.get(0, 0), 1.5);
        assert_eq!(back.get(0, 2), 2.0);
    }
}
