//! Binary 8-bit PGM (`P5`, grayscale) and PPM (`P6`, RGB).

use std::fs;
use std::path::Path;

use super::pfm::{header_tokens, parse_extent};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Returns a (1, C, H, W) tensor with C = 1 for P5 and 3 for P6, scaled to
/// [0, 1] by the file's maxval.
pub fn read_pnm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::format(path, "unsupported magic (expected P5 or P6)")),
    };
    let (tokens, payload) = header_tokens(&bytes, 4, path, true)?;
    let width = parse_extent(tokens[1], "width", path)?;
    let height = parse_extent(tokens[2], "height", path)?;
    let maxval = match tokens[3].parse::<u32>() {
        Ok(m) if (1..=255).contains(&m) => m as f32,
        _ => return Err(Error::format(path, format!("unsupported maxval `{}`", tokens[3]))),
    };
    let n = width * height * channels;
    if payload.len() < n {
        return Err(Error::Truncated {
            path: path.into(),
            reason: format!("payload has {} bytes, expected {n}", payload.len()),
        });
    }
    let plane = width * height;
    let mut data = vec![0f32; n];
    for (i, &b) in payload[..n].iter().enumerate() {
        let (pixel, c) = (i / channels, i % channels);
        data[c * plane + pixel] = b as f32 / maxval;
    }
    Tensor::from_vec(Shape::new(1, channels, height, width), data)
}

/// Writes a (1, 1|3, H, W) tensor with values clamped to [0, 1].
pub fn write_pnm(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = image.shape();
    let magic = match (s.n(), s.c()) {
        (1, 1) => "P5",
        (1, 3) => "P6",
        _ => return Err(Error::shape(format!("PNM writer needs 1 or 3 channels, got {s}"))),
    };
    let (h, w, c) = (s.h(), s.w(), s.c());
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for pixel in 0..plane {
        for ch in 0..c {
            let v = image.data()[ch * plane + pixel].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p6_fixture_channels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let mut b = b"P6\n# two pixels\n2 1\n255\n".to_vec();
        b.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        fs::write(&p, b).unwrap();
        let t = read_pnm(&p).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 2));
        assert_eq!(
            [t.at([0, 0, 0, 0]), t.at([0, 1, 0, 0]), t.at([0, 2, 0, 0])],
            [1.0, 0.0, 0.0]
        );
        assert_eq!(
            [t.at([0, 0, 0, 1]), t.at([0, 1, 0, 1]), t.at([0, 2, 0, 1])],
            [0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn p5_is_single_channel_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let t = Tensor::from_vec(
            Shape::new(1, 1, 2, 3),
            (0..6).map(|v| (v * 50) as f32 / 255.0).collect(),
        )
        .unwrap();
        write_pnm(&t, &p).unwrap();
        let back = read_pnm(&p).unwrap();
        assert_eq!(back.shape().c(), 1);
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(matches!(read_pnm(&p), Err(Error::Format { .. })));
        fs::write(&p, b"P5\n1 1\n65535\n\0\0").unwrap();
        assert!(matches!(read_pnm(&p), Err(Error::Format { .. })));
        fs::write(&p, b"P5\n2 2\n255\n\0").unwrap();
        assert!(matches!(read_pnm(&p), Err(Error::Truncated { .. })));
    }
}
