//! Binary portable pixmap output (P6) and graymap output (P5).
//!
//! Pixel mapping is fixed: -1.0 -> byte 0, +1.0 -> byte 255, linear in
//! between, rounded half away from zero, clamped. Files use maxval 255.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::{DataError, Result};
use crate::tensor::Tensor;

pub fn unit_to_byte(v: f64) -> u8 {
    (((v + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
}

pub fn byte_to_unit(b: u8) -> f64 {
    2.0 * b as f64 / 255.0 - 1.0
}

/// Write a [C,H,W] or [1,C,H,W] image in [-1,1]; C=3 produces P6, C=1
/// produces P5.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image_dims(image)?;
    let data = image.data();
    let plane = h * w;
    let mut out = Vec::with_capacity(64 + c * plane);
    match c {
        3 => out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes()),
        1 => out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes()),
        other => {
            return Err(DataError::Unsupported(format!(
                "cannot encode {other}-channel image as PPM/PGM"
            )))
        }
    }
    // Interleave channel planes into per-pixel order.
    for p in 0..plane {
        for ci in 0..c {
            out.push(unit_to_byte(data[ci * plane + p]));
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        [1, c, h, w] => Ok((*c, *h, *w)),
        other => Err(DataError::Unsupported(format!(
            "expected [C,H,W] or [1,C,H,W], got {other:?}"
        ))),
    }
}

/// Read a binary P5/P6 file back into a [C,H,W] tensor in [-1,1].
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    parse_pnm(&bytes)
}

fn parse_pnm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = take_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(DataError::Unsupported(format!("not a binary PNM file (magic {other})"))),
    };
    let w: usize = take_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| DataError::SizeMismatch("bad width".into()))?;
    let h: usize = take_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| DataError::SizeMismatch("bad height".into()))?;
    let maxval: usize = take_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| DataError::SizeMismatch("bad maxval".into()))?;
    if maxval != 255 {
        return Err(DataError::Unsupported(format!("maxval {maxval}, only 255 supported")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    let payload = &bytes[pos..];
    let expected = channels * w * h;
    if payload.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(DataError::SizeMismatch(format!(
            "{} payload bytes, expected {expected}",
            payload.len()
        )));
    }
    // De-interleave into channel planes.
    let plane = w * h;
    let mut data = vec![0.0; channels * plane];
    for p in 0..plane {
        for ci in 0..channels {
            data[ci * plane + p] = byte_to_unit(payload[p * channels + ci]);
        }
    }
    Ok(Tensor::from_vec(&[channels, h, w], data).unwrap())
}

/// Read one whitespace-delimited header token, skipping '#' comments.
fn take_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    let mut tok = String::new();
    while *pos < bytes.len() {
        let b = bytes[*pos];
        if b == b'#' && tok.is_empty() {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        if b.is_ascii_whitespace() {
            *pos += 1;
            if !tok.is_empty() {
                return Ok(tok);
            }
            continue;
        }
        tok.push(b as char);
        *pos += 1;
    }
    if tok.is_empty() {
        Err(DataError::Truncated { expected: 1, found: 0 })
    } else {
        Ok(tok)
    }
}

/// Arrange equally sized [C,H,W] images into a grid with a 2-pixel white
/// separator, returning one [C,H',W'] image.
pub fn montage(images: &[Tensor], cols: usize) -> Result<Tensor> {
    if images.is_empty() || cols == 0 {
        return Err(DataError::Invalid("montage needs at least one image".into()));
    }
    let (c, h, w) = image_dims(&images[0])?;
    for img in images {
        let dims = image_dims(img)?;
        if dims != (c, h, w) {
            return Err(DataError::SizeMismatch("montage images differ in shape".into()));
        }
    }
    let sep = 2;
    let rows = images.len().div_ceil(cols);
    let gh = rows * h + (rows - 1) * sep;
    let gw = cols * w + (cols - 1) * sep;
    let mut out = vec![1.0; c * gh * gw];
    for (i, img) in images.iter().enumerate() {
        let (r0, c0) = (i / cols * (h + sep), i % cols * (w + sep));
        let data = img.data();
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ci * gh + r0 + y) * gw + c0 + x] = data[(ci * h + y) * w + x];
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[c, gh, gw], out).unwrap())
}

/// Default square-ish grid for `n` images.
pub fn grid_cols(n: usize) -> usize {
    (n as f64).sqrt().ceil() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_endpoints_and_rounding() {
        assert_eq!(unit_to_byte(-1.0), 0);
        assert_eq!(unit_to_byte(1.0), 255);
        assert_eq!(unit_to_byte(-1.5), 0);
        assert_eq!(unit_to_byte(2.0), 255);
        // 127.5 is exactly representable; half rounds away from zero.
        assert_eq!(unit_to_byte(0.0), 128);
        // Every byte value round-trips through the unit mapping.
        for b in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(b)), b);
        }
    }

    #[test]
    fn ppm_roundtrip_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let mut rng = crate::rng::SeedRng::new(4);
        let img = rng.normal_tensor(&[3, 5, 7]).map(f64::tanh);
        write_image(&path, &img).unwrap();

        let loaded = read_image(&path).unwrap();
        assert_eq!(loaded.shape(), &[3, 5, 7]);
        // Writing the loaded image reproduces identical bytes.
        let path2 = dir.path().join("img2.ppm");
        write_image(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn pgm_single_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = Tensor::from_vec(&[1, 2, 2], vec![-1.0, 1.0, 0.0, -0.5]).unwrap();
        write_image(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        let loaded = read_image(&path).unwrap();
        assert_eq!(loaded.data()[0], -1.0);
        assert_eq!(loaded.data()[1], 1.0);
    }

    #[test]
    fn montage_geometry() {
        let a = Tensor::filled(&[1, 4, 4], -1.0);
        let b = Tensor::filled(&[1, 4, 4], 1.0);
        let g = montage(&[a, b], 2).unwrap();
        assert_eq!(g.shape(), &[1, 4, 10]);
        // Separator column is white.
        assert_eq!(g.data()[4], 1.0);
        assert_eq!(grid_cols(10), 4);
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(read_image(&path), Err(DataError::Truncated { .. })));
    }
}
