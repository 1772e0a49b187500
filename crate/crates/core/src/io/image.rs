use std::fs;
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

fn format_err<T>(kind: &'static str, path: &Path, detail: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        kind,
        path: path.to_path_buf(),
        detail: detail.into(),
    })
}

fn plane_dims(kind: &'static str, path: &Path, t: &Tensor<f32>) -> Result<(usize, usize)> {
    match *t.dims() {
        [1, 1, h, w] | [h, w] => Ok((h, w)),
        ref d => format_err(kind, path, format!("expected a single-channel image, got dims {d:?}")),
    }
}

/// Splits a netpbm-style header into `count` whitespace-separated tokens,
/// skipping `#` comments, and returns them with the offset of the byte
/// after the single whitespace that ends the last token.
fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
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
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    (i < bytes.len()).then_some((tokens, i + 1))
}

/// Grayscale little-endian PFM with rows stored bottom to top.
pub fn write_pfm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = plane_dims("PFM", path, image)?;
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    for row in image.data().chunks(w.max(1)).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a grayscale PFM into `[1, 1, H, W]`, honoring the endianness
/// encoded in the sign of the scale field.
pub fn read_pfm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let Some((tok, offset)) = header_tokens(&bytes, 4) else {
        return format_err("PFM", path, "truncated header");
    };
    if tok[0] != "Pf" {
        return format_err("PFM", path, format!("magic `{}` is not `Pf`", tok[0]));
    }
    let (Ok(w), Ok(h), Ok(scale)) = (tok[1].parse::<usize>(), tok[2].parse::<usize>(), tok[3].parse::<f64>()) else {
        return format_err("PFM", path, "unparsable size or scale");
    };
    if scale == 0.0 || !scale.is_finite() {
        return format_err("PFM", path, "scale must be a nonzero number");
    }
    let body = &bytes[offset..];
    if body.len() != 4 * w * h {
        return format_err("PFM", path, format!("expected {} data bytes, found {}", 4 * w * h, body.len()));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0f32; w * h];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (file_row, col) = (k / w, k % w);
        data[(h - 1 - file_row) * w + col] = v;
    }
    Tensor::new([1, 1, h, w], data)
}

/// Binary 8-bit PGM (P5), rows top to bottom.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return format_err("PGM", path, format!("{} pixels for a {width}×{height} image", pixels.len()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Returns `(width, height, pixels)` of an 8-bit P5 file.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let Some((tok, offset)) = header_tokens(&bytes, 4) else {
        return format_err("PGM", path, "truncated header");
    };
    if tok[0] != "P5" {
        return format_err("PGM", path, format!("magic `{}` is not `P5`", tok[0]));
    }
    let (Ok(w), Ok(h), Ok(maxval)) = (tok[1].parse::<usize>(), tok[2].parse::<usize>(), tok[3].parse::<u32>()) else {
        return format_err("PGM", path, "unparsable size or maxval");
    };
    if maxval == 0 || maxval > 255 {
        return format_err("PGM", path, format!("only 8-bit files are supported (maxval {maxval})"));
    }
    let body = &bytes[offset..];
    if body.len() != w * h {
        return format_err("PGM", path, format!("expected {} data bytes, found {}", w * h, body.len()));
    }
    Ok((w, h, body.to_vec()))
}

/// Writes a binary mask (0 = sea, 1 = oil) as 0/255.
pub fn write_mask_pgm(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let (h, w) = plane_dims("PGM", path, mask)?;
    let mut pixels = Vec::with_capacity(h * w);
    for &v in mask.data() {
        pixels.push(match v {
            0.0 => 0,
            1.0 => 255,
            other => return format_err("PGM", path, format!("mask value {other} is not binary")),
        });
    }
    write_pgm(path, w, h, &pixels)
}

/// Reads a 0/255 mask into `[1, 1, H, W]` with values 0 and 1.
pub fn read_mask_pgm(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, pixels) = read_pgm(path)?;
    let mut data = Vec::with_capacity(pixels.len());
    for p in pixels {
        data.push(match p {
            0 => 0.0,
            255 => 1.0,
            other => return format_err("PGM", path, format!("mask pixel {other} is neither 0 nor 255")),
        });
    }
    Tensor::new([1, 1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_and_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pfm");
        let img = Tensor::new([1, 1, 2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, -0.5]).unwrap();
        write_pfm(&path, &img).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"Pf\n3 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        // First stored row is the bottom one.
        assert_eq!(&bytes[header.len()..header.len() + 4], &4.0f32.to_le_bytes());
        assert_eq!(read_pfm(&path).unwrap(), img);
    }

    #[test]
    fn pfm_big_endian_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pfm");
        let mut bytes = b"Pf\n1 2\n1.0\n".to_vec();
        bytes.extend_from_slice(&7.0f32.to_be_bytes());
        bytes.extend_from_slice(&9.0f32.to_be_bytes());
        fs::write(&path, &bytes).unwrap();
        assert_eq!(read_pfm(&path).unwrap().data(), &[9.0, 7.0]);

        fs::write(&path, b"PF\n1 1\n-1.0\n0000").unwrap();
        assert!(matches!(read_pfm(&path), Err(Error::Format { kind: "PFM", .. })));
        fs::write(&path, b"Pf\n2 2\n-1.0\n0000").unwrap();
        assert!(read_pfm(&path).is_err());
    }

    #[test]
    fn pgm_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = Tensor::new([1, 1, 2, 2], vec![0.0f32, 1.0, 1.0, 0.0]).unwrap();
        write_mask_pgm(&path, &mask).unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"P5\n2 2\n255\n\x00\xff\xff\x00");
        assert_eq!(read_mask_pgm(&path).unwrap(), mask);

        fs::write(&path, b"P5\n# comment\n2 1\n255\n\x00\x80").unwrap();
        assert_eq!(read_pgm(&path).unwrap(), (2, 1, vec![0, 128]));
        assert!(read_mask_pgm(&path).is_err());
        let soft = Tensor::new([1, 1, 1, 1], vec![0.5f32]).unwrap();
        assert!(write_mask_pgm(&path, &soft).is_err());
    }
}
