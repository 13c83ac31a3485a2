//! Binary 8-bit greyscale PGM export.

use std::fs;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{bail, Error, Result};

/// Encodes an `[H, W]` image with values in `[0, 1]` as `round(255·v)`.
pub fn encode_pgm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[h, w] = image.shape() else {
        bail!(
            Dimension,
            "PGM export needs an [H, W] image, got {:?}",
            image.shape()
        );
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w);
    for (i, &v) in image.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            bail!(
                Argument,
                "pixel ({}, {}) = {v} is outside [0, 1]",
                i / w,
                i % w
            );
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn export_pgm(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let bytes = encode_pgm(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_extremes() {
        let zeros = encode_pgm(&Tensor::zeros(&[2, 3])).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&zeros[..header.len()], header);
        assert!(zeros[header.len()..].iter().all(|&b| b == 0));
        assert_eq!(zeros.len(), header.len() + 6);
        let ones = encode_pgm(&Tensor::full(&[2, 3], 1.0)).unwrap();
        assert!(ones[header.len()..].iter().all(|&b| b == 255));
    }

    #[test]
    fn rounding_and_range() {
        let img = Tensor::new(&[1, 3], vec![0.5, 0.2, 1.0 / 255.0]).unwrap();
        let b = encode_pgm(&img).unwrap();
        assert_eq!(&b[b.len() - 3..], &[128, 51, 1]);
        let bad = Tensor::new(&[1, 2], vec![0.5, 1.5]).unwrap();
        assert!(matches!(encode_pgm(&bad), Err(Error::Argument(_))));
        let nan = Tensor::new(&[1, 1], vec![f32::NAN]);
        assert!(nan.is_err() || encode_pgm(&nan.unwrap()).is_err());
        assert!(encode_pgm(&Tensor::zeros(&[2, 2, 1])).is_err());
    }

    #[test]
    fn writes_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        export_pgm(&Tensor::full(&[4, 4], 0.0), &p).unwrap();
        assert_eq!(fs::read(&p).unwrap().len(), 11 + 16);
    }
}
