//! Tensor container: `"TNSR"`, version `u8 = 1`, dtype `u8` (0 = f32,
//! 1 = f64), ndim `u8`, one pad byte, `ndim` little-endian `u32` extents,
//! then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use crate::diffcore::{Dtype, Scalar, Tensor};
use crate::error::{bail, Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;
const HEADER: usize = 8;

/// A decoded tensor of whichever element type the container declared.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Ok(t),
            AnyTensor::F64(_) => bail!(Format, "expected an f32 tensor, found f64"),
        }
    }

    pub fn into_f64(self) -> Result<Tensor<f64>> {
        match self {
            AnyTensor::F64(t) => Ok(t),
            AnyTensor::F32(_) => bail!(Format, "expected an f64 tensor, found f32"),
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    assert!(t.rank() <= u8::MAX as usize, "rank exceeds container limit");
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    out.push(0);
    for &d in t.shape() {
        out.extend_from_slice(&u32::try_from(d).expect("extent fits u32").to_le_bytes());
    }
    out.reserve(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    encode(t, &mut out);
    out
}

fn parse<T: Scalar>(shape: &[usize], payload: &[u8]) -> Result<Tensor<T>> {
    let w = T::DTYPE.size();
    let data = payload.chunks_exact(w).map(T::read_le).collect();
    Tensor::new(shape, data)
}

/// Decodes one container from the front of `bytes`; returns it and the bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        bail!(Format, "missing TNSR magic");
    }
    if bytes[4] != VERSION {
        bail!(Format, "unsupported container version {}", bytes[4]);
    }
    let dtype = Dtype::from_code(bytes[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[5])))?;
    let ndim = bytes[6] as usize;
    let dims_end = HEADER + 4 * ndim;
    if bytes.len() < dims_end {
        bail!(Format, "truncated extents");
    }
    let shape: Vec<usize> = bytes[HEADER..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let end = dims_end + count * dtype.size();
    if bytes.len() < end {
        bail!(
            Format,
            "payload truncated: need {} bytes, have {}",
            end - dims_end,
            bytes.len() - dims_end
        );
    }
    let payload = &bytes[dims_end..end];
    let t = match dtype {
        Dtype::F32 => AnyTensor::F32(parse(&shape, payload)?),
        Dtype::F64 => AnyTensor::F64(parse(&shape, payload)?),
    };
    Ok((t, end))
}

/// Decodes every container in a back-to-back stream.
pub fn decode_all(mut bytes: &[u8]) -> Result<Vec<AnyTensor>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (t, used) = decode(bytes)?;
        out.push(t);
        bytes = &bytes[used..];
    }
    Ok(out)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<AnyTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        bail!(
            Format,
            "{}: {} trailing bytes after tensor",
            path.display(),
            bytes.len() - used
        );
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(&[2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = to_bytes(&t);
        assert_eq!(&b[..8], &[b'T', b'N', b'S', b'R', 1, 0, 2, 0]);
        assert_eq!(&b[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(b.len(), 16 + 24);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(decode(b"NOPE0000"), Err(Error::Format(_))));
        let mut b = to_bytes(&Tensor::<f64>::zeros(&[4]));
        b.truncate(b.len() - 1);
        assert!(decode(&b).is_err());
        let mut v = to_bytes(&Tensor::<f64>::zeros(&[4]));
        v[4] = 9;
        assert!(decode(&v).is_err());
    }

    fn shape() -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(1usize..5, 0..=4)
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(shape in shape(), seed in any::<u64>(), wide in any::<bool>()) {
            let n: usize = shape.iter().product();
            let vals: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64)) as f64).sin() * 1e3).collect();
            if wide {
                let t = Tensor::new(&shape, vals).unwrap();
                let (back, used) = decode(&to_bytes(&t)).unwrap();
                prop_assert_eq!(used, to_bytes(&t).len());
                let back = back.into_f64().unwrap();
                prop_assert_eq!(back.shape(), t.shape());
                prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            } else {
                let t = Tensor::new(&shape, vals.iter().map(|&v| v as f32).collect()).unwrap();
                let back = decode(&to_bytes(&t)).unwrap().0.into_f32().unwrap();
                prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
                prop_assert_eq!(back.shape(), t.shape());
            }
        }
    }
}
