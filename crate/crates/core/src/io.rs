//! The DBPT tensor container and JSON-headed multi-tensor files.
//!
//! Tensor layout (all little-endian):
//! magic `DBPT`, version `u32`, dtype `u8` (0 = f32, 1 = f64), ndim `u8`,
//! dims as `u64` each, then raw values. Round-trips are bitwise exact.
//!
//! Multi-tensor files (weights, tapes, reports) prepend a JSON header:
//! magic `DBPC`, version `u32`, header length `u32`, UTF-8 JSON bytes, then a
//! sequence of DBPT blobs in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"DBPT";
pub const CONTAINER_MAGIC: &[u8; 4] = b"DBPC";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[T::DTYPE, t.ndim() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes_vec())?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format("truncated tensor data"))
}

/// Read a tensor whose dtype must match `T` exactly.
pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let (dtype, tensor) = read_tensor_any_as::<T, R>(r)?;
    if dtype != T::DTYPE {
        return Err(Error::format(format!(
            "tensor dtype code {} does not match requested precision (code {}); \
             pass allow_cast to convert",
            dtype,
            T::DTYPE
        )));
    }
    Ok(tensor)
}

/// Read a tensor of either dtype, converting into `T`. Returns the stored
/// dtype code so callers can gate lossy narrowing behind an explicit flag.
pub fn read_tensor_any_as<T: Scalar, R: Read>(r: &mut R) -> Result<(u8, Tensor<T>)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format(format!("bad tensor magic {:?}", magic)));
    }
    let mut ver = [0u8; 4];
    read_exact(r, &mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported tensor version {version}")));
    }
    let mut head = [0u8; 2];
    read_exact(r, &mut head)?;
    let (dtype, ndim) = (head[0], head[1] as usize);
    if dtype > 1 {
        return Err(Error::format(format!("unknown dtype code {dtype}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut d = [0u8; 8];
        read_exact(r, &mut d)?;
        shape.push(u64::from_le_bytes(d) as usize);
    }
    let numel: usize = shape.iter().product();
    let width = if dtype == 0 { 4 } else { 8 };
    let mut raw = vec![0u8; numel * width];
    read_exact(r, &mut raw)?;
    let mut data = Vec::with_capacity(numel);
    for chunk in raw.chunks_exact(width) {
        let v = if dtype == 0 {
            f32::from_le_bytes(chunk.try_into().unwrap()) as f64
        } else {
            f64::from_le_bytes(chunk.try_into().unwrap())
        };
        data.push(T::from_f64(v));
    }
    Ok((dtype, Tensor::new(shape, data)?))
}

pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

/// Write a JSON header followed by named tensors.
pub fn write_container<T: Scalar, W: Write>(
    w: &mut W,
    header_json: &str,
    tensors: &[&Tensor<T>],
) -> Result<()> {
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let hb = header_json.as_bytes();
    w.write_all(&(hb.len() as u32).to_le_bytes())?;
    w.write_all(hb)?;
    for t in tensors {
        write_tensor(w, t)?;
    }
    Ok(())
}

/// Read a container header; the reader is left positioned at the first blob.
pub fn read_container_header<R: Read>(r: &mut R) -> Result<String> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::format(format!("bad container magic {:?}", magic)));
    }
    let mut ver = [0u8; 4];
    read_exact(r, &mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported container version {version}"
        )));
    }
    let mut len = [0u8; 4];
    read_exact(r, &mut len)?;
    let mut hb = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact(r, &mut hb)?;
    String::from_utf8(hb).map_err(|_| Error::format("header is not UTF-8"))
}

pub fn save_container<T: Scalar>(
    path: &Path,
    header_json: &str,
    tensors: &[&Tensor<T>],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_container(&mut w, header_json, tensors)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn round_trip_bitwise_f64() {
        let t = Tensor::new(vec![2, 3], vec![1.5f64, -0.0, 3.25e-7, 1e300, -4.0, 0.1]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back: Tensor<f64> = read_tensor(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // and the bytes themselves round-trip
        let mut buf2 = Vec::new();
        write_tensor(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn scalar_rank0_round_trip() {
        let t = Tensor::<f32>::scalar(2.5);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back: Tensor<f32> = read_tensor(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(back.ndim(), 0);
        assert_eq!(back.item().unwrap(), 2.5);
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"XXXX\x01\x00\x00\x00\x01\x00".to_vec();
        let r: Result<Tensor<f64>> = read_tensor(&mut Cursor::new(&buf));
        assert!(matches!(r, Err(Error::Format(_))));
    }

    #[test]
    fn truncated_rejected() {
        let t = Tensor::new(vec![4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 5);
        let r: Result<Tensor<f64>> = read_tensor(&mut Cursor::new(&buf));
        assert!(matches!(r, Err(Error::Format(_))));
    }

    #[test]
    fn dtype_mismatch_needs_cast() {
        let t = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let strict: Result<Tensor<f32>> = read_tensor(&mut Cursor::new(&buf));
        assert!(matches!(strict, Err(Error::Format(_))));
        let (dtype, lossy): (u8, Tensor<f32>) =
            read_tensor_any_as(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(dtype, 1);
        assert_eq!(lossy.data(), &[1.0f32, 2.0]);
    }

    #[test]
    fn container_round_trip() {
        let a = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![3.0f64, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_container(&mut buf, r#"{"names":["a","b"]}"#, &[&a, &b]).unwrap();
        let mut cur = Cursor::new(&buf);
        let header = read_container_header(&mut cur).unwrap();
        assert!(header.contains("names"));
        let ra: Tensor<f64> = read_tensor(&mut cur).unwrap();
        let rb: Tensor<f64> = read_tensor(&mut cur).unwrap();
        assert_eq!(ra, a);
        assert_eq!(rb, b);
    }
}
