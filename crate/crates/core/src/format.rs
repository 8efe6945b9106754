//! Binary container shared by checkpoints and datasets.
//!
//! ```text
//! magic        4 bytes
//! version      u32 LE
//! header_len   u32 LE, then header_len bytes of UTF-8 JSON
//! count        u64 LE
//! count × { name_len u32 LE, name UTF-8, rank u32 LE,
//!           rank × dim u64 LE, numel × f32 LE }
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SHPI";
pub const DATASET_MAGIC: [u8; 4] = *b"SHPD";

pub fn write_container<W: Write>(
    w: &mut W,
    magic: [u8; 4],
    header: &str,
    tensors: &[(&str, &Tensor<f32>)],
) -> Result<()> {
    w.write_all(&magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let header = header.as_bytes();
    w.write_all(&len_u32(header.len())?.to_le_bytes())?;
    w.write_all(header)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&len_u32(name.len())?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&len_u32(t.rank())?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
}

/// Parsed container: JSON header and tensors in file order.
pub struct Container {
    pub header: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn read_container<R: Read>(r: &mut R, magic: [u8; 4]) -> Result<Container> {
    let found: [u8; 4] = read_array(r)?;
    if found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = read_u32(r)? as usize;
    let header = read_string(r, header_len)?;
    let count = read_u64(r)?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let name = read_string(r, name_len)?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    Ok(Container { header, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let t = Tensor::new(&[2], vec![1.0f32, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_container(&mut buf, CHECKPOINT_MAGIC, "{}", &[("w", &t)]).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"SHPI");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"{}");
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(b"w");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_wrong_magic_and_version() {
        let t = Tensor::<f32>::zeros(&[1]);
        let mut buf = Vec::new();
        write_container(&mut buf, DATASET_MAGIC, "{}", &[("x", &t)]).unwrap();
        assert!(read_container(&mut buf.as_slice(), CHECKPOINT_MAGIC).is_err());
        buf[4] = 9;
        assert!(read_container(&mut buf.as_slice(), DATASET_MAGIC).is_err());
    }

    #[test]
    fn truncated_input_is_an_error() {
        let t = Tensor::<f32>::ones(&[4]);
        let mut buf = Vec::new();
        write_container(&mut buf, CHECKPOINT_MAGIC, "{}", &[("x", &t)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_container(&mut buf.as_slice(), CHECKPOINT_MAGIC).is_err());
    }
}
