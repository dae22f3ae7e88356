//! Flat binary tensor format, shared by checkpoints and feature files.
//!
//! Layout: magic bytes `DLC1`, u32 rank, one u32 per dimension, then the
//! raw row-major f64 data. All integers and floats are little-endian.

use std::io::{Read, Write};

use super::{Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"DLC1";

/// Ranks above this are rejected as corrupt rather than allocated.
const MAX_RANK: u32 = 8;

impl Tensor {
    pub fn write_dlc1<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in self.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in self.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dlc1<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::BadFile(format!(
                "bad magic {:?}, expected {:?}",
                magic, MAGIC
            )));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf);
        if rank > MAX_RANK {
            return Err(TensorError::BadFile(format!("rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            r.read_exact(&mut u32buf)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut f64buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut f64buf)?;
            data.push(f64::from_le_bytes(f64buf));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::BadFile(
                "tensor payload contains non-finite values".into(),
            ));
        }
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn to_dlc1_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 4 * self.rank() + 8 * self.len());
        self.write_dlc1(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save_dlc1(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_dlc1(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_dlc1(path: &std::path::Path) -> Result<Tensor> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Tensor::read_dlc1(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 1e-300, 3.25, -0.0]).unwrap();
        let bytes = t.to_dlc1_bytes();
        let back = Tensor::read_dlc1(&mut bytes.as_slice()).unwrap();
        assert_eq!(t.shape(), back.shape());
        // Bitwise, not just approximate.
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let bytes = t.to_dlc1_bytes();
        assert_eq!(&bytes[0..4], b"DLC1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 16 + 2 * 8);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = Tensor::zeros(&[2]).to_dlc1_bytes();
        bytes[0] = b'X';
        let err = Tensor::read_dlc1(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, TensorError::BadFile(_)));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = Tensor::zeros(&[4]).to_dlc1_bytes();
        let err = Tensor::read_dlc1(&mut bytes[..bytes.len() - 3].as_ref()).unwrap_err();
        assert!(matches!(err, TensorError::Io(_)));
    }
}
