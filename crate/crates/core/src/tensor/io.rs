//! Flat binary tensor container: magic "COAT", u8 dtype tag, u8 rank,
//! little-endian u64 extents, then raw little-endian values.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

const MAGIC: &[u8; 4] = b"COAT";

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(6 + t.rank() * 8 + t.len() * T::BYTE_WIDTH);
    buf.extend_from_slice(MAGIC);
    buf.push(T::DTYPE.tag());
    buf.push(t.rank() as u8);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Contract("bad tensor container magic".into()));
    }
    let dtype = Dtype::from_tag(head[4])
        .ok_or_else(|| Error::Contract(format!("unknown dtype tag {}", head[4])))?;
    if dtype != T::DTYPE {
        return Err(Error::Contract(format!(
            "container holds {:?}, requested {:?}",
            dtype,
            T::DTYPE
        )));
    }
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let len = super::checked_len(&shape)?;
    let mut raw = vec![0u8; len * T::BYTE_WIDTH];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(T::BYTE_WIDTH)
        .map(T::read_le)
        .collect::<Vec<_>>();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn round_trip_preserves_bits() {
        let mut rng = SplitMix64::new(11);
        let t = Tensor::<f64>::rand_uniform(&[3, 4, 2], -1.0, 1.0, &mut rng);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back: Tensor<f64> = read_tensor(&mut &buf[..]).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(t
            .data()
            .iter()
            .zip(back.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_is_the_documented_layout() {
        let t = Tensor::<f32>::zeros(&[2, 3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"COAT");
        assert_eq!(buf[4], 0); // f32 tag
        assert_eq!(buf[5], 2); // rank
        assert_eq!(u64::from_le_bytes(buf[6..14].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[14..22].try_into().unwrap()), 3);
        assert_eq!(buf.len(), 22 + 6 * 4);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let t = Tensor::<f32>::zeros(&[2]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert!(read_tensor::<f64>(&mut &buf[..]).is_err());
    }
}
