//! Little-endian binary encoding of named tensors.
//!
//! Each record is: name length (u32), UTF-8 name, rank (u32), one u64 per
//! dimension, then the values as f64.

use std::io::{self, Read, Write};

use super::Tensor;

/// Upper bound on name length and rank accepted when reading.
const MAX_NAME: usize = 1 << 12;
const MAX_RANK: usize = 8;

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads the next record, or `None` at a clean end of input.
pub fn read_tensor<R: Read>(r: &mut R) -> io::Result<Option<(String, Tensor)>> {
    let mut first = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut first[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => got += n,
        }
    }
    let name_len = u32::from_le_bytes(first) as usize;
    if name_len > MAX_NAME {
        return Err(invalid(format!("tensor name length {name_len} too large")));
    }
    let mut name = vec![0; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| invalid("tensor name is not UTF-8"))?;
    let rank = read_u32(r)? as usize;
    if rank > MAX_RANK {
        return Err(invalid(format!("tensor `{name}` has rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= 1 << 28)
        .ok_or_else(|| invalid(format!("tensor `{name}` shape {shape:?} too large")))?;
    let mut data = vec![0.0; len];
    let mut b = [0; 8];
    for v in &mut data {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    let t = Tensor::new(shape, data).map_err(|e| invalid(e.to_string()))?;
    Ok(Some((name, t)))
}

/// Reads records until the end of input.
pub fn read_all<R: Read>(r: &mut R) -> io::Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    while let Some(rec) = read_tensor(r)? {
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bit_exact() {
        let a = Tensor::new(vec![2, 3], vec![0.1, -2.5, f64::MIN_POSITIVE, 1e300, -0.0, 7.0]).unwrap();
        let b = Tensor::scalar(3.25);
        let mut buf = Vec::new();
        write_tensor(&mut buf, "w", &a).unwrap();
        write_tensor(&mut buf, "bias", &b).unwrap();
        let back = read_all(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "w");
        assert_eq!(back[0].1.shape(), a.shape());
        for (x, y) in back[0].1.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back[1].1, b);
    }

    #[test]
    fn truncated_record_errors() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, "w", &Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_all(&mut buf.as_slice()).is_err());
    }
}
