//! Named-tensor segment format.
//!
//! ```text
//! "ENDT"  u32 version (=1)  u32 count
//! count x { u16 name_len, name bytes (utf-8), u8 rank, rank x u32 dim, f32 data (LE) }
//! ```
//! All integers are little-endian.

use std::io::{Read, Write};

use super::{ParamStore, Tensor, TensorError};

pub const SEGMENT_MAGIC: &[u8; 4] = b"ENDT";
pub const SEGMENT_VERSION: u32 = 1;

pub fn write_segment<W: Write>(w: &mut W, tensors: &[(&str, &Tensor<f32>)]) -> Result<(), TensorError> {
    w.write_all(SEGMENT_MAGIC)?;
    w.write_all(&SEGMENT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| TensorError::Corrupt(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| TensorError::Corrupt(format!("rank too large: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| TensorError::Corrupt(format!("dim too large: {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn write_store<W: Write>(w: &mut W, store: &ParamStore) -> Result<(), TensorError> {
    let items: Vec<(&str, &Tensor<f32>)> = store.iter().collect();
    write_segment(w, &items)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), TensorError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Corrupt(format!("truncated while reading {what}")),
        _ => TensorError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_segment<R: Read>(r: &mut R) -> Result<ParamStore, TensorError> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != SEGMENT_MAGIC {
        return Err(TensorError::Corrupt(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != SEGMENT_VERSION {
        return Err(TensorError::Corrupt(format!("unsupported version {version}")));
    }
    let count = read_u32(r, "count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        read_exact(r, &mut b2, "name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact(r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Corrupt("name is not utf-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(r, &mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(r, "dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        read_exact(r, &mut raw, &name)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::new(vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25]).unwrap());
        s.insert("scalar", Tensor::scalar(0.5));
        let mut buf = Vec::new();
        write_store(&mut buf, &s).unwrap();
        assert_eq!(&buf[..4], b"ENDT");
        let back = read_segment(&mut buf.as_slice()).unwrap();
        assert_eq!(back.checksum(|_| true), s.checksum(|_| true));
        assert_eq!(back, s);
    }

    #[test]
    fn truncated_and_bad_magic_fail() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let mut buf = Vec::new();
        write_store(&mut buf, &s).unwrap();
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_segment(&mut &cut[..]), Err(TensorError::Corrupt(_))));
        buf[0] = b'X';
        assert!(matches!(read_segment(&mut buf.as_slice()), Err(TensorError::Corrupt(_))));
    }
}
