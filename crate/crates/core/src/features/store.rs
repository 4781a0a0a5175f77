use std::collections::HashSet;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::FeatureError;

pub const FEATURE_STORE_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"ENDF";
const MAX_SLOTS: usize = 400;

/// Features of one region: N slots of D values, with grid positions and
/// padding flags. Padding rows are all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub slide_id: String,
    pub region_id: String,
    pub dim: usize,
    pub positions: Vec<(u16, u16)>,
    pub padding: Vec<bool>,
    /// Row-major N x D.
    pub features: Vec<f32>,
}

impl FeatureBundle {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn real_count(&self) -> usize {
        self.padding.iter().filter(|&&p| !p).count()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |detail: String| FeatureError::InvalidBundle {
            slide_id: self.slide_id.clone(),
            region_id: self.region_id.clone(),
            detail,
        };
        let n = self.positions.len();
        if n > MAX_SLOTS {
            return Err(bad(format!("{n} slots > {MAX_SLOTS}")));
        }
        if self.padding.len() != n || self.features.len() != n * self.dim {
            return Err(bad(format!(
                "{n} positions, {} flags, {} values for D = {}",
                self.padding.len(),
                self.features.len(),
                self.dim
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for &p in &self.positions {
            if !seen.insert(p) {
                return Err(bad(format!("duplicate position {p:?}")));
            }
        }
        for i in 0..n {
            if self.padding[i] && self.row(i).iter().any(|&v| v != 0.0) {
                return Err(bad(format!("padding slot {:?} has nonzero features", self.positions[i])));
            }
        }
        Ok(())
    }
}

fn put_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| std::io::Error::other("identifier longer than 65535 bytes"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())
}

pub fn write_feature_store_to<W: Write>(w: &mut W, bundles: &[FeatureBundle]) -> Result<(), FeatureError> {
    let io = |e: std::io::Error| FeatureError::Corrupt(e.to_string());
    for b in bundles {
        b.validate()?;
    }
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FEATURE_STORE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(bundles.len() as u32).to_le_bytes()).map_err(io)?;
    for b in bundles {
        put_str(w, &b.slide_id).map_err(io)?;
        put_str(w, &b.region_id).map_err(io)?;
        w.write_all(&(b.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(b.dim as u32).to_le_bytes()).map_err(io)?;
        for (&(r, c), &pad) in b.positions.iter().zip(&b.padding) {
            w.write_all(&r.to_le_bytes()).map_err(io)?;
            w.write_all(&c.to_le_bytes()).map_err(io)?;
            w.write_all(&[pad as u8]).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(b.features.len() * 4);
        for v in &b.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

struct Cursor<R> {
    r: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>, FeatureError> {
        let mut buf = vec![0u8; n];
        self.r.read_exact(&mut buf).map_err(|_| FeatureError::Corrupt(format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u16(&mut self, what: &str) -> Result<u16, FeatureError> {
        Ok(u16::from_le_bytes(self.bytes(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, FeatureError> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String, FeatureError> {
        let n = self.u16(what)? as usize;
        String::from_utf8(self.bytes(n, what)?).map_err(|_| FeatureError::Corrupt(format!("{what} is not UTF-8")))
    }
}

pub fn read_feature_store_from<R: Read>(r: R) -> Result<Vec<FeatureBundle>, FeatureError> {
    let mut c = Cursor { r };
    if c.bytes(4, "magic")? != MAGIC {
        return Err(FeatureError::Corrupt("bad magic".into()));
    }
    let version = c.u32("version")?;
    if version != FEATURE_STORE_VERSION {
        return Err(FeatureError::Corrupt(format!("unsupported version {version}")));
    }
    let count = c.u32("bundle count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let slide_id = c.string("slide id")?;
        let region_id = c.string("region id")?;
        let n = c.u32("slot count")? as usize;
        let dim = c.u32("feature dim")? as usize;
        if n > MAX_SLOTS {
            return Err(FeatureError::Corrupt(format!("{n} slots in `{slide_id}/{region_id}`")));
        }
        let mut positions = Vec::with_capacity(n);
        let mut padding = Vec::with_capacity(n);
        for _ in 0..n {
            let row = c.u16("position")?;
            let col = c.u16("position")?;
            positions.push((row, col));
            padding.push(c.bytes(1, "padding flag")?[0] != 0);
        }
        let raw = c.bytes(n * dim * 4, "features")?;
        let features = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let b = FeatureBundle { slide_id, region_id, dim, positions, padding, features };
        b.validate().map_err(|e| FeatureError::Corrupt(e.to_string()))?;
        out.push(b);
    }
    Ok(out)
}

pub fn write_feature_store(path: &Path, bundles: &[FeatureBundle]) -> Result<(), FeatureError> {
    let f = fs::File::create(path).map_err(|e| FeatureError::Io { path: path.to_path_buf(), source: e })?;
    let mut w = BufWriter::new(f);
    write_feature_store_to(&mut w, bundles)?;
    w.flush().map_err(|e| FeatureError::Io { path: path.to_path_buf(), source: e })
}

pub fn read_feature_store(path: &Path) -> Result<Vec<FeatureBundle>, FeatureError> {
    let f = fs::File::open(path).map_err(|e| FeatureError::Io { path: path.to_path_buf(), source: e })?;
    read_feature_store_from(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> FeatureBundle {
        FeatureBundle {
            slide_id: "s1".into(),
            region_id: "x0_y0".into(),
            dim: 3,
            positions: vec![(0, 0), (0, 1), (19, 19)],
            padding: vec![false, true, false],
            features: vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0, 0.0, 0.0, 7.0, 8.0, 9.0],
        }
    }

    #[test]
    fn roundtrip_bit_exact() {
        let mut buf = Vec::new();
        write_feature_store_to(&mut buf, &[bundle(), bundle()]).unwrap();
        assert_eq!(read_feature_store_from(&buf[..]).unwrap(), vec![bundle(), bundle()]);
    }

    #[test]
    fn empty_store_valid() {
        let mut buf = Vec::new();
        write_feature_store_to(&mut buf, &[]).unwrap();
        assert_eq!(buf.len(), 12);
        assert!(read_feature_store_from(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn truncated_and_bad_magic() {
        let mut buf = Vec::new();
        write_feature_store_to(&mut buf, &[bundle()]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_feature_store_from(&buf[..]), Err(FeatureError::Corrupt(_))));
        buf[0] = b'X';
        assert!(matches!(read_feature_store_from(&buf[..]), Err(FeatureError::Corrupt(_))));
    }

    #[test]
    fn invalid_bundles_rejected() {
        let mut b = bundle();
        b.features[3] = 1.0;
        assert!(b.validate().is_err());
        let mut b = bundle();
        b.positions[1] = (0, 0);
        assert!(b.validate().is_err());
    }
}
