//! Binary checkpoint files.
//!
//! Layout (little-endian):
//! `magic "DGMD" | version u32 | dtype len u8 + bytes | arch id len u16 +
//! bytes | feature_dim u32 | num_classes u32 | three parameter sections
//! (extractor, classifier, head), each count u64 + raw scalars`.
//!
//! Raw scalar bytes round-trip bit-exactly. Oracle checkpoints carry empty
//! classifier/head sections.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{params_from_le_bytes, params_to_le_bytes, Scalar};

const MAGIC: &[u8; 4] = b"DGMD";
const VERSION: u32 = 1;

/// Everything needed to rebuild a model: architecture id, shape metadata,
/// and the three flat parameter vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint<T> {
    pub arch_id: String,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub extractor: Vec<T>,
    pub classifier: Vec<T>,
    pub head: Vec<T>,
}

impl<T: Scalar> ModelCheckpoint<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let dtype = T::DTYPE.as_bytes();
        buf.push(dtype.len() as u8);
        buf.extend_from_slice(dtype);
        let arch = self.arch_id.as_bytes();
        if arch.len() > u16::MAX as usize {
            return Err(Error::contract("architecture id too long"));
        }
        buf.extend_from_slice(&(arch.len() as u16).to_le_bytes());
        buf.extend_from_slice(arch);
        buf.extend_from_slice(&(self.feature_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for section in [&self.extractor, &self.classifier, &self.head] {
            buf.extend_from_slice(&(section.len() as u64).to_le_bytes());
            buf.extend_from_slice(&params_to_le_bytes(section));
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0, path: &path.display().to_string() };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::data(format!("{} is not a checkpoint file", path.display())));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::data(format!(
                "checkpoint {} has format version {version}, expected {VERSION}",
                path.display()
            )));
        }
        let dtype_len = cur.take(1)?[0] as usize;
        let dtype = std::str::from_utf8(cur.take(dtype_len)?)
            .map_err(|_| Error::data("bad dtype tag"))?
            .to_string();
        if dtype != T::DTYPE {
            return Err(Error::data(format!(
                "checkpoint {} stores {dtype} parameters, requested {}",
                path.display(),
                T::DTYPE
            )));
        }
        let arch_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let arch_id = std::str::from_utf8(cur.take(arch_len)?)
            .map_err(|_| Error::data("bad architecture id"))?
            .to_string();
        let feature_dim = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let num_classes = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let mut sections = Vec::with_capacity(3);
        for _ in 0..3 {
            let count = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
            let raw = cur.take(count * T::BYTES)?;
            sections.push(params_from_le_bytes::<T>(raw));
        }
        cur.expect_end()?;
        let head = sections.pop().unwrap();
        let classifier = sections.pop().unwrap();
        let extractor = sections.pop().unwrap();
        Ok(ModelCheckpoint { arch_id, feature_dim, num_classes, extractor, classifier, head })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::data(format!("checkpoint {} is truncated", self.path)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::data(format!(
                "checkpoint {} has {} trailing bytes",
                self.path,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
