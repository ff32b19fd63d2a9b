//! Binary checkpoint format.
//!
//! ```text
//! "IRCM"                      magic
//! u16                         format version
//! u32                         record count
//! per record:
//!   u16 name length, UTF-8 name
//!   u8 rank, rank × u32 dims
//!   product(dims) × f32 payload
//! u32 config length, UTF-8 config text (TOML)
//! ```
//!
//! All integers and floats are little-endian. Encoding a decoded checkpoint
//! reproduces the input bytes exactly.

use std::path::Path;

use thiserror::Error;

use super::{IrcamConfig, IrcamNet, NetError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IRCM";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("byte {offset}: {msg}")]
    Malformed { offset: usize, msg: String },
    #[error("{0}")]
    Io(String),
}

impl CheckpointError {
    fn at(offset: usize, msg: impl Into<String>) -> Self {
        Self::Malformed { offset, msg: msg.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
    pub config_text: String,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(CheckpointError::at(self.pos, format!("truncated {what}: need {n} bytes, {remaining} left")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String, CheckpointError> {
        let start = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::at(start, format!("{what} is not valid UTF-8")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let count = u32::try_from(self.records.len()).map_err(|_| CheckpointError::Io("too many records".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for r in &self.records {
            let name_len = u16::try_from(r.name.len())
                .map_err(|_| CheckpointError::Io(format!("parameter name too long: {}", r.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            let rank =
                u8::try_from(r.dims.len()).map_err(|_| CheckpointError::Io(format!("rank too large: {}", r.name)))?;
            out.push(rank);
            for &d in &r.dims {
                let d =
                    u32::try_from(d).map_err(|_| CheckpointError::Io(format!("dimension too large: {}", r.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            if r.dims.iter().product::<usize>() != r.data.len() {
                return Err(CheckpointError::Io(format!("record {} payload does not match its dims", r.name)));
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let cfg_len =
            u32::try_from(self.config_text.len()).map_err(|_| CheckpointError::Io("config too long".into()))?;
        out.extend_from_slice(&cfg_len.to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::at(0, "bad magic, expected \"IRCM\""));
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::at(4, format!("unsupported version {version}")));
        }
        let count = r.u32("record count")? as usize;
        let mut records = Vec::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = r.utf8(name_len, "name")?;
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dimension")? as usize);
            }
            let at = r.pos;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::at(at, format!("dims of {name} overflow")))?;
            let nbytes =
                numel.checked_mul(4).ok_or_else(|| CheckpointError::at(at, format!("payload of {name} overflows")))?;
            let payload = r.take(nbytes, "payload")?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            records.push(Record { name, dims, data });
        }
        let cfg_len = r.u32("config length")? as usize;
        let config_text = r.utf8(cfg_len, "config text")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { records, config_text })
    }

    pub fn write_file(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read_file(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

impl IrcamNet {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let records = self
            .params()
            .iter()
            .map(|(_, name, t)| Record { name: name.to_string(), dims: t.shape().to_vec(), data: t.data().to_vec() })
            .collect();
        Checkpoint { records, config_text: self.config().to_text() }
    }

    /// Rebuilds a network; the record set must match the embedded config exactly.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NetError> {
        let cfg = IrcamConfig::from_text(&ckpt.config_text)?;
        let mut net = IrcamNet::new(cfg)?;
        if ckpt.records.len() != net.params().len() {
            return Err(NetError::Config(format!(
                "checkpoint has {} records, config expects {}",
                ckpt.records.len(),
                net.params().len()
            )));
        }
        for rec in &ckpt.records {
            net.params_mut().set_values(&rec.name, &rec.dims, rec.data.clone())?;
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            records: vec![
                Record { name: "a".into(), dims: vec![2, 1], data: vec![1.5, -0.0] },
                Record { name: "b.weight".into(), dims: vec![1], data: vec![f32::MIN_POSITIVE] },
            ],
            config_text: "d_model = 8\n".into(),
        }
    }

    #[test]
    fn layout_is_little_endian_and_exact() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"IRCM");
        assert_eq!(&bytes[4..6], &1u16.to_le_bytes());
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        // first record: name len, name, rank, two dims, two floats
        assert_eq!(&bytes[10..12], &1u16.to_le_bytes());
        assert_eq!(bytes[12], b'a');
        assert_eq!(bytes[13], 2);
        assert_eq!(&bytes[14..18], &2u32.to_le_bytes());
        assert_eq!(&bytes[22..26], &1.5f32.to_le_bytes());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 3, 9, 20, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::Malformed { .. }), "{err}");
        }
        let err = Checkpoint::from_bytes(&bytes[..20]).unwrap_err();
        assert!(err.to_string().starts_with("byte 18"), "{err}");
    }

    #[test]
    fn rejects_bad_magic_and_trailing_bytes() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("trailing"));
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"IRCM");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.push(3);
        for _ in 0..3 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
