//! Readers and writers for config documents, detector record files and
//! fluence volumes. The formats are described in `docs/formats.md`.

mod config;
mod detector;
mod fluence;

use std::fs;
use std::io::{self, Write};
use std::path::Path;

pub use config::{
    format_sig9, parse_config, parse_config_unchecked, round_sig9, write_config, ConfigDocument,
    ConfigError, DetectorSection, DomainSection, ForwardSection, OptodeSection, SessionSection,
    SourceSection, SphereShape, MAX_GATES,
};
pub use detector::{
    decode_detector_records, encode_detector_records, read_detector_records,
    write_detector_records, DetectorRecordSet, DETECTOR_MAGIC, DETECTOR_VERSION, ROW_BYTES,
};
pub use fluence::{read_fluence, verify_fluence, write_fluence, FluenceGrid, FLUENCE_MAGIC, FLUENCE_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a photonforge file of the expected kind")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file is truncated")]
    Truncated,
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("{0}")]
    Invalid(String),
}

/// xxh64 with seed 0, the checksum used by both binary formats.
pub fn checksum(bytes: &[u8]) -> u64 {
    xxhash_rust::xxh64::xxh64(bytes, 0)
}

/// Little-endian cursor over a byte slice.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn remaining(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Writes `path` through a sibling `.tmp` file and a rename, so readers
/// never observe a partial file.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut fs::File) -> Result<(), FormatError>) -> Result<(), FormatError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let result = (|| {
        let mut f = fs::File::create(tmp)?;
        write(&mut f)?;
        f.flush()?;
        f.sync_all()?;
        Ok::<_, FormatError>(())
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(tmp);
        return Err(e);
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn write_atomic_bytes(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    write_atomic(path, |f| {
        f.write_all(bytes)?;
        Ok(())
    })
}
