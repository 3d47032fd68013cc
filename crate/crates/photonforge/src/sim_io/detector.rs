//! Detector record files: every detected photon of a run, one fixed-size
//! little-endian row each, sorted by photon index.

use std::io::{Read, Write};

use photonforge_core::transport::{DetectorRecord, TimeGates};
use photonforge_core::{TissueTag, Vec3, TISSUE_COUNT};

use super::{checksum, ByteReader, FormatError};

pub const DETECTOR_MAGIC: [u8; 8] = *b"PFDETREC";
pub const DETECTOR_VERSION: u32 = 1;
/// Bytes per record row.
pub const ROW_BYTES: usize = 8 + 4 + 3 * 8 + 8 + 8 + TISSUE_COUNT * 8 + 8;

/// All detections of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorRecordSet {
    pub scenario_id: String,
    pub photon_count: u64,
    pub seed: u64,
    pub gates: TimeGates,
    records: Vec<DetectorRecord>,
}

impl DetectorRecordSet {
    /// Records are put in canonical order (by photon index, stable).
    pub fn new(
        scenario_id: impl Into<String>,
        photon_count: u64,
        seed: u64,
        gates: TimeGates,
        mut records: Vec<DetectorRecord>,
    ) -> Self {
        records.sort_by_key(|r| r.photon_index);
        Self {
            scenario_id: scenario_id.into(),
            photon_count,
            seed,
            gates,
            records,
        }
    }

    pub fn records(&self) -> &[DetectorRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<DetectorRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.records.iter().map(|r| r.exit_weight).sum()
    }
}

fn body(set: &DetectorRecordSet) -> Vec<u8> {
    let mut b = Vec::with_capacity(128 + set.records.len() * ROW_BYTES);
    let id = set.scenario_id.as_bytes();
    b.extend_from_slice(&(id.len() as u32).to_le_bytes());
    b.extend_from_slice(id);
    b.extend_from_slice(&set.photon_count.to_le_bytes());
    b.extend_from_slice(&set.seed.to_le_bytes());
    b.extend_from_slice(&set.gates.t0.to_le_bytes());
    b.extend_from_slice(&set.gates.width.to_le_bytes());
    b.extend_from_slice(&(set.gates.count as u32).to_le_bytes());
    b.push(TISSUE_COUNT as u8);
    for tag in TissueTag::ALL {
        let name = tag.name().as_bytes();
        b.push(tag as u8);
        b.push(name.len() as u8);
        b.extend_from_slice(name);
    }
    b.extend_from_slice(&(set.records.len() as u64).to_le_bytes());
    for r in &set.records {
        b.extend_from_slice(&r.photon_index.to_le_bytes());
        b.extend_from_slice(&r.detector_index.to_le_bytes());
        for v in r.exit_position.to_array() {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&r.exit_weight.to_le_bytes());
        b.extend_from_slice(&r.time_of_flight.to_le_bytes());
        for v in r.partial_paths {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&r.scatter_count.to_le_bytes());
    }
    b
}

/// Serializes a record set: magic, version, checksum of the remainder, body.
pub fn encode_detector_records(set: &DetectorRecordSet) -> Vec<u8> {
    let body = body(set);
    let mut out = Vec::with_capacity(20 + body.len());
    out.extend_from_slice(&DETECTOR_MAGIC);
    out.extend_from_slice(&DETECTOR_VERSION.to_le_bytes());
    out.extend_from_slice(&checksum(&body).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn write_detector_records<W: Write>(mut w: W, set: &DetectorRecordSet) -> Result<(), FormatError> {
    w.write_all(&encode_detector_records(set))?;
    w.flush()?;
    Ok(())
}

pub fn read_detector_records<R: Read>(mut r: R) -> Result<DetectorRecordSet, FormatError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_detector_records(&bytes)
}

pub fn decode_detector_records(bytes: &[u8]) -> Result<DetectorRecordSet, FormatError> {
    let mut h = ByteReader::new(bytes);
    if h.take(8)? != DETECTOR_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = h.u32()?;
    if version != DETECTOR_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let stored = h.u64()?;
    let rest = h.remaining();
    if checksum(rest) != stored {
        return Err(FormatError::ChecksumMismatch);
    }
    let mut b = ByteReader::new(rest);
    let id_len = b.u32()? as usize;
    let scenario_id = String::from_utf8(b.take(id_len)?.to_vec())
        .map_err(|_| FormatError::Invalid("scenario id is not UTF-8".into()))?;
    let photon_count = b.u64()?;
    let seed = b.u64()?;
    let t0 = b.f64()?;
    let width = b.f64()?;
    let count = b.u32()? as usize;
    let gates = TimeGates::new(t0, width, count)
        .map_err(|e| FormatError::Invalid(format!("gate spec: {e}")))?;
    let legend_len = b.u8()? as usize;
    if legend_len != TISSUE_COUNT {
        return Err(FormatError::Invalid(format!("tissue legend has {legend_len} entries")));
    }
    for tag in TissueTag::ALL {
        let code = b.u8()?;
        let n = b.u8()? as usize;
        let name = b.take(n)?;
        if code != tag as u8 || name != tag.name().as_bytes() {
            return Err(FormatError::Invalid("tissue legend does not match this build".into()));
        }
    }
    let rows = b.u64()?;
    if rows > photon_count {
        return Err(FormatError::Invalid(format!(
            "{rows} records for {photon_count} photons"
        )));
    }
    let expected = (rows as usize).checked_mul(ROW_BYTES);
    if expected != Some(b.remaining().len()) {
        return Err(FormatError::Truncated);
    }
    let mut records = Vec::with_capacity(rows as usize);
    let mut last = None;
    for _ in 0..rows {
        let photon_index = b.u64()?;
        if last.is_some_and(|p| photon_index < p) {
            return Err(FormatError::Invalid("records are not sorted by photon index".into()));
        }
        last = Some(photon_index);
        let detector_index = b.u32()?;
        let exit_position = Vec3::new(b.f64()?, b.f64()?, b.f64()?);
        let exit_weight = b.f64()?;
        let time_of_flight = b.f64()?;
        let mut partial_paths = [0.0; TISSUE_COUNT];
        for p in &mut partial_paths {
            *p = b.f64()?;
        }
        let scatter_count = b.u64()?;
        records.push(DetectorRecord {
            photon_index,
            detector_index,
            exit_position,
            exit_weight,
            time_of_flight,
            partial_paths,
            scatter_count,
        });
    }
    Ok(DetectorRecordSet {
        scenario_id,
        photon_count,
        seed,
        gates,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: u64) -> DetectorRecord {
        DetectorRecord {
            photon_index: i,
            detector_index: (i % 32) as u32,
            exit_position: Vec3::new(1.0, 2.5, -3.0),
            exit_weight: 0.25,
            time_of_flight: 812.5,
            partial_paths: [0.0, 10.0, 3.0, 1.0, 20.0, 0.5],
            scatter_count: 400 + i,
        }
    }

    #[test]
    fn empty_set_round_trips() {
        let set = DetectorRecordSet::new("empty", 0, 7, TimeGates::default(), Vec::new());
        let back = decode_detector_records(&encode_detector_records(&set)).unwrap();
        assert_eq!(back, set);
        assert!(back.is_empty());
    }

    #[test]
    fn rows_are_sorted_on_construction() {
        let set = DetectorRecordSet::new("s", 10, 1, TimeGates::default(), vec![record(5), record(2)]);
        let idx: Vec<u64> = set.records().iter().map(|r| r.photon_index).collect();
        assert_eq!(idx, [2, 5]);
    }

    #[test]
    fn ten_thousand_rows_round_trip() {
        let records = (0..10_000).map(record).collect();
        let set = DetectorRecordSet::new("big", 20_000, 3, TimeGates::default(), records);
        let bytes = encode_detector_records(&set);
        assert_eq!(decode_detector_records(&bytes).unwrap(), set);
    }

    #[test]
    fn corruption_is_detected() {
        let set = DetectorRecordSet::new("s", 10, 1, TimeGates::default(), vec![record(1)]);
        let mut bytes = encode_detector_records(&set);
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        assert!(matches!(decode_detector_records(&bytes), Err(FormatError::ChecksumMismatch)));
        let bytes = encode_detector_records(&set);
        assert!(decode_detector_records(&bytes[..n - 8]).is_err());
        assert!(matches!(decode_detector_records(b"PFDET"), Err(FormatError::Truncated)));
        assert!(matches!(decode_detector_records(b"nonsense"), Err(FormatError::BadMagic)));
    }
}
