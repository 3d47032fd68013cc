//! Fluence volumes: deposited weight per voxel per time gate.
//!
//! In memory only non-zero cells are kept; on disk the volume is a dense
//! float32 array, x fastest and gate slowest.

use std::collections::BTreeMap;
use std::io::{Read, Seek, SeekFrom, Write};

use xxhash_rust::xxh64::Xxh64;

use super::{ByteReader, FormatError};

pub const FLUENCE_MAGIC: [u8; 8] = *b"PFFLUENC";
pub const FLUENCE_VERSION: u32 = 1;

/// Sparse time-resolved deposit volume.
#[derive(Debug, Clone, PartialEq)]
pub struct FluenceGrid {
    pub scenario_id: String,
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub gate_width: f64,
    pub gate_count: usize,
    /// Non-zero cells keyed by `gate * voxel_count + voxel`.
    values: BTreeMap<u64, f32>,
}

impl FluenceGrid {
    pub fn new(
        scenario_id: impl Into<String>,
        dims: [usize; 3],
        voxel_size: f64,
        gate_width: f64,
        gate_count: usize,
    ) -> Self {
        Self {
            scenario_id: scenario_id.into(),
            dims,
            voxel_size,
            gate_width,
            gate_count,
            values: BTreeMap::new(),
        }
    }

    /// Fills cells from f64 accumulators, rounding each to f32.
    pub fn from_accumulated(mut self, cells: impl IntoIterator<Item = (u64, f64)>) -> Self {
        for (k, v) in cells {
            assert!(k < self.cell_count(), "cell out of range");
            let v = v as f32;
            if v != 0.0 {
                self.values.insert(k, v);
            }
        }
        self
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn cell_count(&self) -> u64 {
        self.voxel_count() as u64 * self.gate_count as u64
    }

    /// Size of the dense payload on disk, bytes.
    pub fn payload_bytes(&self) -> u64 {
        self.cell_count() * 4
    }

    fn key(&self, voxel: usize, gate: usize) -> u64 {
        assert!(voxel < self.voxel_count() && gate < self.gate_count, "cell out of range");
        gate as u64 * self.voxel_count() as u64 + voxel as u64
    }

    pub fn get(&self, voxel: usize, gate: usize) -> f32 {
        self.values.get(&self.key(voxel, gate)).copied().unwrap_or(0.0)
    }

    /// Sets a cell; zero clears it.
    pub fn set(&mut self, voxel: usize, gate: usize, value: f32) {
        let k = self.key(voxel, gate);
        if value == 0.0 {
            self.values.remove(&k);
        } else {
            self.values.insert(k, value);
        }
    }

    /// Non-zero cells as `(gate * voxel_count + voxel, value)` in key order.
    pub fn nonzero(&self) -> impl Iterator<Item = (u64, f32)> + '_ {
        self.values.iter().map(|(&k, &v)| (k, v))
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.len()
    }

    /// Sum over all cells, accumulated in f64.
    pub fn total(&self) -> f64 {
        self.values.values().map(|&v| v as f64).sum()
    }

    /// Sum over gates for each voxel (dense, x fastest).
    pub fn time_integrated(&self) -> Vec<f64> {
        let n = self.voxel_count() as u64;
        let mut out = vec![0.0; n as usize];
        for (&k, &v) in &self.values {
            out[(k % n) as usize] += v as f64;
        }
        out
    }

    fn header(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + self.scenario_id.len());
        let id = self.scenario_id.as_bytes();
        b.extend_from_slice(&(id.len() as u32).to_le_bytes());
        b.extend_from_slice(id);
        for d in self.dims {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        b.extend_from_slice(&self.voxel_size.to_le_bytes());
        b.extend_from_slice(&self.gate_width.to_le_bytes());
        b.extend_from_slice(&(self.gate_count as u32).to_le_bytes());
        b
    }
}

const CHUNK_CELLS: usize = 1 << 16;

/// Streams the dense volume to `w`. The checksum in the header covers
/// everything after it and is patched in once the payload is written.
pub fn write_fluence<W: Write + Seek>(mut w: W, grid: &FluenceGrid) -> Result<(), FormatError> {
    let start = w.stream_position()?;
    w.write_all(&FLUENCE_MAGIC)?;
    w.write_all(&FLUENCE_VERSION.to_le_bytes())?;
    w.write_all(&0u64.to_le_bytes())?;
    let mut hasher = Xxh64::new(0);
    let header = grid.header();
    hasher.update(&header);
    w.write_all(&header)?;

    let total = grid.cell_count();
    let mut nonzero = grid.values.iter().peekable();
    let mut buf = Vec::with_capacity(CHUNK_CELLS * 4);
    let mut cell = 0u64;
    while cell < total {
        let end = (cell + CHUNK_CELLS as u64).min(total);
        buf.clear();
        for k in cell..end {
            let v = match nonzero.peek() {
                Some((&nk, &nv)) if nk == k => {
                    nonzero.next();
                    nv
                }
                _ => 0.0,
            };
            buf.extend_from_slice(&v.to_le_bytes());
        }
        hasher.update(&buf);
        w.write_all(&buf)?;
        cell = end;
    }
    let end_pos = w.stream_position()?;
    w.seek(SeekFrom::Start(start + 12))?;
    w.write_all(&hasher.digest().to_le_bytes())?;
    w.seek(SeekFrom::Start(end_pos))?;
    w.flush()?;
    Ok(())
}

/// Reads and verifies a fluence file.
pub fn read_fluence<R: Read>(r: R) -> Result<FluenceGrid, FormatError> {
    read_fluence_inner(r, true)
}

/// Verifies a fluence file's structure and checksum without keeping the data.
pub fn verify_fluence<R: Read>(r: R) -> Result<(), FormatError> {
    read_fluence_inner(r, false).map(|_| ())
}

fn read_fluence_inner<R: Read>(mut r: R, keep: bool) -> Result<FluenceGrid, FormatError> {
    let mut fixed = [0u8; 20];
    read_exact(&mut r, &mut fixed)?;
    let mut h = ByteReader::new(&fixed);
    if h.take(8)? != FLUENCE_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = h.u32()?;
    if version != FLUENCE_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let stored = h.u64()?;
    let mut hasher = Xxh64::new(0);

    let mut len_bytes = [0u8; 4];
    read_exact(&mut r, &mut len_bytes)?;
    hasher.update(&len_bytes);
    let id_len = u32::from_le_bytes(len_bytes) as usize;
    if id_len > 1 << 20 {
        return Err(FormatError::Invalid("scenario id too long".into()));
    }
    let mut rest = vec![0u8; id_len + 12 + 8 + 8 + 4];
    read_exact(&mut r, &mut rest)?;
    hasher.update(&rest);
    let mut b = ByteReader::new(&rest);
    let scenario_id = String::from_utf8(b.take(id_len)?.to_vec())
        .map_err(|_| FormatError::Invalid("scenario id is not UTF-8".into()))?;
    let dims = [b.u32()? as usize, b.u32()? as usize, b.u32()? as usize];
    let voxel_size = b.f64()?;
    let gate_width = b.f64()?;
    let gate_count = b.u32()? as usize;
    let mut grid = FluenceGrid::new(scenario_id, dims, voxel_size, gate_width, gate_count);

    let total = grid.cell_count();
    let mut buf = vec![0u8; CHUNK_CELLS * 4];
    let mut cell = 0u64;
    while cell < total {
        let n = ((total - cell) as usize).min(CHUNK_CELLS);
        read_exact(&mut r, &mut buf[..n * 4])?;
        hasher.update(&buf[..n * 4]);
        if keep {
            for (i, c) in buf[..n * 4].chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
                if v != 0.0 {
                    grid.values.insert(cell + i as u64, v);
                }
            }
        }
        cell += n as u64;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(FormatError::Invalid("trailing bytes after payload".into()));
    }
    if hasher.digest() != stored {
        return Err(FormatError::ChecksumMismatch);
    }
    Ok(grid)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => FormatError::Truncated,
        _ => FormatError::Io(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn sample() -> FluenceGrid {
        let mut g = FluenceGrid::new("scenario", [4, 3, 2], 2.0, 100.0, 5);
        g.set(0, 0, 1.5);
        g.set(23, 4, 0.25);
        g.set(7, 2, 3e-9);
        g
    }

    fn encode(g: &FluenceGrid) -> Vec<u8> {
        let mut c = Cursor::new(Vec::new());
        write_fluence(&mut c, g).unwrap();
        c.into_inner()
    }

    #[test]
    fn round_trip_and_payload_size() {
        let g = sample();
        let bytes = encode(&g);
        let header = 20 + 4 + "scenario".len() + 12 + 8 + 8 + 4;
        assert_eq!(bytes.len() as u64, header as u64 + g.payload_bytes());
        assert_eq!(g.payload_bytes(), 4 * 3 * 2 * 5 * 4);
        let back = read_fluence(Cursor::new(&bytes)).unwrap();
        assert_eq!(back, g);
        assert!((back.total() - (1.5 + 0.25 + 3e-9f32 as f64)).abs() < 1e-12);
    }

    #[test]
    fn reference_grid_payload_arithmetic() {
        let g = FluenceGrid::new("x", [186, 186, 186], 1.0, 100.0, 50);
        assert_eq!(g.payload_bytes(), 186u64.pow(3) * 50 * 4);
    }

    #[test]
    fn corruption_and_truncation() {
        let bytes = encode(&sample());
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 1] ^= 1;
        assert!(matches!(read_fluence(Cursor::new(&bad)), Err(FormatError::ChecksumMismatch)));
        assert!(matches!(
            read_fluence(Cursor::new(&bytes[..n - 4])),
            Err(FormatError::Truncated)
        ));
        assert!(verify_fluence(Cursor::new(&bytes)).is_ok());
    }

    #[test]
    fn layout_is_x_fastest_gate_slowest() {
        let mut g = FluenceGrid::new("o", [2, 2, 1], 1.0, 10.0, 2);
        // voxel (1,0,0) gate 1
        g.set(1, 1, 2.0);
        let bytes = encode(&g);
        let payload = &bytes[bytes.len() - 32..];
        let cell = 4 + 1;
        assert_eq!(&payload[cell * 4..cell * 4 + 4], &2.0f32.to_le_bytes());
    }
}
