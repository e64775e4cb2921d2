//! SCAT v1 binary trace-set format.
//!
//! Little-endian layout:
//!
//! | offset | size | field                                         |
//! |--------|------|-----------------------------------------------|
//! | 0      | 4    | magic `"SCAT"`                                |
//! | 4      | 2    | version (`1`)                                 |
//! | 6      | 2    | flags: bit0 key, bit1 plaintext, bit2 masks, bit3 labels |
//! | 8      | 8    | n_traces                                      |
//! | 16     | 4    | n_samples                                     |
//! | 20     | 1    | dtype (0 = i8, 1 = i16, 2 = f32)              |
//! | 21     | 1    | mask_len                                      |
//! | 22     | 10   | reserved, zero                                |
//!
//! The header is followed by the row-major sample matrix and then, for each
//! flag set in bit order, keys (16·N), plaintexts (16·N), masks
//! (mask_len·N) and labels (N).

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dtype, Masks, Result, Samples, TraceError, TraceMeta, TraceSet};

pub const SCAT_MAGIC: [u8; 4] = *b"SCAT";
pub const SCAT_VERSION: u16 = 1;
pub const SCAT_HEADER_LEN: usize = 32;

pub const FLAG_KEY: u16 = 1 << 0;
pub const FLAG_PLAINTEXT: u16 = 1 << 1;
pub const FLAG_MASKS: u16 = 1 << 2;
pub const FLAG_LABELS: u16 = 1 << 3;
const KNOWN_FLAGS: u16 = FLAG_KEY | FLAG_PLAINTEXT | FLAG_MASKS | FLAG_LABELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScatHeader {
    pub version: u16,
    pub flags: u16,
    pub n_traces: u64,
    pub n_samples: u32,
    pub dtype: Dtype,
    pub mask_len: u8,
}

impl ScatHeader {
    fn of(ts: &TraceSet) -> ScatHeader {
        let m = &ts.meta;
        let mut flags = 0;
        if m.keys.is_some() {
            flags |= FLAG_KEY;
        }
        if m.plaintexts.is_some() {
            flags |= FLAG_PLAINTEXT;
        }
        if m.masks.is_some() {
            flags |= FLAG_MASKS;
        }
        if m.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        ScatHeader {
            version: SCAT_VERSION,
            flags,
            n_traces: ts.n_traces() as u64,
            n_samples: ts.n_samples() as u32,
            dtype: ts.dtype(),
            mask_len: m.masks.as_ref().map_or(0, |m| m.len),
        }
    }

    fn encode(&self) -> [u8; SCAT_HEADER_LEN] {
        let mut h = [0u8; SCAT_HEADER_LEN];
        h[0..4].copy_from_slice(&SCAT_MAGIC);
        h[4..6].copy_from_slice(&self.version.to_le_bytes());
        h[6..8].copy_from_slice(&self.flags.to_le_bytes());
        h[8..16].copy_from_slice(&self.n_traces.to_le_bytes());
        h[16..20].copy_from_slice(&self.n_samples.to_le_bytes());
        h[20] = self.dtype.code();
        h[21] = self.mask_len;
        h
    }

    fn decode(bytes: &[u8]) -> Result<ScatHeader> {
        if bytes.len() >= 4 && bytes[0..4] != SCAT_MAGIC {
            return Err(TraceError::BadMagic(bytes[0..4].try_into().unwrap()));
        }
        if bytes.len() < SCAT_HEADER_LEN {
            return Err(TraceError::TruncatedFile {
                expected: SCAT_HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != SCAT_VERSION {
            return Err(TraceError::UnsupportedVersion(version));
        }
        let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
        if flags & !KNOWN_FLAGS != 0 {
            return Err(TraceError::InvalidHeader(format!(
                "unknown flag bits {flags:#06x}"
            )));
        }
        let n_traces = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let n_samples = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        let dtype = Dtype::from_code(bytes[20])?;
        let mask_len = bytes[21];
        if bytes[22..32].iter().any(|&b| b != 0) {
            return Err(TraceError::InvalidHeader(
                "reserved bytes are not zero".into(),
            ));
        }
        if flags & FLAG_MASKS == 0 && mask_len != 0 {
            return Err(TraceError::InvalidHeader(
                "mask_len set without mask flag".into(),
            ));
        }
        Ok(ScatHeader {
            version,
            flags,
            n_traces,
            n_samples,
            dtype,
            mask_len,
        })
    }

    /// Total file size implied by the header, or `None` on overflow.
    pub fn file_len(&self) -> Option<u64> {
        let n = self.n_traces;
        let mut len =
            (n.checked_mul(u64::from(self.n_samples))?).checked_mul(self.dtype.size() as u64)?;
        if self.flags & FLAG_KEY != 0 {
            len = len.checked_add(n.checked_mul(16)?)?;
        }
        if self.flags & FLAG_PLAINTEXT != 0 {
            len = len.checked_add(n.checked_mul(16)?)?;
        }
        if self.flags & FLAG_MASKS != 0 {
            len = len.checked_add(n.checked_mul(u64::from(self.mask_len))?)?;
        }
        if self.flags & FLAG_LABELS != 0 {
            len = len.checked_add(n)?;
        }
        len.checked_add(SCAT_HEADER_LEN as u64)
    }
}

/// Serializes `ts` in SCAT format.
pub fn write_traceset<W: Write>(ts: &TraceSet, mut w: W) -> Result<()> {
    w.write_all(&ScatHeader::of(ts).encode())?;
    let mut buf = Vec::with_capacity(ts.samples().len() * ts.dtype().size());
    match ts.samples() {
        Samples::I8(v) => buf.extend(v.iter().map(|&x| x as u8)),
        Samples::I16(v) => v
            .iter()
            .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        Samples::F32(v) => v
            .iter()
            .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
    }
    w.write_all(&buf)?;
    let m = &ts.meta;
    if let Some(keys) = &m.keys {
        keys.iter().try_for_each(|k| w.write_all(k))?;
    }
    if let Some(pts) = &m.plaintexts {
        pts.iter().try_for_each(|p| w.write_all(p))?;
    }
    if let Some(masks) = &m.masks {
        w.write_all(&masks.data)?;
    }
    if let Some(labels) = &m.labels {
        w.write_all(labels)?;
    }
    Ok(())
}

pub fn save_traceset(ts: &TraceSet, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_traceset(ts, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Header only; does not check the payload length.
pub fn read_header(path: impl AsRef<Path>) -> Result<ScatHeader> {
    use std::io::Read;
    let mut head = Vec::with_capacity(SCAT_HEADER_LEN);
    fs::File::open(path)?
        .take(SCAT_HEADER_LEN as u64)
        .read_to_end(&mut head)?;
    ScatHeader::decode(&head)
}

/// Parses a complete SCAT image.
pub fn read_traceset(bytes: &[u8]) -> Result<TraceSet> {
    let header = ScatHeader::decode(bytes)?;
    let expected = header
        .file_len()
        .ok_or_else(|| TraceError::InvalidHeader("dimensions overflow".into()))?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(TraceError::TruncatedFile { expected, actual });
    }
    if actual > expected {
        return Err(TraceError::InvalidHeader(format!(
            "{} trailing bytes",
            actual - expected
        )));
    }
    let n = header.n_traces as usize;
    let s = header.n_samples as usize;
    let mut pos = SCAT_HEADER_LEN;
    let mut take = |len: usize| {
        let chunk = &bytes[pos..pos + len];
        pos += len;
        chunk
    };
    let payload = take(n * s * header.dtype.size());
    let samples = match header.dtype {
        Dtype::I8 => Samples::I8(payload.iter().map(|&b| b as i8).collect()),
        Dtype::I16 => Samples::I16(
            payload
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]))
                .collect(),
        ),
        Dtype::F32 => Samples::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    let blocks16 = |chunk: &[u8]| -> Vec<[u8; 16]> {
        chunk
            .chunks_exact(16)
            .map(|c| c.try_into().unwrap())
            .collect()
    };
    let mut meta = TraceMeta::default();
    if header.flags & FLAG_KEY != 0 {
        meta.keys = Some(blocks16(take(16 * n)));
    }
    if header.flags & FLAG_PLAINTEXT != 0 {
        meta.plaintexts = Some(blocks16(take(16 * n)));
    }
    if header.flags & FLAG_MASKS != 0 {
        let len = header.mask_len;
        meta.masks = Some(Masks {
            len,
            data: take(len as usize * n).to_vec(),
        });
    }
    if header.flags & FLAG_LABELS != 0 {
        meta.labels = Some(take(n).to_vec());
    }
    TraceSet::new(n, s, samples, meta)
}

pub fn load_traceset(path: impl AsRef<Path>) -> Result<TraceSet> {
    read_traceset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(ts: &TraceSet) -> Vec<u8> {
        let mut v = Vec::new();
        write_traceset(ts, &mut v).unwrap();
        v
    }

    #[test]
    fn empty_set_is_header_only() {
        let ts = TraceSet::new(0, 0, Samples::F32(vec![]), TraceMeta::default()).unwrap();
        let bytes = encode(&ts);
        assert_eq!(bytes.len(), SCAT_HEADER_LEN);
        assert_eq!(&bytes[0..4], b"SCAT");
        assert_eq!(read_traceset(&bytes).unwrap(), ts);
    }

    #[test]
    fn labelled_f32_byte_layout() {
        let meta = TraceMeta {
            labels: Some(vec![7, 200]),
            ..Default::default()
        };
        let ts = TraceSet::new(
            2,
            3,
            Samples::F32(vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]),
            meta,
        )
        .unwrap();
        let bytes = encode(&ts);
        assert_eq!(bytes.len(), 32 + 24 + 2);
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[0b1000, 0]);
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..20], &3u32.to_le_bytes());
        assert_eq!(bytes[20], 2);
        assert_eq!(bytes[21], 0);
        assert!(bytes[22..32].iter().all(|&b| b == 0));
        assert_eq!(&bytes[32..36], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[52..56], &0.0f32.to_le_bytes());
        assert_eq!(&bytes[56..], &[7, 200]);
    }

    #[test]
    fn corrupt_inputs_are_named() {
        let ts = TraceSet::new(1, 2, Samples::I16(vec![-3, 4]), TraceMeta::default()).unwrap();
        let good = encode(&ts);

        let mut bad = good.clone();
        bad[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_traceset(&bad), Err(TraceError::BadMagic(m)) if &m == b"XXXX"));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            read_traceset(&bad),
            Err(TraceError::UnsupportedVersion(2))
        ));

        let bad = &good[..good.len() - 1];
        assert!(matches!(
            read_traceset(bad),
            Err(TraceError::TruncatedFile {
                expected: 36,
                actual: 35
            })
        ));
        assert!(matches!(
            read_traceset(&good[..10]),
            Err(TraceError::TruncatedFile { .. })
        ));

        let mut bad = good.clone();
        bad[20] = 9;
        assert!(matches!(
            read_traceset(&bad),
            Err(TraceError::UnsupportedDtype(9))
        ));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(
            read_traceset(&bad),
            Err(TraceError::InvalidHeader(_))
        ));
    }

    #[test]
    fn round_trip_100x700_i8() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 100;
        let s = 700;
        let samples: Vec<i8> = (0..n * s).map(|_| rng.random()).collect();
        let meta = TraceMeta {
            keys: Some((0..n).map(|_| rng.random()).collect()),
            plaintexts: Some((0..n).map(|_| rng.random()).collect()),
            masks: Some(Masks {
                len: 18,
                data: (0..n * 18).map(|_| rng.random()).collect(),
            }),
            labels: Some((0..n).map(|_| rng.random()).collect()),
        };
        let ts = TraceSet::new(n, s, Samples::I8(samples), meta).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.scat");
        save_traceset(&ts, &path).unwrap();
        assert_eq!(load_traceset(&path).unwrap(), ts);
        let h = read_header(&path).unwrap();
        assert_eq!(h.flags, 0b1111);
        assert_eq!(h.mask_len, 18);
    }

    fn arb_traceset() -> impl Strategy<Value = TraceSet> {
        (
            0usize..6,
            0usize..9,
            0u8..3,
            any::<[bool; 4]>(),
            0u8..4,
            any::<u64>(),
        )
            .prop_map(|(n, s, dt, flags, mask_len, seed)| {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let samples = match dt {
                    0 => Samples::I8((0..n * s).map(|_| rng.random()).collect()),
                    1 => Samples::I16((0..n * s).map(|_| rng.random()).collect()),
                    _ => Samples::F32(
                        (0..n * s)
                            .map(|_| rng.random::<f32>() * 10.0 - 5.0)
                            .collect(),
                    ),
                };
                let meta = TraceMeta {
                    keys: flags[0].then(|| (0..n).map(|_| rng.random()).collect()),
                    plaintexts: flags[1].then(|| (0..n).map(|_| rng.random()).collect()),
                    masks: flags[2].then(|| Masks {
                        len: mask_len,
                        data: (0..n * mask_len as usize).map(|_| rng.random()).collect(),
                    }),
                    labels: flags[3].then(|| (0..n).map(|_| rng.random()).collect()),
                };
                TraceSet::new(n, s, samples, meta).unwrap()
            })
    }

    proptest! {
        #[test]
        fn round_trip_any_layout(ts in arb_traceset()) {
            let bytes = encode(&ts);
            prop_assert_eq!(bytes.len() as u64, ScatHeader::of(&ts).file_len().unwrap());
            let back = read_traceset(&bytes).unwrap();
            prop_assert_eq!(&back, &ts);
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
