//! Checks against the SCAT fixtures written by `fixtures/make_fixtures.py`.

use std::fs;
use std::path::PathBuf;

use scaforge_core::trace::{read_header, read_traceset, write_traceset, TraceError};
use scaforge_core::{aes_sbox, Dtype};
use serde_json::Value;

pub const GOLDEN: [&str; 3] = ["f32_labels.scat", "i8_full.scat", "i16_plaintext.scat"];

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn expected() -> Value {
    serde_json::from_str(&fs::read_to_string(fixture("expected.json")).unwrap()).unwrap()
}

fn bytes16(v: &Value) -> Vec<[u8; 16]> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|row| {
            let b: Vec<u8> = row
                .as_array()
                .unwrap()
                .iter()
                .map(|x| x.as_u64().unwrap() as u8)
                .collect();
            b.try_into().unwrap()
        })
        .collect()
}

/// Loads one golden file, compares every field with the generator's
/// record and checks that saving reproduces the file byte for byte.
pub fn check_golden(name: &str) -> Result<(), String> {
    let exp = &expected()[name];
    let raw = fs::read(fixture(name)).map_err(|e| e.to_string())?;
    if raw.len() as u64 != exp["len"].as_u64().unwrap() {
        return Err(format!("{name}: file is {} bytes", raw.len()));
    }
    let ts = read_traceset(&raw).map_err(|e| format!("{name}: {e}"))?;
    let header = read_header(fixture(name)).map_err(|e| e.to_string())?;
    let dtype = match exp["dtype"].as_str().unwrap() {
        "i8" => Dtype::I8,
        "i16" => Dtype::I16,
        _ => Dtype::F32,
    };
    if header.flags as u64 != exp["flags"].as_u64().unwrap() || ts.dtype() != dtype {
        return Err(format!("{name}: header {header:?}"));
    }
    if ts.n_traces() as u64 != exp["n_traces"].as_u64().unwrap()
        || ts.n_samples() as u64 != exp["n_samples"].as_u64().unwrap()
    {
        return Err(format!(
            "{name}: shape {}x{}",
            ts.n_traces(),
            ts.n_samples()
        ));
    }
    for (i, row) in exp["rows"].as_array().unwrap().iter().enumerate() {
        for (j, v) in row.as_array().unwrap().iter().enumerate() {
            // every fixture value is exactly representable in its dtype
            if ts.value(i, j) != f64::from(v.as_f64().unwrap() as f32) {
                return Err(format!("{name}: sample ({i},{j}) = {}", ts.value(i, j)));
            }
        }
    }
    if let Some(labels) = exp.get("labels") {
        let want: Vec<u8> = labels
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_u64().unwrap() as u8)
            .collect();
        if ts.labels().map_err(|e| e.to_string())? != want.as_slice() {
            return Err(format!("{name}: labels differ"));
        }
    }
    if let Some(pts) = exp.get("plaintexts") {
        if ts.plaintexts().map_err(|e| e.to_string())? != bytes16(pts).as_slice() {
            return Err(format!("{name}: plaintexts differ"));
        }
    }
    if let Some(key) = exp.get("key") {
        let k = bytes16(&Value::Array(vec![key.clone()]))[0];
        if ts
            .keys()
            .map_err(|e| e.to_string())?
            .iter()
            .any(|row| *row != k)
        {
            return Err(format!("{name}: keys differ"));
        }
        // labels stored by the generator follow the S-box rule at byte 2
        let derived = ts.derive_labels(2).map_err(|e| e.to_string())?;
        if derived.labels().unwrap() != ts.labels().unwrap() {
            return Err(format!(
                "{name}: stored labels disagree with the S-box rule"
            ));
        }
    }
    if let Some(masks) = exp.get("masks") {
        let m = ts.meta.masks.as_ref().ok_or("masks missing")?;
        for (i, row) in masks.as_array().unwrap().iter().enumerate() {
            let want: Vec<u8> = row
                .as_array()
                .unwrap()
                .iter()
                .map(|x| x.as_u64().unwrap() as u8)
                .collect();
            if m.of(i) != want.as_slice() {
                return Err(format!("{name}: masks of trace {i} differ"));
            }
        }
    }
    let mut again = Vec::new();
    write_traceset(&ts, &mut again).map_err(|e| e.to_string())?;
    if again != raw {
        return Err(format!("{name}: re-encoding is not byte-identical"));
    }
    Ok(())
}

/// The corrupt fixtures and the error each must produce.
pub fn check_corrupt() -> Result<(), String> {
    let load = |name: &str| read_traceset(&fs::read(fixture(name)).unwrap());
    match load("corrupt_magic.scat") {
        Err(TraceError::BadMagic(m)) if &m == b"XXXX" => {}
        other => return Err(format!("corrupt magic gave {other:?}")),
    }
    match load("corrupt_version.scat") {
        Err(TraceError::UnsupportedVersion(2)) => {}
        other => return Err(format!("corrupt version gave {other:?}")),
    }
    match load("truncated_payload.scat") {
        Err(TraceError::TruncatedFile {
            expected: 247,
            actual: 246,
        }) => {}
        other => return Err(format!("truncated payload gave {other:?}")),
    }
    match load("truncated_header.scat") {
        Err(TraceError::TruncatedFile {
            expected: 32,
            actual: 20,
        }) => {}
        other => return Err(format!("truncated header gave {other:?}")),
    }
    Ok(())
}

pub fn check_sbox() -> Result<(), String> {
    let want: Vec<u8> = expected()["sbox_check"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap() as u8)
        .collect();
    let got: Vec<u8> = [0x00, 0x01, 0x53, 0xff]
        .iter()
        .map(|&x| aes_sbox(x))
        .collect();
    if got == want {
        Ok(())
    } else {
        Err(format!("sbox {got:?} != {want:?}"))
    }
}
