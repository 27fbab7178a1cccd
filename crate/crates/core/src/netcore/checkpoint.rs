//! JSON checkpoints: `{ name: { "shape": [r, c], "values": [...] } }`.
//!
//! Keys are written in sorted order and every float with 17 significant
//! digits, so a write/read cycle is bit-exact and files are reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    shape: [usize; 2],
    values: Vec<f64>,
}

fn push_f64(out: &mut String, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Checkpoint(format!("cannot store non-finite value {v}")));
    }
    write!(out, "{v:.16e}").expect("writing to String");
    Ok(())
}

pub fn to_json(tensors: &BTreeMap<String, Mat>) -> Result<String> {
    let mut out = String::from("{\n");
    for (i, (name, m)) in tensors.iter().enumerate() {
        let key = serde_json::to_string(name)?;
        write!(out, "  {key}: {{\"shape\": [{}, {}], \"values\": [", m.rows(), m.cols()).expect("String");
        for (k, v) in m.as_slice().iter().enumerate() {
            if k > 0 {
                out.push_str(", ");
            }
            push_f64(&mut out, *v)?;
        }
        out.push_str("]}");
        if i + 1 < tensors.len() {
            out.push(',');
        }
        out.push('\n');
    }
    out.push_str("}\n");
    Ok(out)
}

pub fn from_json(text: &str) -> Result<BTreeMap<String, Mat>> {
    let raw: BTreeMap<String, Record> = serde_json::from_str(text)?;
    raw.into_iter()
        .map(|(name, r)| {
            let [rows, cols] = r.shape;
            if rows * cols != r.values.len() {
                return Err(Error::Checkpoint(format!("`{name}`: shape {rows}x{cols} but {} values", r.values.len())));
            }
            Ok((name, Mat::from_vec(rows, cols, r.values)))
        })
        .collect()
}

/// Writes atomically (temp file + rename).
pub fn save(path: &Path, tensors: &BTreeMap<String, Mat>) -> Result<()> {
    let text = to_json(tensors)?;
    crate::util::write_atomic(path, text.as_bytes())
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Mat>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(-1e300f64..1e300, 1..20), tiny in -1e-300f64..1e-300) {
            let mut t = BTreeMap::new();
            let n = values.len();
            t.insert("b.layer".to_string(), Mat::from_vec(1, n, values));
            t.insert("a".to_string(), Mat::scalar(tiny));
            let text = to_json(&t).unwrap();
            let back = from_json(&text).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(to_json(&back).unwrap(), text);
        }
    }

    #[test]
    fn keys_are_sorted_and_shape_checked() {
        let mut t = BTreeMap::new();
        t.insert("z".to_string(), Mat::scalar(1.0));
        t.insert("a".to_string(), Mat::scalar(2.0));
        let text = to_json(&t).unwrap();
        assert!(text.find("\"a\"").unwrap() < text.find("\"z\"").unwrap());
        assert!(from_json(r#"{"a": {"shape": [2, 2], "values": [1.0]}}"#).is_err());
        let mut bad = BTreeMap::new();
        bad.insert("x".to_string(), Mat::scalar(f64::NAN));
        assert!(to_json(&bad).is_err());
    }
}
