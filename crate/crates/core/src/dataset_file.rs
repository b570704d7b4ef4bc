//! On-disk dataset container.
//!
//! A short text header (one `key value` pair per line, terminated by `end`)
//! followed by little-endian `f32` feature rows and then the labels, either
//! `u32` class indices or `K` bytes of multi-hot per row.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::datagen::{Dataset, LabelKind, Labels};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &str = "hetnoise-dataset";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let kind = match ds.labels.kind() {
        LabelKind::Multiclass => "multiclass",
        LabelKind::Multilabel => "multilabel",
    };
    let mut out = format!(
        "{DATASET_MAGIC}\nversion {DATASET_VERSION}\nn {}\nd {}\nk {}\nlabels {kind}\nseed {}\nspec_hash {}\nend\n",
        ds.len(),
        ds.dim(),
        ds.classes,
        ds.seed,
        ds.spec_hash
    )
    .into_bytes();
    out.reserve(ds.len() * (ds.dim() * 4 + ds.classes.max(4)));
    for v in ds.features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match &ds.labels {
        Labels::Multiclass(y) => {
            for c in y {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        Labels::Multilabel(y) => out.extend(y.iter().copied()),
    }
    out
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_dataset(ds))?;
    file.sync_all()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// Splits `bytes` into header lines (up to and including `end`) and payload.
pub(crate) fn split_header<'a>(
    bytes: &'a [u8],
    magic: &str,
) -> Result<(Vec<(&'a str, &'a str)>, &'a [u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    let mut first = true;
    loop {
        let rest = &bytes[pos..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(Error::Corrupt("header is not terminated".into()));
        };
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::Corrupt("header is not valid UTF-8".into()))?;
        pos += nl + 1;
        if first {
            if line != magic {
                return Err(Error::Corrupt(format!(
                    "expected `{magic}` header, found `{line}`"
                )));
            }
            first = false;
            continue;
        }
        if line == "end" {
            return Ok((fields, &bytes[pos..]));
        }
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| Error::Corrupt(format!("malformed header line `{line}`")))?;
        fields.push((key, value));
    }
}

pub(crate) fn header_field<'a>(fields: &[(&'a str, &'a str)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Corrupt(format!("header is missing `{key}`")))
}

pub(crate) fn header_number<T: std::str::FromStr>(fields: &[(&str, &str)], key: &str) -> Result<T> {
    header_field(fields, key)?
        .parse()
        .map_err(|_| Error::Corrupt(format!("header field `{key}` is not a number")))
}

pub(crate) fn check_version(fields: &[(&str, &str)], expected: u32) -> Result<()> {
    let found: u32 = header_number(fields, "version")?;
    if found != expected {
        return Err(Error::Version { found, expected });
    }
    Ok(())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let (fields, payload) = split_header(bytes, DATASET_MAGIC)?;
    check_version(&fields, DATASET_VERSION)?;
    let n: usize = header_number(&fields, "n")?;
    let d: usize = header_number(&fields, "d")?;
    let k: usize = header_number(&fields, "k")?;
    let seed: u64 = header_number(&fields, "seed")?;
    let spec_hash = header_field(&fields, "spec_hash")?.to_string();
    let kind = header_field(&fields, "labels")?;
    let label_bytes = match kind {
        "multiclass" => n.checked_mul(4),
        "multilabel" => n.checked_mul(k),
        other => return Err(Error::Corrupt(format!("unknown label kind `{other}`"))),
    };
    let feature_bytes = n.checked_mul(d).and_then(|v| v.checked_mul(4));
    let expected = feature_bytes
        .zip(label_bytes)
        .and_then(|(a, b)| a.checked_add(b))
        .ok_or_else(|| Error::Corrupt("header sizes overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::Corrupt(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let (feat, rest) = payload.split_at(n * d * 4);
    let values: Vec<f32> = feat
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let features = Array2::from_shape_vec((n, d), values).expect("length checked");
    let labels = if kind == "multiclass" {
        let y: Vec<u32> = rest
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(bad) = y.iter().find(|&&c| c as usize >= k) {
            return Err(Error::Corrupt(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        Labels::Multiclass(y)
    } else {
        if rest.iter().any(|&b| b > 1) {
            return Err(Error::Corrupt("multi-hot entries must be 0 or 1".into()));
        }
        Labels::Multilabel(Array2::from_shape_vec((n, k), rest.to_vec()).expect("length checked"))
    };
    Ok(Dataset {
        features,
        labels,
        classes: k,
        seed,
        spec_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synthesize_multiclass, synthesize_multilabel, GeneratorConfig};
    use crate::rng::RandomSource;

    fn sample() -> Dataset {
        let spec = GeneratorConfig::default().build().unwrap();
        synthesize_multiclass(&spec, 50, &mut RandomSource::new(3)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = sample();
        let bytes = encode_dataset(&ds);
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back), bytes);

        let spec = GeneratorConfig::default().build().unwrap();
        let ml = synthesize_multilabel(&spec, 40, &mut RandomSource::new(4)).unwrap();
        assert_eq!(decode_dataset(&encode_dataset(&ml)).unwrap(), ml);
    }

    #[test]
    fn version_mismatch() {
        let bytes = encode_dataset(&sample());
        let text = String::from_utf8_lossy(&bytes[..40]).replace("version 1", "version 9");
        let mut bumped = text.into_bytes();
        bumped.extend_from_slice(&bytes[40..]);
        assert!(matches!(
            decode_dataset(&bumped),
            Err(Error::Version {
                found: 9,
                expected: 1
            })
        ));
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = encode_dataset(&sample());
        for cut in [5, 60, bytes.len() - 1] {
            assert!(
                matches!(decode_dataset(&bytes[..cut]), Err(Error::Corrupt(_))),
                "cut {cut}"
            );
        }
    }
}
