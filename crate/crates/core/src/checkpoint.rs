//! FCCK checkpoint files.
//!
//! Layout (little-endian): magic `FCCK`, `u32` version, `u32` record count,
//! then per record `u32` name length, UTF-8 name, `u32` rank, `u32` dims,
//! f32 values. Step counters travel as one-element `meta.*` records.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::control_net::{ModelConfig, ModelParams, EMBED_DIM};
use crate::data::ByteCursor;
use crate::error::{Error, Result};
use crate::filters::BandKind;

const MAGIC: &[u8; 4] = b"FCCK";
pub const VERSION: u32 = 1;

const META_BASE_STEPS: &str = "meta.base_steps";
const META_BRANCH_STEPS: &str = "meta.steps.branch.";

fn push_record(out: &mut Vec<u8>, name: &str, dims: &[usize], values: impl IntoIterator<Item = f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(p: &ModelParams<f32>) -> Vec<u8> {
    let tensors = p.named_tensors();
    let count = tensors.len() + 1 + p.progress.branch_steps.len();
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    push_record(&mut out, META_BASE_STEPS, &[1], [p.progress.base_steps as f32]);
    for (kind, &steps) in &p.progress.branch_steps {
        push_record(&mut out, &format!("{META_BRANCH_STEPS}{}", kind.key()), &[1], [steps as f32]);
    }
    for t in tensors {
        push_record(&mut out, &t.name, &t.shape, t.values.iter().copied());
    }
    out
}

struct Record {
    offset: u64,
    dims: Vec<usize>,
    values: Vec<f32>,
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut cur = ByteCursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "expected magic `FCCK`"));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let count = cur.u32("record count")?;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let offset = cur.pos as u64;
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::format(offset + 4, "record name is not UTF-8"))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(cur.u32("dimension")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(offset, format!("`{name}` dimensions overflow")))?;
        let values = cur.f32s(n, "values")?;
        if records.insert(name.clone(), Record { offset, dims, values }).is_some() {
            return Err(Error::format(offset, format!("duplicate record `{name}`")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos as u64, "trailing bytes after last record"));
    }

    let dims_of = |name: &str| -> Result<&[usize]> {
        records
            .get(name)
            .map(|r| r.dims.as_slice())
            .ok_or_else(|| Error::format(bytes.len() as u64, format!("missing record `{name}`")))
    };
    let config = match (dims_of("base.stem.kernel")?, dims_of("base.cond.table")?) {
        ([3, 3, c, w], [v, EMBED_DIM]) => ModelConfig {
            channels: *c,
            vocab: *v,
            width: *w,
        },
        _ => return Err(Error::format(12, "unexpected stem or label-table shape")),
    };
    let mut p = ModelParams::<f32>::init(0, config);
    for name in records.keys() {
        if let Some(key) = name.strip_prefix("branch.").and_then(|r| r.strip_suffix(".zero0.kernel")) {
            let kind = BandKind::from_key(key)
                .map_err(|e| Error::format(records[name].offset, e.to_string()))?;
            p.attach_branch(kind, 0)?;
        }
    }
    let step = |name: &str| -> Result<u64> {
        let r = records
            .get(name)
            .ok_or_else(|| Error::format(bytes.len() as u64, format!("missing record `{name}`")))?;
        match r.values[..] {
            [v] if v >= 0.0 && v.fract() == 0.0 => Ok(v as u64),
            _ => Err(Error::format(r.offset, format!("`{name}` is not a step count"))),
        }
    };
    p.progress.base_steps = step(META_BASE_STEPS)?;
    let kinds: Vec<BandKind> = p.branches.keys().copied().collect();
    for kind in kinds {
        let steps = step(&format!("{META_BRANCH_STEPS}{}", kind.key()))?;
        p.progress.branch_steps.insert(kind, steps);
    }
    let mut used = 1 + p.progress.branch_steps.len();
    for t in p.named_tensors_mut() {
        let r = records
            .get(&t.name)
            .ok_or_else(|| Error::format(bytes.len() as u64, format!("missing record `{}`", t.name)))?;
        if r.dims != t.shape {
            return Err(Error::format(
                r.offset,
                format!("`{}` has shape {:?}, expected {:?}", t.name, r.dims, t.shape),
            ));
        }
        if let Some(i) = r.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(r.offset, format!("`{}`[{i}] is not finite", t.name)));
        }
        t.values.copy_from_slice(&r.values);
        used += 1;
    }
    if used != records.len() {
        let known: Vec<String> = p.named_tensors().into_iter().map(|t| t.name).collect();
        let extra = records
            .iter()
            .find(|(n, _)| !n.starts_with("meta.") && !known.contains(n))
            .map(|(n, r)| (n.clone(), r.offset))
            .unwrap_or_default();
        return Err(Error::format(extra.1, format!("unknown record `{}`", extra.0)));
    }
    Ok(p)
}

pub fn save(path: impl AsRef<Path>, p: &ModelParams<f32>) -> Result<()> {
    fs::write(path, to_bytes(p))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control_net::init_params;

    fn sample() -> ModelParams<f32> {
        let mut p = init_params::<f32>(5, 12, 16);
        p.attach_branch(BandKind::Low, 1).unwrap();
        p.attach_branch(BandKind::Custom { lo: 2, hi: 7 }, 1).unwrap();
        p.branches.get_mut(&BandKind::Low).unwrap().zero0.kernel[3] = 0.25;
        p.progress.base_steps = 2000;
        p.progress.branch_steps.insert(BandKind::Low, 17);
        p
    }

    #[test]
    fn round_trip_is_exact() {
        let p = sample();
        let bytes = to_bytes(&p);
        assert_eq!(&bytes[..4], b"FCCK");
        assert_eq!(from_bytes(&bytes).unwrap(), p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fcck");
        save(&path, &p).unwrap();
        assert_eq!(load(&path).unwrap(), p);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_tensor_is_rejected() {
        let p = sample();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        let tensors = p.named_tensors();
        out.extend_from_slice(&((tensors.len()) as u32).to_le_bytes());
        push_record(&mut out, META_BASE_STEPS, &[1], [1.0]);
        for t in tensors.iter().filter(|t| t.name != "base.head.bias") {
            push_record(&mut out, &t.name, &t.shape, t.values.iter().copied());
        }
        let err = from_bytes(&out).unwrap_err();
        assert!(err.to_string().contains("meta.steps.branch") || err.to_string().contains("base.head.bias"));
    }
}
