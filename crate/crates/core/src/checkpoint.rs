//! The "BIAF1" checkpoint container: a magic string, a version byte, a
//! manifest of named little-endian f64 arrays, and a UTF-8 key=value metadata
//! block. Round trips are bit-exact.

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::models::{build_classifier, Classifier};
use crate::rng::seed_everything;
use ndarray::{ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 5] = b"BIAF1";
const VERSION: u8 = 1;
const DTYPE_F64: u8 = 0;

/// Named arrays plus metadata, in a stable order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub arrays: Vec<(String, ArrayD<f64>)>,
    pub metadata: BTreeMap<String, String>,
}

impl Container {
    pub fn new() -> Self {
        Container { arrays: Vec::new(), metadata: BTreeMap::new() }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing metadata key `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?.parse().map_err(|_| {
            Error::CheckpointMismatch(format!("metadata key `{key}` is not a valid value"))
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, arr) in &self.arrays {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&[DTYPE_F64])?;
            let shape = arr.shape();
            w.write_all(&[shape.len() as u8])?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let contiguous;
            let values = match arr.as_slice() {
                Some(s) => s,
                None => {
                    contiguous = arr.iter().cloned().collect::<Vec<f64>>();
                    &contiguous
                }
            };
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let truncated = |what: &str| Error::Truncated(what.to_string());
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
        if &magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version).map_err(|_| truncated("version"))?;
        if version[0] != VERSION {
            return Err(Error::BadVersion(version[0]));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|_| truncated("array count"))?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let mut u16buf = [0u8; 2];
            r.read_exact(&mut u16buf).map_err(|_| truncated("name length"))?;
            let name_len = u16::from_le_bytes(u16buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(|_| truncated("name"))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Truncated("non-UTF8 array name".into()))?;
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype).map_err(|_| truncated("dtype"))?;
            if dtype[0] != DTYPE_F64 {
                return Err(Error::CheckpointMismatch(format!(
                    "array `{name}` has unsupported element type {}",
                    dtype[0]
                )));
            }
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank).map_err(|_| truncated("rank"))?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                r.read_exact(&mut u32buf).map_err(|_| truncated("shape"))?;
                shape.push(u32::from_le_bytes(u32buf) as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = vec![0f64; len];
            let mut f64buf = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut f64buf).map_err(|_| truncated("array data"))?;
                *v = f64::from_le_bytes(f64buf);
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::Truncated(format!("bad shape for `{name}`: {e}")))?;
            arrays.push((name, arr));
        }
        r.read_exact(&mut u32buf).map_err(|_| truncated("metadata length"))?;
        let meta_len = u32::from_le_bytes(u32buf) as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes).map_err(|_| truncated("metadata"))?;
        let meta_str = String::from_utf8(meta_bytes)
            .map_err(|_| Error::Truncated("non-UTF8 metadata".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta_str.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Truncated(format!("metadata line without `=`: {line}")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        Ok(Container { arrays, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

impl Default for Container {
    fn default() -> Self {
        Self::new()
    }
}

/// Copy container arrays onto a live network's parameters, by name, with
/// shape verification. Errors list every mismatch.
pub fn assign_params(
    params: &mut [(String, ndarray::ArrayViewMutD<'_, f64>)],
    container: &Container,
    what: &str,
) -> Result<()> {
    let stored: BTreeMap<&str, &ArrayD<f64>> =
        container.arrays.iter().map(|(n, a)| (n.as_str(), a)).collect();
    let mut problems = Vec::new();
    for (name, view) in params.iter_mut() {
        match stored.get(name.as_str()) {
            None => problems.push(format!("missing array `{name}`")),
            Some(arr) => {
                if arr.shape() != view.shape() {
                    problems.push(format!(
                        "array `{name}` has shape {:?}, expected {:?}",
                        arr.shape(),
                        view.shape()
                    ));
                } else {
                    view.assign(arr);
                }
            }
        }
    }
    let expected: std::collections::BTreeSet<&str> =
        params.iter().map(|(n, _)| n.as_str()).collect();
    for name in stored.keys() {
        if !expected.contains(name) {
            problems.push(format!("unexpected array `{name}`"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::CheckpointMismatch(format!("{what}: {}", problems.join("; "))));
    }
    Ok(())
}

/// Serialize a classifier with its identifying metadata.
pub fn save_classifier(model: &Classifier, path: &Path, seed: u64) -> Result<()> {
    let mut c = Container::new();
    for (name, view) in model.params() {
        c.arrays.push((name, view.to_owned()));
    }
    c.metadata.insert("kind".into(), "classifier".into());
    c.metadata.insert("arch_id".into(), model.arch_id.clone());
    c.metadata.insert("class_count".into(), model.class_count.to_string());
    c.metadata.insert("res_h".into(), model.input_resolution.0.to_string());
    c.metadata.insert("res_w".into(), model.input_resolution.1.to_string());
    for i in 0..3 {
        c.metadata.insert(format!("preprocess.mean{i}"), model.preprocess.mean[i].to_string());
        c.metadata.insert(format!("preprocess.std{i}"), model.preprocess.std[i].to_string());
    }
    c.metadata.insert("seed".into(), seed.to_string());
    c.save(path)
}

/// Rebuild a classifier from a checkpoint.
pub fn load_classifier(path: &Path) -> Result<Classifier> {
    let c = Container::load(path)?;
    if c.meta("kind")? != "classifier" {
        return Err(Error::CheckpointMismatch(format!(
            "expected kind=classifier, found {}",
            c.meta("kind")?
        )));
    }
    let arch_id = c.meta("arch_id")?.to_string();
    let class_count: usize = c.meta_parse("class_count")?;
    let res = (c.meta_parse::<usize>("res_h")?, c.meta_parse::<usize>("res_w")?);
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for i in 0..3 {
        mean[i] = c.meta_parse(&format!("preprocess.mean{i}"))?;
        std[i] = c.meta_parse(&format!("preprocess.std{i}"))?;
    }
    let stats = NormStats { mean, std };
    let mut rng = seed_everything(0).stream("checkpoint-rebuild");
    let mut model = build_classifier(&arch_id, class_count, res, stats, &mut rng)?;
    let mut params = model.params_mut();
    assign_params(&mut params, &c, "classifier checkpoint")?;
    drop(params);
    Ok(model)
}
