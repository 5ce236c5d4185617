//! Checkpoint format: a text manifest (names, shapes, dtype, config
//! fingerprint, seed) next to flat little-endian IEEE-754 f64 arrays,
//! concatenated in manifest order. Loads reject any shape or fingerprint
//! mismatch.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const PARAMS_NAME: &str = "params.bin";

pub struct Checkpoint {
    pub params: ParamSet,
    pub fingerprint: String,
    pub seed: u64,
}

/// Write `dir/manifest.tsv` and `dir/params.bin`. Byte-identical for
/// identical parameters, fingerprint, and seed.
pub fn save(params: &ParamSet, fingerprint: &str, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str(&format!("fingerprint\t{fingerprint}\n"));
    manifest.push_str(&format!("seed\t{seed}\n"));
    manifest.push_str("dtype\tf64le\n");
    let mut offset = 0usize;
    for id in params.ids() {
        let t = params.get(id);
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let bytes = t.numel() * 8;
        manifest.push_str(&format!(
            "param\t{}\t{}\t{}\t{}\n",
            params.name(id),
            dims.join("x"),
            offset,
            bytes
        ));
        offset += bytes;
    }
    fs::write(dir.join(MANIFEST_NAME), manifest)?;

    let mut payload = Vec::with_capacity(offset);
    for id in params.ids() {
        for v in params.get(id).data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(dir.join(PARAMS_NAME))?;
    f.write_all(&payload)?;
    Ok(())
}

/// Load a checkpoint directory. If `expect_fingerprint` is given, a
/// differing stored fingerprint is an error.
pub fn load(dir: &Path, expect_fingerprint: Option<&str>) -> Result<Checkpoint> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut fingerprint = None;
    let mut seed = None;
    let mut entries: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            ["fingerprint", v] => fingerprint = Some(v.to_string()),
            ["seed", v] => {
                seed = Some(v.parse().map_err(|_| {
                    Error::Checkpoint(format!("bad seed at manifest line {}", lineno + 1))
                })?)
            }
            ["dtype", "f64le"] => {}
            ["dtype", other] => {
                return Err(Error::Checkpoint(format!("unsupported dtype {other}")))
            }
            ["param", name, dims, offset, bytes] => {
                let shape: Vec<usize> = if dims.is_empty() {
                    vec![]
                } else {
                    dims.split('x')
                        .map(|d| {
                            d.parse().map_err(|_| {
                                Error::Checkpoint(format!("bad shape for {name}"))
                            })
                        })
                        .collect::<Result<_>>()?
                };
                let offset: usize = offset
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad offset for {name}")))?;
                let bytes: usize = bytes
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad length for {name}")))?;
                entries.push((name.to_string(), shape, offset, bytes));
            }
            _ => {
                return Err(Error::Checkpoint(format!(
                    "unrecognized manifest line {}",
                    lineno + 1
                )))
            }
        }
    }
    let fingerprint =
        fingerprint.ok_or_else(|| Error::Checkpoint("manifest missing fingerprint".into()))?;
    let seed = seed.ok_or_else(|| Error::Checkpoint("manifest missing seed".into()))?;
    if let Some(expect) = expect_fingerprint {
        if expect != fingerprint {
            return Err(Error::Checkpoint(format!(
                "fingerprint mismatch: checkpoint {fingerprint}, expected {expect}"
            )));
        }
    }

    let mut payload = Vec::new();
    fs::File::open(dir.join(PARAMS_NAME))?.read_to_end(&mut payload)?;
    let mut params = ParamSet::new();
    for (name, shape, offset, bytes) in entries {
        let numel: usize = shape.iter().product();
        if bytes != numel * 8 || offset + bytes > payload.len() {
            return Err(Error::Checkpoint(format!(
                "payload bounds do not match manifest entry {name}"
            )));
        }
        let data: Vec<f64> = payload[offset..offset + bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.add(name, Tensor::new(shape, data)?);
    }
    Ok(Checkpoint { params, fingerprint, seed })
}

/// Overwrite a freshly initialized parameter set with checkpointed values;
/// names and shapes must line up exactly.
pub fn apply(params: &mut ParamSet, loaded: &ParamSet) -> Result<()> {
    if params.len() != loaded.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            params.len(),
            loaded.len()
        )));
    }
    for id in params.ids() {
        let name = params.name(id).to_string();
        let src = loaded
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint missing parameter {name}")))?;
        if loaded.get(src).shape() != params.get(id).shape() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint_apply",
                left: params.get(id).shape().to_vec(),
                right: loaded.get(src).shape().to_vec(),
            });
        }
        params.set(id, loaded.get(src).clone());
    }
    Ok(())
}

/// Byte identity of two checkpoint directories (manifest and payload).
pub fn identical(a: &Path, b: &Path) -> Result<bool> {
    for name in [MANIFEST_NAME, PARAMS_NAME] {
        if fs::read(a.join(name))? != fs::read(b.join(name))? {
            return Ok(false);
        }
    }
    Ok(true)
}
