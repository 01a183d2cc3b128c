//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "HLSTCMCK"
//! version      u32      FORMAT_VERSION
//! header_len   u32
//! header       header_len bytes of UTF-8 `key=value` lines
//! count        u32      number of tensors that follow
//! per tensor:
//!   name_len   u16
//!   name       name_len bytes of UTF-8
//!   rank       u8       1 or 2
//!   dims       rank × u64
//!   values     product(dims) × f64 (row-major for matrices)
//! ```
//!
//! The header holds every model config field, `velocity=true|false`, and
//! free-form `meta.<key>` entries. Tensors appear in the declaration order of
//! [`HlstcmParams`]; when velocity is stored, a second full set follows with
//! names prefixed by `velocity.`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{HlstcmConfig, HlstcmParams};
use crate::tensors::Tensors;

pub const MAGIC: &[u8; 8] = b"HLSTCMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: HlstcmConfig,
    pub params: HlstcmParams,
    /// Optimizer momentum, kept so a resumed run continues exactly.
    pub velocity: Option<HlstcmParams>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(config: HlstcmConfig, params: HlstcmParams) -> Self {
        Checkpoint { config, params, velocity: None, meta: BTreeMap::new() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in self.config.to_pairs() {
            header.push_str(&format!("{k}={v}\n"));
        }
        header.push_str(&format!("velocity={}\n", self.velocity.is_some()));
        for (k, v) in &self.meta {
            header.push_str(&format!("meta.{k}={v}\n"));
        }

        let mut tensors = self.params.tensors();
        if let Some(v) = &self.velocity {
            tensors.extend(v.tensors().into_iter().map(|(n, t)| (format!("velocity.{n}"), t)));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = t.dims();
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
        let mut r = Reader { buf: bytes, pos: 0 };

        let magic = r.take(8).map_err(|_| fail("file too short for a checkpoint".into()))?;
        if magic != MAGIC {
            return Err(fail("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32().map_err(|_| fail("truncated before the format version".into()))?;
        if version != FORMAT_VERSION {
            return Err(fail(format!("format version {version} is not supported (expected {FORMAT_VERSION})")));
        }
        let header_len = r.u32().map_err(|_| fail("truncated in the header".into()))? as usize;
        let header = r.take(header_len).map_err(|_| fail("truncated in the header".into()))?;
        let header = std::str::from_utf8(header).map_err(|_| fail("header is not UTF-8".into()))?;

        let mut config = HlstcmConfig::default();
        let mut velocity = false;
        let mut meta = BTreeMap::new();
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| fail(format!("malformed header line '{line}'")))?;
            if let Some(mk) = k.strip_prefix("meta.") {
                meta.insert(mk.to_string(), v.to_string());
            } else if k == "velocity" {
                velocity = v == "true";
            } else if !config.set(k, v).map_err(|e| fail(e.to_string()))? {
                return Err(fail(format!("unknown header key '{k}'")));
            }
        }
        config.validate().map_err(|e| fail(e.to_string()))?;

        let mut params = HlstcmParams::zeros(&config).map_err(|e| fail(e.to_string()))?;
        let mut vel = velocity.then(|| params.clone());
        let expected = params.tensors().len() * if velocity { 2 } else { 1 };
        let count = r.u32().map_err(|_| fail("truncated before the tensor count".into()))? as usize;
        if count != expected {
            return Err(fail(format!("holds {count} tensors, header describes {expected}")));
        }
        read_tensors(&mut r, &mut params, "", &fail)?;
        if let Some(v) = &mut vel {
            read_tensors(&mut r, v, "velocity.", &fail)?;
        }
        if r.pos != bytes.len() {
            return Err(fail(format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, params, velocity: vel, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })?;
        Self::from_bytes(&bytes, path)
    }
}

fn read_tensors(r: &mut Reader<'_>, into: &mut HlstcmParams, prefix: &str, fail: &dyn Fn(String) -> Error) -> Result<()> {
    let shapes: Vec<Vec<usize>> = into.tensors().iter().map(|(_, t)| t.dims()).collect();
    for ((name, mut t), shape) in into.tensors_mut().into_iter().zip(shapes) {
        let want = format!("{prefix}{name}");
        let truncated = || fail(format!("truncated: tensor '{want}' is missing or incomplete"));
        let len = r.u16().map_err(|_| truncated())? as usize;
        let got = r.take(len).map_err(|_| truncated())?;
        let got = String::from_utf8_lossy(got).into_owned();
        if got != want {
            return Err(fail(format!("expected tensor '{want}', found '{got}'")));
        }
        let rank = r.u8().map_err(|_| truncated())? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64().map_err(|_| truncated())? as usize);
        }
        if dims != shape {
            return Err(fail(format!("dimension mismatch for '{want}': file has {dims:?}, configuration needs {shape:?}")));
        }
        for x in t.data_mut().iter_mut() {
            let b = r.take(8).map_err(|_| truncated())?;
            *x = f64::from_le_bytes(b.try_into().expect("eight bytes"));
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ()> {
        let end = self.pos.checked_add(n).ok_or(())?;
        let s = self.buf.get(self.pos..end).ok_or(())?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, ()> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, ()> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, ()> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, ()> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(params: &HlstcmParams, config: &HlstcmConfig, path: &Path) -> Result<()> {
    params.check_against(config)?;
    Checkpoint::new(config.clone(), params.clone()).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(HlstcmParams, HlstcmConfig)> {
    let c = Checkpoint::load(path)?;
    Ok((c.params, c.config))
}

/// Loads a checkpoint and requires its architecture to equal `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &HlstcmConfig) -> Result<HlstcmParams> {
    let (params, config) = load_checkpoint(path)?;
    let mismatches: Vec<String> = config
        .to_pairs()
        .into_iter()
        .zip(expected.to_pairs())
        .filter(|(a, b)| a.1 != b.1)
        .map(|((k, have), (_, want))| format!("{k}: checkpoint {have}, configuration {want}"))
        .collect();
    if !mismatches.is_empty() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("dimension mismatch ({})", mismatches.join("; ")),
        });
    }
    Ok(params)
}
