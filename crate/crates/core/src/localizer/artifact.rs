//! Versioned little-endian binary model file.
//!
//! Layout: magic, version `u32`, metadata pairs, normalization stats,
//! extractor and regressor parameter sets, optional source statistics,
//! then a CRC32 of everything before it.

use std::path::Path;

use super::{Localizer, SourceStats};
use crate::data::{NormStats, N_FEATURES};
use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};

pub const ARTIFACT_MAGIC: &[u8; 8] = b"MTLOCMDL";
pub const ARTIFACT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn params(&mut self, ps: &ParamSet) {
        self.u32(ps.len() as u32);
        for p in ps.iter() {
            self.str(&p.name);
            self.u32(p.value.shape().len() as u32);
            for &d in p.value.shape() {
                self.u64(d as u64);
            }
            self.f64s(p.value.data());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Artifact("file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|n| *n <= self.buf.len())
            .ok_or_else(|| Error::Artifact(format!("implausible {what} {n}")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Artifact("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Artifact("invalid utf-8 string".into()))
    }
    fn params(&mut self) -> Result<ParamSet> {
        let count = self.u32()?;
        let mut ps = ParamSet::new();
        for _ in 0..count {
            let name = self.str()?;
            let ndim = self.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Artifact(format!("parameter `{name}` has {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| self.len("dimension")).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Artifact("size overflow".into()))?;
            let values = self.f64s(n)?;
            let t = Tensor::from_vec(&shape, values).map_err(|e| Error::Artifact(e.to_string()))?;
            ps.add(name, t)?;
        }
        Ok(ps)
    }
}

fn encode(model: &Localizer) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(ARTIFACT_MAGIC);
    w.u32(ARTIFACT_VERSION);
    w.u32(model.meta.len() as u32);
    for (k, v) in &model.meta {
        w.str(k);
        w.str(v);
    }
    w.f64s(&model.norm.mean);
    w.f64s(&model.norm.std);
    w.params(model.extractor().params());
    w.params(model.regressor().params());
    match &model.source_stats {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            w.f64s(&s.pred_mean);
            w.f64s(&s.pred_var);
            w.u64(s.feat_dim as u64);
            w.f64s(&s.feat_cov);
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

fn decode(buf: &[u8]) -> Result<Localizer> {
    if buf.len() < ARTIFACT_MAGIC.len() + 8 {
        return Err(Error::Artifact("file is truncated".into()));
    }
    if &buf[..8] != ARTIFACT_MAGIC {
        return Err(Error::Artifact("not a model artifact (bad magic)".into()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != ARTIFACT_VERSION {
        return Err(Error::Artifact(format!(
            "unsupported artifact version {version} (expected {ARTIFACT_VERSION})"
        )));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Artifact("checksum mismatch (file is corrupted or truncated)".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let mut meta = std::collections::BTreeMap::new();
    for _ in 0..r.u32()? {
        let k = r.str()?;
        meta.insert(k, r.str()?);
    }
    let mean = r.f64s(N_FEATURES)?;
    let std = r.f64s(N_FEATURES)?;
    let norm = NormStats {
        mean: mean.try_into().unwrap(),
        std: std.try_into().unwrap(),
    };
    let extractor = r.params()?;
    let regressor = r.params()?;
    let mut model = Localizer::from_params(extractor, regressor, norm)
        .map_err(|e| Error::Artifact(format!("architecture mismatch: {e}")))?;
    model.meta = meta;
    model.source_stats = match r.u8()? {
        0 => None,
        1 => {
            let pred_mean = r.f64s(2)?;
            let pred_var = r.f64s(2)?;
            let feat_dim = r.len("feature dimension")?;
            let feat_cov = r.f64s(feat_dim * feat_dim)?;
            let s = SourceStats {
                pred_mean: pred_mean.try_into().unwrap(),
                pred_var: pred_var.try_into().unwrap(),
                feat_dim,
                feat_cov,
            };
            s.validate().map_err(|e| Error::Artifact(e.to_string()))?;
            Some(s)
        }
        f => return Err(Error::Artifact(format!("bad source-stats flag {f}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Artifact("trailing bytes after model".into()));
    }
    Ok(model)
}

pub fn save(model: &Localizer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Localizer> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
