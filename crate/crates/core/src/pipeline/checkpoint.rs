//! Binary checkpoint: magic, version, role, step, config TOML, action
//! statistics, then a tensor table of parameters followed by EMA shadows
//! (named `ema/<param>`). All integers and payloads are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nncore::{DType, ParamId, Tensor};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::data::ActionStats;
use crate::pipeline::model::{Policy, PolicyRole};

pub const CKPT_MAGIC: &[u8; 4] = b"DDCK";
pub const CKPT_VERSION: u32 = 1;
const EMA_PREFIX: &str = "ema/";

pub fn encode(policy: &Policy) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.push(policy.role.code());
    out.extend_from_slice(&policy.step.to_le_bytes());
    let cfg = policy.cfg.to_toml();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let st = &policy.stats;
    for v in st.mean.iter().chain(&st.std).chain(std::iter::once(&st.scale)) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut table: Vec<(String, &Tensor<f32>)> = policy
        .store
        .iter()
        .map(|(_, n, t)| (n.to_string(), t))
        .collect();
    if let Some(ema) = policy.store.ema() {
        for (i, t) in ema.iter().enumerate() {
            table.push((format!("{EMA_PREFIX}{}", policy.store.name(ParamId(i))), t));
        }
    }
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, t) in table {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DType::F32.code());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8], path: &Path) -> Result<Policy> {
    let bad = |m: String| Error::format(path, m);
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4)? != CKPT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let role = PolicyRole::from_code(r.u8()?).ok_or_else(|| bad("unknown policy role".into()))?;
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(n)?).map_err(|e| bad(format!("config is not UTF-8: {e}")))?;
    let cfg = TrainConfig::from_toml(text, &[])?;
    let mut vals = [0f32; 7];
    for v in &mut vals {
        *v = r.f32()?;
    }
    let stats = ActionStats {
        mean: [vals[0], vals[1], vals[2]],
        std: [vals[3], vals[4], vals[5]],
        scale: vals[6],
    };
    let mut policy = Policy::new(&cfg, role)?;
    policy.step = step;
    policy.stats = stats;
    let count = r.u32()? as usize;
    let mut ema: Vec<Option<Tensor<f32>>> = vec![None; policy.store.len()];
    let mut seen = vec![false; policy.store.len()];
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| bad(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DType::F32.code() {
            return Err(bad(format!("tensor `{name}` has dtype code {dtype}, expected f32")));
        }
        let ndim = r.u8()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data)?;
        let (is_ema, base) = match name.strip_prefix(EMA_PREFIX) {
            Some(b) => (true, b),
            None => (false, name.as_str()),
        };
        let id = policy
            .store
            .id(base)
            .ok_or_else(|| bad(format!("tensor `{name}` does not belong to this architecture")))?;
        if policy.store.get(id).shape() != t.shape() {
            return Err(bad(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                policy.store.get(id).shape()
            )));
        }
        if is_ema {
            ema[id.0] = Some(t);
        } else {
            *policy.store.get_mut(id) = t;
            seen[id.0] = true;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(bad(format!("missing tensor `{}`", policy.store.name(ParamId(i)))));
    }
    if ema.iter().any(Option::is_some) {
        let shadows = ema
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| bad(format!("missing EMA shadow for `{}`", policy.store.name(ParamId(i))))))
            .collect::<Result<Vec<_>>>()?;
        policy.store.set_ema(shadows)?;
    }
    if r.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(policy)
}

pub fn save(policy: &Policy, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(policy))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Policy> {
    let buf = std::fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
    decode(&buf, path)
}
