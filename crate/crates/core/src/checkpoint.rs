//! Checkpoints: resolved config, iteration counter and every parameter
//! tensor, in a deterministic binary layout (save -> load -> save is
//! byte-identical). The training RNG is counter-based and derived from
//! (seed, iteration), so persisting the iteration pins the full state.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"OCKP";
pub const VERSION: u16 = 1;

pub fn save(path: &Path, model: &Model, iteration: u64) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&iteration.to_le_bytes());
    let cfg_text = model.cfg.to_toml();
    buf.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg_text.as_bytes());
    buf.extend_from_slice(&(model.ps.len() as u32).to_le_bytes());
    for (_, p) in model.ps.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &buf)?;
    Ok(())
}

/// Load a checkpoint into a freshly initialized model of the embedded
/// config. Parameter names and shapes must match the architecture exactly.
pub fn load(path: &Path) -> Result<(Model, u64)> {
    let buf = fs::read(path)?;
    let mut pos = 0usize;
    let need = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Parse(format!("truncated checkpoint at offset {pos}", pos = *pos)));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if need(&mut pos, 4)? != MAGIC {
        return Err(Error::Parse("bad checkpoint magic".into()));
    }
    let version = u16::from_le_bytes(need(&mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let iteration = u64::from_le_bytes(need(&mut pos, 8)?.try_into().unwrap());
    let cfg_len = u32::from_le_bytes(need(&mut pos, 4)?.try_into().unwrap()) as usize;
    let cfg_text = std::str::from_utf8(need(&mut pos, cfg_len)?)
        .map_err(|_| Error::Parse("checkpoint config is not utf-8".into()))?
        .to_string();
    let cfg = RunConfig::parse(&cfg_text)?;
    let mut model = Model::init(&cfg)?;

    let count = u32::from_le_bytes(need(&mut pos, 4)?.try_into().unwrap()) as usize;
    if count != model.ps.len() {
        return Err(Error::Parse(format!(
            "checkpoint has {count} parameters, architecture expects {}",
            model.ps.len()
        )));
    }
    for id in model.ps.ids().collect::<Vec<_>>() {
        let name_len = u16::from_le_bytes(need(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(need(&mut pos, name_len)?)
            .map_err(|_| Error::Parse("parameter name is not utf-8".into()))?
            .to_string();
        let ndim = need(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(need(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(need(&mut pos, 8)?.try_into().unwrap()));
        }
        let p = model.ps.get_mut(id);
        if p.name != name || p.value.shape() != shape.as_slice() {
            return Err(Error::Parse(format!(
                "parameter mismatch: checkpoint {name} {shape:?} vs architecture {} {:?}",
                p.name,
                p.value.shape()
            )));
        }
        p.value = Tensor::new(shape, data);
    }
    if pos != buf.len() {
        return Err(Error::Parse(format!("{} trailing bytes in checkpoint", buf.len() - pos)));
    }
    Ok((model, iteration))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            channels: 6,
            enc_layers: 1,
            dec_layers: 1,
            queries: 4,
            ffn_dim: 32,
            ..RunConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let model = Model::init(&tiny_cfg()).unwrap();
        save(&a, &model, 42).unwrap();
        let (loaded, iter) = load(&a).unwrap();
        assert_eq!(iter, 42);
        save(&b, &loaded, 42).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn load_restores_values_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut model = Model::init(&tiny_cfg()).unwrap();
        // perturb a value so we are not just reading the init
        let id = model.ps.ids().next().unwrap();
        model.ps.get_mut(id).value.data_mut()[0] = 0.123456789;
        save(&p, &model, 7).unwrap();
        let (loaded, _) = load(&p).unwrap();
        for (a, b) in model.ps.iter().zip(loaded.ps.iter()) {
            assert_eq!(a.1.value.data(), b.1.value.data(), "param {}", a.1.name);
        }
    }

    #[test]
    fn truncated_checkpoint_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let model = Model::init(&tiny_cfg()).unwrap();
        save(&p, &model, 1).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() / 2);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load(&p), Err(Error::Parse(_))));
    }
}
