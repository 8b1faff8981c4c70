//! Binary checkpoint format, bit-exact on round trip:
//!
//! ```text
//! magic "MOEB" | version u32 | config_len u64 | config JSON bytes
//! | n_tensors u32 | tensors...
//! tensor: name_len u32 | name bytes | rank u32 | dims u64* | data f64*
//! ```
//!
//! Everything little-endian. Tensors are the model parameters in creation
//! order followed by one `bias_state.{i}` vector per MoE block — the bias
//! is model state: routing behavior cannot resume without it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MoeLm};

const MAGIC: &[u8; 4] = b"MOEB";
const VERSION: u32 = 1;

pub fn save_checkpoint(model: &MoeLm, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let cfg_json = serde_json::to_vec(&model.cfg)
        .map_err(|e| Error::config(format!("checkpoint: serialize config: {e}")))?;
    w.write_all(&(cfg_json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&cfg_json).map_err(io)?;

    let n_tensors = model.params().len() + model.bias_states().len();
    w.write_all(&(n_tensors as u32).to_le_bytes()).map_err(io)?;
    let mut write_tensor = |name: &str, shape: &[usize], data: &[f64]| -> Result<()> {
        let mut buf = Vec::with_capacity(4 + name.len() + 4 + shape.len() * 8 + data.len() * 8);
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))
    };
    for p in model.params().iter() {
        write_tensor(&p.name, &p.shape, &p.data)?;
    }
    for (i, state) in model.bias_states().iter().enumerate() {
        let bias = state.bias();
        write_tensor(&format!("bias_state.{i}"), &[bias.len()], bias)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MoeLm> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::contract(format!(
            "checkpoint {}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::contract(format!(
            "checkpoint {}: unsupported version {version}",
            path.display()
        )));
    }
    let cfg_len = read_u64(&mut r, path)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf).map_err(io)?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg_buf)
        .map_err(|e| Error::config(format!("checkpoint: parse config: {e}")))?;

    let mut model = MoeLm::new(cfg)?;
    let n_tensors = read_u32(&mut r, path)? as usize;
    for _ in 0..n_tensors {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(io)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::contract("checkpoint: tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        {
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw).map_err(io)?;
            for (i, chunk) in raw.chunks_exact(8).enumerate() {
                data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if let Some(rest) = name.strip_prefix("bias_state.") {
            let idx: usize = rest
                .parse()
                .map_err(|_| Error::contract(format!("checkpoint: bad bias name {name}")))?;
            model.restore_bias(idx, data)?;
        } else {
            let param = model
                .params_mut()
                .get_mut(&name)
                .ok_or_else(|| Error::contract(format!("checkpoint: unknown tensor {name}")))?;
            if param.shape != shape {
                return Err(Error::contract(format!(
                    "checkpoint: tensor {name} shape {:?} != expected {:?}",
                    shape, param.shape
                )));
            }
            param.data = data;
        }
    }
    Ok(model)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(buf))
}
