//! Checkpoint files: magic "TGCK", version, the serialized configuration, an
//! optimizer-state flag, then named arrays (name, rank, extents, 32-bit
//! little-endian values).

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::params::{name_index, schema, Params};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TGCK";
const VERSION: u32 = 1;

/// Optimizer moments stored alongside parameters when requested.
#[derive(Clone, Debug)]
pub struct OptSnapshot {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

pub fn save_checkpoint(
    path: &Path,
    params: &Params<f32>,
    opt: Option<&OptSnapshot>,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&params.config)
        .map_err(|e| Error::invalid(format!("config serialization failed: {}", e)))?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&[u8::from(opt.is_some())])?;

    for (spec, value) in params.schema.specs.iter().zip(&params.values) {
        write_array(&mut w, &spec.name, value)?;
    }
    if let Some(opt) = opt {
        write_array(&mut w, "opt.step", &Tensor::scalar(opt.step as f32))?;
        for (spec, t) in params.schema.specs.iter().zip(&opt.m) {
            write_array(&mut w, &format!("opt.m.{}", spec.name), t)?;
        }
        for (spec, t) in params.schema.specs.iter().zip(&opt.v) {
            write_array(&mut w, &format!("opt.v.{}", spec.name), t)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Params<f32>, Option<OptSnapshot>)> {
    let display = path.display().to_string();
    let bad = |detail: String| Error::Format {
        path: display.clone(),
        detail,
    };
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    if read_u32(&mut r)? != VERSION {
        return Err(bad("unsupported version".into()));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| bad(format!("config deserialization failed: {}", e)))?;
    config.validate()?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let has_opt = flag[0] != 0;

    let mut arrays: std::collections::HashMap<String, Tensor<f32>> =
        std::collections::HashMap::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("array name not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = extents.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let (rows, cols) = match extents[..] {
            [n] => (1, n),
            [r0, c0] => (r0, c0),
            _ => return Err(bad(format!("array `{}` has unsupported rank {}", name, rank))),
        };
        arrays.insert(name, Tensor::from_vec(rows, cols, data));
    }

    let sch = std::sync::Arc::new(schema(&config));
    let index = name_index(&sch);
    let mut values = vec![Tensor::zeros(0, 0); sch.specs.len()];
    for (name, &ix) in &index {
        let spec = &sch.specs[ix];
        let t = arrays
            .remove(*name)
            .ok_or_else(|| bad(format!("missing array `{}`", name)))?;
        if t.shape() != (spec.rows, spec.cols) {
            return Err(bad(format!(
                "array `{}` has shape {:?}, expected {:?}",
                name,
                t.shape(),
                (spec.rows, spec.cols)
            )));
        }
        values[ix] = t;
    }
    let params = Params {
        config,
        schema: sch.clone(),
        values,
    };

    let opt = if has_opt {
        let step = arrays
            .remove("opt.step")
            .ok_or_else(|| bad("missing array `opt.step`".into()))?
            .item() as u64;
        let mut take = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
            sch.specs
                .iter()
                .map(|spec| {
                    arrays
                        .remove(&format!("{}{}", prefix, spec.name))
                        .ok_or_else(|| bad(format!("missing array `{}{}`", prefix, spec.name)))
                })
                .collect()
        };
        let m = take("opt.m.")?;
        let v = take("opt.v.")?;
        Some(OptSnapshot { step, m, v })
    } else {
        None
    };
    Ok((params, opt))
}

fn write_array(w: &mut impl Write, name: &str, t: &Tensor<f32>) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&2u32.to_le_bytes())?;
    w.write_all(&(t.rows() as u32).to_le_bytes())?;
    w.write_all(&(t.cols() as u32).to_le_bytes())?;
    for &v in t.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Variant;

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let cfg = ModelConfig {
            vocab_size: 16,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            ffn_mult: 2,
            lexical_cap: 6,
            memory_capacity: 2,
            sentence_layer: 1,
            variant: Variant::Tg,
            ..ModelConfig::default()
        };
        let params: Params<f32> = Params::init(&cfg, 11).unwrap();
        let dir = std::env::temp_dir().join("tg-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.tgck");

        save_checkpoint(&path, &params, None).unwrap();
        let (back, opt) = load_checkpoint(&path).unwrap();
        assert!(opt.is_none());
        assert_eq!(back.config, params.config);
        for (a, b) in params.values.iter().zip(&back.values) {
            assert_eq!(a, b);
        }

        let snapshot = OptSnapshot {
            step: 17,
            m: params.values.iter().map(|t| t.map(|x| x * 0.5)).collect(),
            v: params.values.iter().map(|t| t.map(|x| x * x)).collect(),
        };
        save_checkpoint(&path, &params, Some(&snapshot)).unwrap();
        let (_, opt) = load_checkpoint(&path).unwrap();
        let opt = opt.unwrap();
        assert_eq!(opt.step, 17);
        assert_eq!(opt.m[3], snapshot.m[3]);
        assert_eq!(opt.v[5], snapshot.v[5]);
        std::fs::remove_file(&path).unwrap();
    }
}
