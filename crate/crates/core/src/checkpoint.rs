//! Checkpoint serialization.
//!
//! Layout: magic `AMSN`, u32 version (=1), u32 tensor count, then per tensor
//! u16 name length, UTF-8 name, u8 rank, u32 per-dimension sizes, raw
//! little-endian float32 data. Model configuration rides along as `meta/*`
//! tensors so a checkpoint alone is enough to rebuild the network.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::{GrayToRgb, ModelConfig};
use crate::error::{AmsnError, Result};
use crate::model::MsnModel;
use crate::msfe::MiwgMode;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AMSN";
const VERSION: u32 = 1;

fn config_meta(config: &ModelConfig) -> Vec<(String, Tensor<f32>)> {
    let mut packed = vec![config.k as f32];
    packed.extend(config.widths.iter().map(|&w| w as f32));
    packed.push(match config.miwg_mode {
        MiwgMode::Recursive => 0.0,
        MiwgMode::Indicator => 1.0,
    });
    packed.push(config.image_size as f32);
    packed.push(match config.gray_to_rgb {
        GrayToRgb::Replicate => 0.0,
        GrayToRgb::Colormap => 1.0,
    });
    vec![
        ("meta/config".to_string(), Tensor::new(vec![9], packed).expect("meta layout")),
        (
            "meta/norm_mean".to_string(),
            Tensor::new(vec![3], config.norm_mean.iter().map(|&v| v as f32).collect()).unwrap(),
        ),
        (
            "meta/norm_std".to_string(),
            Tensor::new(vec![3], config.norm_std.iter().map(|&v| v as f32).collect()).unwrap(),
        ),
    ]
}

fn config_from_meta(tensors: &[(String, Tensor<f32>)]) -> Result<ModelConfig> {
    let get = |name: &str| -> Result<&Tensor<f32>> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| AmsnError::Data(format!("checkpoint is missing `{name}`")))
    };
    let cfg = get("meta/config")?;
    if cfg.numel() != 9 {
        return Err(AmsnError::Data(format!(
            "meta/config must hold 9 values, found {}",
            cfg.numel()
        )));
    }
    let d = cfg.data();
    let mean = get("meta/norm_mean")?.data().to_vec();
    let std = get("meta/norm_std")?.data().to_vec();
    Ok(ModelConfig {
        k: d[0] as usize,
        widths: [
            d[1] as usize,
            d[2] as usize,
            d[3] as usize,
            d[4] as usize,
            d[5] as usize,
        ],
        miwg_mode: if d[6] == 0.0 {
            MiwgMode::Recursive
        } else {
            MiwgMode::Indicator
        },
        image_size: d[7] as usize,
        gray_to_rgb: if d[8] == 0.0 {
            GrayToRgb::Replicate
        } else {
            GrayToRgb::Colormap
        },
        norm_mean: [mean[0] as f64, mean[1] as f64, mean[2] as f64],
        norm_std: [std[0] as f64, std[1] as f64, std[2] as f64],
    })
}

pub fn save(path: &Path, store: &ParamStore<f32>, config: &ModelConfig) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = config_meta(config);
    let count = (store.len() + meta.len()) as u32;
    w.write_all(&count.to_le_bytes())?;
    let write_tensor = |w: &mut BufWriter<std::fs::File>, name: &str, t: &Tensor<f32>| -> Result<()> {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(AmsnError::Data(format!("tensor name too long: {name}")));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        if t.rank() > u8::MAX as usize {
            return Err(AmsnError::Data(format!("tensor rank too large: {name}")));
        }
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    for (name, t) in &meta {
        write_tensor(&mut w, name, t)?;
    }
    for e in store.entries() {
        write_tensor(&mut w, &e.name, &e.tensor)?;
    }
    w.flush()?;
    Ok(())
}

/// Raw tensor list from a checkpoint file, `meta/*` entries included.
pub fn load_raw(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = std::fs::File::open(path)
        .map_err(|e| AmsnError::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AmsnError::Data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(AmsnError::Data(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    r.read_exact(&mut buf4)?;
    let count = u32::from_le_bytes(buf4);
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2)?;
        let name_len = u16::from_le_bytes(buf2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| AmsnError::Data("checkpoint tensor name is not UTF-8".into()))?;
        let mut rank_byte = [0u8; 1];
        r.read_exact(&mut rank_byte)?;
        let mut shape = Vec::with_capacity(rank_byte[0] as usize);
        for _ in 0..rank_byte[0] {
            r.read_exact(&mut buf4)?;
            shape.push(u32::from_le_bytes(buf4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut buf4)?;
            data.push(f32::from_le_bytes(buf4));
        }
        let t = Tensor::new(shape, data)
            .map_err(|e| AmsnError::Data(format!("corrupt checkpoint tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    Ok(tensors)
}

/// Load a checkpoint and rebuild the model it describes.
pub fn load(path: &Path) -> Result<MsnModel<f32>> {
    let tensors = load_raw(path)?;
    let config = config_from_meta(&tensors)?;
    MsnModel::with_parameters(config, tensors)
}
