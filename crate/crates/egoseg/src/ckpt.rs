//! Flat key -> tensor checkpoint container.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic   b"EGSG"
//! version u32 (currently 1)
//! dtype   u8 (0 = f32, 1 = f64) — dtype of tensor sections
//! count   u64
//! entry*  count times:
//!   name_len u16, name bytes (UTF-8)
//!   dtype    u8 (0 = f32, 1 = f64) — `meta.` entries are always f64
//!   ndim     u8, dims u64 * ndim
//!   data     scalar bytes, row-major
//! ```
//!
//! Keys carry a section prefix: `param.` for model parameters, `adam_m.` /
//! `adam_v.` for optimizer moments, and `meta.` for scalar run state
//! (iteration, best validation mIoU, RNG seed and stream position). Scalar
//! bit patterns round-trip exactly.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tape::Real;
use ndarray::{ArrayD, IxDyn};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"EGSG";
const VERSION: u32 = 1;

/// Scalar run state stored alongside tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CkptMeta {
    pub iteration: u64,
    pub best_val_miou: f64,
    pub seed: u64,
    pub rng_word_pos: u128,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub params: Vec<(String, ArrayD<T>)>,
    pub adam_m: Vec<(String, ArrayD<T>)>,
    pub adam_v: Vec<(String, ArrayD<T>)>,
    pub meta: CkptMeta,
}

fn dtype_tag<T: Real>() -> u8 {
    if std::mem::size_of::<T>() == 4 {
        0
    } else {
        1
    }
}

fn write_entry<T: Real, W: Write>(w: &mut W, name: &str, arr: &ArrayD<T>, dtype: u8) -> Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&[dtype])?;
    w.write_all(&[arr.ndim() as u8])?;
    for &d in arr.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in arr.iter() {
        let x: f64 = num_traits::cast(*v).expect("finite scalar");
        if dtype == 0 {
            w.write_all(&(x as f32).to_le_bytes())?;
        } else {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// One decoded entry: logical f64 values plus the on-disk dtype tag.
struct RawEntry {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
    dtype: u8,
}

fn read_entry<R: Read>(r: &mut R) -> Result<RawEntry> {
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let name_len = u16::from_le_bytes(b2) as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Checkpoint("non-UTF8 tensor name".into()))?;
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let dtype = b1[0];
    r.read_exact(&mut b1)?;
    let ndim = b1[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        dims.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let v: f64 = if dtype == 0 {
            let mut b4 = [0u8; 4];
            r.read_exact(&mut b4)?;
            f32::from_le_bytes(b4) as f64
        } else {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)?;
            f64::from_le_bytes(b8)
        };
        data.push(v);
    }
    Ok(RawEntry {
        name,
        dims,
        data,
        dtype,
    })
}

fn entry_to_array<T: Real>(entry: RawEntry) -> Result<(String, ArrayD<T>)> {
    let data: Vec<T> = entry
        .data
        .into_iter()
        .map(|v| num_traits::cast::<f64, T>(v).expect("scalar fits"))
        .collect();
    let arr = ArrayD::from_shape_vec(IxDyn(&entry.dims), data)
        .map_err(|e| Error::Checkpoint(format!("bad tensor shape for {}: {e}", entry.name)))?;
    Ok((entry.name, arr))
}

pub fn save<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype_tag::<T>()])?;
    let meta_entries = meta_tensors(&ckpt.meta);
    let count = ckpt.params.len() + ckpt.adam_m.len() + ckpt.adam_v.len() + meta_entries.len();
    w.write_all(&(count as u64).to_le_bytes())?;
    let t = dtype_tag::<T>();
    for (name, arr) in &ckpt.params {
        write_entry(&mut w, &format!("param.{name}"), arr, t)?;
    }
    for (name, arr) in &ckpt.adam_m {
        write_entry(&mut w, &format!("adam_m.{name}"), arr, t)?;
    }
    for (name, arr) in &ckpt.adam_v {
        write_entry(&mut w, &format!("adam_v.{name}"), arr, t)?;
    }
    for (name, arr) in &meta_entries {
        write_entry(&mut w, name, arr, 1)?;
    }
    w.flush()?;
    Ok(())
}

fn meta_tensors(meta: &CkptMeta) -> Vec<(String, ArrayD<f64>)> {
    // Integers are stored through f64 bit-exactly up to 2^53, far beyond
    // any iteration count or RNG word position fragment here.
    let scalar = |v: f64| ArrayD::from_elem(IxDyn(&[]), v);
    vec![
        ("meta.iteration".to_string(), scalar(meta.iteration as f64)),
        ("meta.best_val_miou".to_string(), scalar(meta.best_val_miou)),
        ("meta.seed".to_string(), scalar(meta.seed as f64)),
        (
            "meta.rng_word_pos_lo".to_string(),
            scalar((meta.rng_word_pos & 0xffff_ffff) as f64),
        ),
        (
            "meta.rng_word_pos_mid".to_string(),
            scalar(((meta.rng_word_pos >> 32) & 0xffff_ffff) as f64),
        ),
        (
            "meta.rng_word_pos_hi".to_string(),
            scalar(((meta.rng_word_pos >> 64) & 0xffff_ffff) as f64),
        ),
    ]
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let tensor_dtype = b1[0];
    if tensor_dtype != dtype_tag::<T>() {
        return Err(Error::Checkpoint(format!(
            "dtype mismatch: file holds {}, requested {}",
            if tensor_dtype == 0 { "f32" } else { "f64" },
            if dtype_tag::<T>() == 0 { "f32" } else { "f64" },
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;

    let mut params = Vec::new();
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    let mut meta = CkptMeta::default();
    let mut pos_parts = [0u64; 3];
    for _ in 0..count {
        let entry = read_entry(&mut r)?;
        if let Some(rest) = entry.name.strip_prefix("meta.") {
            let v = entry.data.first().copied().unwrap_or(0.0);
            match rest {
                "iteration" => meta.iteration = v as u64,
                "best_val_miou" => meta.best_val_miou = v,
                "seed" => meta.seed = v as u64,
                "rng_word_pos_lo" => pos_parts[0] = v as u64,
                "rng_word_pos_mid" => pos_parts[1] = v as u64,
                "rng_word_pos_hi" => pos_parts[2] = v as u64,
                other => {
                    return Err(Error::Checkpoint(format!("unknown meta key {other}")));
                }
            }
            continue;
        }
        if entry.dtype != tensor_dtype {
            return Err(Error::Checkpoint(format!(
                "tensor {} dtype disagrees with the header",
                entry.name
            )));
        }
        let (name, arr) = entry_to_array::<T>(entry)?;
        if let Some(rest) = name.strip_prefix("param.") {
            params.push((rest.to_string(), arr));
        } else if let Some(rest) = name.strip_prefix("adam_m.") {
            adam_m.push((rest.to_string(), arr));
        } else if let Some(rest) = name.strip_prefix("adam_v.") {
            adam_v.push((rest.to_string(), arr));
        } else {
            return Err(Error::Checkpoint(format!("unknown section for key {name}")));
        }
    }
    meta.rng_word_pos = (pos_parts[0] as u128)
        | ((pos_parts[1] as u128) << 32)
        | ((pos_parts[2] as u128) << 64);
    Ok(Checkpoint {
        params,
        adam_m,
        adam_v,
        meta,
    })
}

/// Convenience: snapshot a parameter store (without optimizer state).
pub fn from_store<T: Real>(store: &ParamStore<T>, meta: CkptMeta) -> Checkpoint<T> {
    Checkpoint {
        params: store
            .iter()
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect(),
        adam_m: Vec::new(),
        adam_v: Vec::new(),
        meta,
    }
}
