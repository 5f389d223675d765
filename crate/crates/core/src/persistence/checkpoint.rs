//! Checkpoint directories: a text manifest plus one little-endian blob per
//! array, each with a CRC-32.
//!
//! ```text
//! ckpt/
//!   manifest.txt
//!   a0000.bin …
//!   vocab.txt        (baseline only)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::PersistError;
use crate::bpe::BpeVocab;
use crate::models::Parameters;
use crate::numerics::{Real, Tensor};
use crate::training::{AdamWConfig, OptimizerState};

pub const FORMAT: &str = "hat-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";
pub const LOCK: &str = ".lock";

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F: Real> {
    pub config: RunConfig,
    /// Completed optimizer steps.
    pub step: usize,
    pub rng: RngState,
    pub params: Vec<(String, Tensor<F>)>,
    pub optimizer: Option<OptimizerState<F>>,
    pub vocab: Option<BpeVocab>,
}

impl<F: Real> Checkpoint<F> {
    pub fn named_params<P: Parameters<F>>(params: &P) -> Vec<(String, Tensor<F>)> {
        params.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Copies the stored arrays into `params`, checking names and shapes.
    pub fn assign<P: Parameters<F>>(&self, params: &mut P) -> Result<(), PersistError> {
        let names: Vec<(String, Vec<usize>)> =
            params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if names.len() != self.params.len() {
            return Err(PersistError::ConfigMismatch(format!(
                "checkpoint has {} arrays, model has {}",
                self.params.len(),
                names.len()
            )));
        }
        for ((name, shape), (sn, st)) in names.iter().zip(&self.params) {
            if name != sn || shape.as_slice() != st.shape() {
                return Err(PersistError::ConfigMismatch(format!(
                    "array {sn} {:?} does not fit {name} {shape:?}",
                    st.shape()
                )));
            }
        }
        for (dst, (_, src)) in params.tensors_mut().into_iter().zip(&self.params) {
            *dst = src.clone();
        }
        Ok(())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> PersistError {
    PersistError::Io(format!("{}: {e}", path.display()))
}

fn corrupt(msg: impl Into<String>) -> PersistError {
    PersistError::CorruptFile(msg.into())
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn write_blob<F: Real>(dir: &Path, file: &str, t: &Tensor<F>) -> Result<u32, PersistError> {
    let mut bytes = Vec::with_capacity(t.len() * F::BYTES);
    for &x in t.data() {
        x.write_le(&mut bytes);
    }
    let path = dir.join(file);
    fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
    Ok(crc32fast::hash(&bytes))
}

/// Writes `ckpt` into `dir`. Blobs go first and the manifest last, so a
/// directory with a complete manifest has complete blobs.
pub fn save_checkpoint<F: Real>(dir: &Path, ckpt: &Checkpoint<F>) -> Result<(), PersistError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut m = String::new();
    m.push_str(&format!("format = {FORMAT}\nversion = {VERSION}\ndtype = {}\n", F::DTYPE));
    m.push_str(&format!("step = {}\n", ckpt.step));
    let seed: String = ckpt.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
    m.push_str(&format!(
        "rng_seed = {seed}\nrng_stream = {}\nrng_word_pos = {}\n",
        ckpt.rng.stream, ckpt.rng.word_pos
    ));
    let mut idx = 0;
    let mut arrays = |group: &str, name: &str, t: &Tensor<F>, m: &mut String| -> Result<(), PersistError> {
        let file = format!("a{idx:04}.bin");
        idx += 1;
        let crc = write_blob(dir, &file, t)?;
        m.push_str(&format!("array = {group} {name} {} {file} {crc:08x}\n", shape_text(t.shape())));
        Ok(())
    };
    for (name, t) in &ckpt.params {
        arrays("param", name, t, &mut m)?;
    }
    if let Some(opt) = &ckpt.optimizer {
        m.push_str(&format!("adam_step = {}\n", opt.step));
        for ((name, _), t) in ckpt.params.iter().zip(&opt.m) {
            arrays("adam_m", name, t, &mut m)?;
        }
        for ((name, _), t) in ckpt.params.iter().zip(&opt.v) {
            arrays("adam_v", name, t, &mut m)?;
        }
    }
    if let Some(v) = &ckpt.vocab {
        let text = v.to_text();
        let path = dir.join("vocab.txt");
        fs::write(&path, &text).map_err(|e| io_err(&path, e))?;
        m.push_str(&format!("vocab = vocab.txt {:08x}\n", crc32fast::hash(text.as_bytes())));
    }
    m.push_str("[config]\n");
    m.push_str(&ckpt.config.to_text());
    m.push_str(&format!("checksum = {:08x}\n", crc32fast::hash(m.as_bytes())));
    let tmp = dir.join("manifest.tmp");
    fs::write(&tmp, &m).map_err(|e| io_err(&tmp, e))?;
    let path = dir.join(MANIFEST);
    fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
}

struct Manifest {
    dtype: String,
    header: Vec<(String, String)>,
    arrays: Vec<[String; 5]>,
    config: RunConfig,
}

fn read_manifest(dir: &Path) -> Result<Manifest, PersistError> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    let text = String::from_utf8(bytes).map_err(|_| corrupt("manifest is not UTF-8"))?;
    let body_end = text
        .rfind("checksum = ")
        .ok_or_else(|| corrupt("manifest has no checksum line (truncated?)"))?;
    let (body, tail) = text.split_at(body_end);
    let stored = tail.trim_start_matches("checksum = ").trim();
    if stored != format!("{:08x}", crc32fast::hash(body.as_bytes())) {
        return Err(corrupt("manifest checksum mismatch"));
    }
    let (head, config) = body
        .split_once("[config]\n")
        .ok_or_else(|| corrupt("manifest has no [config] section"))?;
    let mut header = Vec::new();
    let mut arrays = Vec::new();
    for line in head.lines() {
        let (k, v) = line.split_once(" = ").ok_or_else(|| corrupt(format!("bad manifest line {line:?}")))?;
        if k == "array" {
            let f: Vec<String> = v.split(' ').map(str::to_string).collect();
            let f: [String; 5] = f.try_into().map_err(|_| corrupt(format!("bad array line {line:?}")))?;
            arrays.push(f);
        } else {
            header.push((k.to_string(), v.to_string()));
        }
    }
    let get = |k: &str| header.iter().find(|(hk, _)| hk == k).map(|(_, v)| v.clone());
    if get("format").as_deref() != Some(FORMAT) {
        return Err(corrupt("not a checkpoint manifest"));
    }
    let version: u32 = get("version").and_then(|v| v.parse().ok()).ok_or_else(|| corrupt("bad version"))?;
    if version != VERSION {
        return Err(PersistError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let dtype = get("dtype").ok_or_else(|| corrupt("missing dtype"))?;
    let config = RunConfig::parse(config).map_err(|e| corrupt(format!("stored config: {e}")))?;
    Ok(Manifest {
        dtype,
        header,
        arrays,
        config,
    })
}

/// Stored config and element type without reading any array.
pub fn peek_checkpoint(dir: &Path) -> Result<(RunConfig, String), PersistError> {
    let m = read_manifest(dir)?;
    Ok((m.config, m.dtype))
}

fn read_blob<F: Real>(dir: &Path, f: &[String; 5]) -> Result<Tensor<F>, PersistError> {
    let shape: Vec<usize> = f[2]
        .split('x')
        .map(|d| d.parse().map_err(|_| corrupt(format!("bad shape {}", f[2]))))
        .collect::<Result<_, _>>()?;
    let path = dir.join(&f[3]);
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * F::BYTES {
        return Err(corrupt(format!("{}: {} bytes, expected {}", f[3], bytes.len(), n * F::BYTES)));
    }
    if format!("{:08x}", crc32fast::hash(&bytes)) != f[4] {
        return Err(corrupt(format!("{}: checksum mismatch", f[3])));
    }
    let data = bytes.chunks_exact(F::BYTES).map(F::read_le).collect();
    Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))
}

pub fn load_checkpoint<F: Real>(dir: &Path) -> Result<Checkpoint<F>, PersistError> {
    let m = read_manifest(dir)?;
    if m.dtype != F::DTYPE {
        return Err(PersistError::DtypeMismatch {
            found: m.dtype,
            expected: F::DTYPE.to_string(),
        });
    }
    let get = |k: &str| m.header.iter().find(|(hk, _)| hk == k).map(|(_, v)| v.as_str());
    let num = |k: &str| -> Result<u128, PersistError> {
        get(k).and_then(|v| v.parse().ok()).ok_or_else(|| corrupt(format!("missing {k}")))
    };
    let seed_hex = get("rng_seed").ok_or_else(|| corrupt("missing rng_seed"))?;
    let mut seed = [0u8; 32];
    if seed_hex.len() != 64 {
        return Err(corrupt("bad rng_seed"));
    }
    for (i, s) in seed.iter_mut().enumerate() {
        *s = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| corrupt("bad rng_seed"))?;
    }
    let rng = RngState {
        seed,
        stream: num("rng_stream")? as u64,
        word_pos: num("rng_word_pos")?,
    };

    let mut params = Vec::new();
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    for f in &m.arrays {
        let t = read_blob::<F>(dir, f)?;
        match f[0].as_str() {
            "param" => params.push((f[1].clone(), t)),
            "adam_m" => adam_m.push(t),
            "adam_v" => adam_v.push(t),
            g => return Err(corrupt(format!("unknown array group {g}"))),
        }
    }
    let optimizer = match get("adam_step") {
        None => None,
        Some(s) => {
            if adam_m.len() != params.len() || adam_v.len() != params.len() {
                return Err(corrupt("optimizer moments do not match parameters"));
            }
            let c = &m.config;
            Some(OptimizerState {
                config: AdamWConfig {
                    beta1: c.beta1,
                    beta2: c.beta2,
                    eps: c.adam_eps,
                    weight_decay: c.weight_decay,
                },
                step: s.parse().map_err(|_| corrupt("bad adam_step"))?,
                m: adam_m,
                v: adam_v,
            })
        }
    };
    let vocab = match get("vocab") {
        None => None,
        Some(v) => {
            let (file, crc) = v.split_once(' ').ok_or_else(|| corrupt("bad vocab line"))?;
            let path = dir.join(file);
            let text = fs::read(&path).map_err(|e| io_err(&path, e))?;
            if format!("{:08x}", crc32fast::hash(&text)) != crc {
                return Err(corrupt("vocab checksum mismatch"));
            }
            let text = String::from_utf8(text).map_err(|_| corrupt("vocab is not UTF-8"))?;
            Some(BpeVocab::from_text(&text).map_err(|e| corrupt(e.to_string()))?)
        }
    };
    Ok(Checkpoint {
        config: m.config,
        step: num("step")? as usize,
        rng,
        params,
        optimizer,
        vocab,
    })
}

/// Fails unless `expected` builds the same tensor shapes as `stored`.
pub fn check_compatible(stored: &RunConfig, expected: &RunConfig) -> Result<(), PersistError> {
    let (a, b) = (stored.shape_keys(), expected.shape_keys());
    if a != b {
        let diff: Vec<String> = b
            .iter()
            .filter(|(k, v)| a.get(*k) != Some(*v))
            .map(|(k, v)| format!("{k}: checkpoint {:?}, config {v}", a.get(k)))
            .collect();
        return Err(PersistError::ConfigMismatch(diff.join("; ")));
    }
    Ok(())
}

/// Exclusive ownership of a checkpoint directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, PersistError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PersistError::Locked(dir.to_path_buf())),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
