//! Binary checkpoint file, little-endian:
//!
//! ```text
//! "DICC" | u32 version | u32 len, config text | u64 epoch | u64 seed
//! | u8 has_adam [f64 lr, beta1, beta2, epsilon | u64 step]
//! | u32 entry count | entries
//! entry: u32 len, name | u8 rank | u64 extent * rank | u8 scalar tag | payload
//! ```
//!
//! Entry names are prefixed `param/`, `buffer/`, `adam.m/` or `adam.v/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights, Profile, SppBranch};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"DICC";
pub const FORMAT_VERSION: u32 = 1;
const TAG_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: ModelWeights<f32>,
    pub adam: Option<AdamState<f32>>,
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
}

impl Checkpoint {
    /// Fails with [`Error::ParameterMismatch`] naming the first parameter
    /// that `cfg` would shape differently.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        self.weights.check_against(cfg)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// `key=value` lines describing every field.
pub fn config_to_text(c: &ModelConfig) -> String {
    let spp: Vec<String> = c.spp.iter().map(|b| format!("{}:{}", b.window, b.channels)).collect();
    format!(
        "profile={}\nin_channels={}\nfeature_channels={}\nmax_disparity={}\nmatching_channels={}\n\
         spp={}\nfusion_channels={}\ndilations={}\nrefine_channels={}\nrefine_dilations={}\ncontext_only={}\n",
        c.profile.name(),
        c.in_channels,
        c.feature_channels,
        c.max_disparity,
        join(&c.matching_channels),
        spp.join(","),
        c.fusion_channels,
        join(&c.dilations),
        c.refine_channels,
        join(&c.refine_dilations),
        c.context_only,
    )
}

pub fn config_from_text(text: &str) -> Result<ModelConfig> {
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("config line `{line}` is not key=value")))?;
        kv.insert(k.trim(), v.trim());
    }
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| Error::invalid(format!("config is missing `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::invalid(format!("config `{k}` is not an integer")))
    };
    let list = |k: &str| -> Result<Vec<usize>> {
        let v = get(k)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|x| {
                x.trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("config `{k}` has a bad entry `{x}`")))
            })
            .collect()
    };
    let fixed = |k: &str, n: usize| -> Result<Vec<usize>> {
        let v = list(k)?;
        if v.len() != n {
            return Err(Error::invalid(format!(
                "config `{k}` needs {n} entries, got {}",
                v.len()
            )));
        }
        Ok(v)
    };
    let spp = get("spp")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|b| {
            let (w, c) = b
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("bad spp branch `{b}`")))?;
            let p = |s: &str| s.parse().map_err(|_| Error::invalid(format!("bad spp branch `{b}`")));
            Ok(SppBranch {
                window: p(w)?,
                channels: p(c)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = fixed("matching_channels", 4)?;
    let d = fixed("dilations", 3)?;
    let cfg = ModelConfig {
        profile: get("profile")?.parse::<Profile>()?,
        in_channels: num("in_channels")?,
        feature_channels: num("feature_channels")?,
        max_disparity: num("max_disparity")?,
        matching_channels: [m[0], m[1], m[2], m[3]],
        spp,
        fusion_channels: num("fusion_channels")?,
        dilations: [d[0], d[1], d[2]],
        refine_channels: num("refine_channels")?,
        refine_dilations: list("refine_dilations")?,
        context_only: get("context_only")?
            .parse()
            .map_err(|_| Error::invalid("config `context_only` must be true or false"))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

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
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, name: &str, t: &Tensor<f32>) {
        self.bytes(name.as_bytes());
        self.u8(4);
        for e in t.shape().0 {
            self.u64(e as u64);
        }
        self.u8(TAG_F32);
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.bytes(config_to_text(&ck.config).as_bytes());
    w.u64(ck.epoch);
    w.u64(ck.seed);
    fn add<'a>(entries: &mut Vec<(String, &'a Tensor<f32>)>, prefix: &str, map: &'a BTreeMap<String, Tensor<f32>>) {
        entries.extend(map.iter().map(|(k, v)| (format!("{prefix}/{k}"), v)));
    }
    let mut entries = Vec::new();
    add(&mut entries, "param", &ck.weights.params);
    add(&mut entries, "buffer", &ck.weights.buffers);
    match &ck.adam {
        Some(a) => {
            w.u8(1);
            for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.epsilon] {
                w.f64(v);
            }
            w.u64(a.step);
            add(&mut entries, "adam.m", &a.m);
            add(&mut entries, "adam.v", &a.v);
        }
        None => w.u8(0),
    }
    w.u32(entries.len() as u32);
    for (name, t) in &entries {
        w.tensor(name, t);
    }
    w.0
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                reason: format!("file ends while reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.format(format!("{what} is not UTF-8")))
    }
    fn format(&self, reason: String) -> Error {
        Error::format(self.path, reason)
    }
    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.string("entry name")?;
        let rank = self.u8("entry rank")?;
        if rank != 4 {
            return Err(self.format(format!("entry `{name}` has rank {rank}, expected 4")));
        }
        let mut ext = [0usize; 4];
        for e in &mut ext {
            *e = usize::try_from(self.u64("entry extents")?)
                .map_err(|_| self.format(format!("entry `{name}` extent overflows")))?;
        }
        let tag = self.u8("entry scalar tag")?;
        if tag != TAG_F32 {
            return Err(self.format(format!("entry `{name}` has unsupported scalar tag {tag}")));
        }
        let shape = Shape(ext);
        let len = shape
            .0
            .iter()
            .try_fold(4usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| self.format(format!("entry `{name}` is too large")))?;
        let payload = self.take(len, &format!("payload of `{name}`"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Ok((name, Tensor::from_vec(shape, data)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.format("missing DICC magic bytes".into()));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let config_text = r.string("config")?;
    let config = config_from_text(&config_text).map_err(|e| r.format(format!("bad config block: {e}")))?;
    let epoch = r.u64("epoch")?;
    let seed = r.u64("seed")?;
    let mut adam = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let config = AdamConfig {
                lr: r.f64("learning rate")?,
                beta1: r.f64("beta1")?,
                beta2: r.f64("beta2")?,
                epsilon: r.f64("epsilon")?,
            };
            let mut state = AdamState::new(config);
            state.step = r.u64("optimizer step")?;
            Some(state)
        }
        f => return Err(r.format(format!("bad optimizer flag {f}"))),
    };
    let count = r.u32("entry count")?;
    let mut weights = ModelWeights {
        params: BTreeMap::new(),
        buffers: BTreeMap::new(),
    };
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        let (prefix, key) = name
            .split_once('/')
            .ok_or_else(|| r.format(format!("entry `{name}` has no section prefix")))?;
        let target = match (prefix, adam.as_mut()) {
            ("param", _) => &mut weights.params,
            ("buffer", _) => &mut weights.buffers,
            ("adam.m", Some(a)) => &mut a.m,
            ("adam.v", Some(a)) => &mut a.v,
            _ => return Err(r.format(format!("unexpected entry `{name}`"))),
        };
        if target.insert(key.to_string(), t).is_some() {
            return Err(r.format(format!("duplicate entry `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    weights.check_against(&config)?;
    Ok(Checkpoint {
        config,
        weights,
        adam,
        epoch,
        seed,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Sibling path used for the best-validation checkpoint: `run.ckpt` ->
/// `run.best.ckpt`.
pub fn best_checkpoint_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.best.{}", ext.to_string_lossy()),
        None => format!("{stem}.best"),
    };
    path.with_file_name(name)
}
