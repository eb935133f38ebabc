//! Named-tensor container ("LTW1") plus the per-variant parameter manifest.
//!
//! Layout, all integers little-endian, no padding:
//!
//! ```text
//! "LTW1" | u32 count | count × ( u32 name_len | name (UTF-8)
//!                               | u32 ndim | ndim × u32 extent
//!                               | prod(extent) × f32 )
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::{
    Variant, BACKBONE_WIDTHS, CORR_SIDE, MLP_RATIO, NUM_LEVELS, TRANSFORMER_LAYERS,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{RngSeed, SeededRng};

pub const MAGIC: &[u8; 4] = b"LTW1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightsContainer {
    entries: BTreeMap<String, Tensor>,
}

impl WeightsContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Insert or overwrite.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.param_count() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let count = r.u32()? as usize;
        let mut out = Self::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Malformed(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim == 0 {
                return Err(Error::Malformed(format!("`{name}` has rank 0")));
            }
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Malformed(format!("`{name}` extent product overflows")))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::Malformed(format!("`{name}`: {e}")))?;
            out.insert(name, tensor)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after {count} entries",
                bytes.len() - r.pos
            )));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Load and check every manifest entry of `variant` is present with the
    /// right shape.
    pub fn load_for_variant(path: impl AsRef<Path>, variant: Variant) -> Result<Self> {
        let w = Self::load(path)?;
        w.validate(&Manifest::for_variant(variant))?;
        Ok(w)
    }

    pub fn validate(&self, manifest: &Manifest) -> Result<()> {
        for spec in &manifest.entries {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::WeightShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Required parameter names and shapes of one model variant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub variant: Variant,
    pub entries: Vec<ParamSpec>,
}

impl Manifest {
    pub fn for_variant(variant: Variant) -> Self {
        let mut m = Self {
            variant,
            entries: Vec::new(),
        };

        let mut cin = 3;
        for (b, &cout) in BACKBONE_WIDTHS.iter().enumerate() {
            m.push(format!("backbone.block{b}.conv.weight"), vec![3, 3, cin, cout], Init::FanIn(9 * cin));
            cin = cout;
        }

        m.push("init.fuse.weight", vec![3, 3, NUM_LEVELS, 1], Init::FanIn(9 * NUM_LEVELS));
        m.push("init.fuse.bias", vec![1], Init::Zeros);
        m.push("init.occ.weight", vec![2 * NUM_LEVELS, 1], Init::FanIn(2 * NUM_LEVELS));
        m.push("init.occ.bias", vec![1], Init::Zeros);

        for level in 0..NUM_LEVELS {
            for branch in ["fwd", "bwd"] {
                let prefix = format!("encoder.level{level}.{branch}");
                let mut cin = CORR_SIDE * CORR_SIDE;
                for (b, blk) in variant.encoder_blocks().iter().enumerate() {
                    let k = blk.kernel;
                    m.push(
                        format!("{prefix}.block{b}.conv.weight"),
                        vec![k, k, cin, blk.channels],
                        Init::FanIn(k * k * cin),
                    );
                    m.push(format!("{prefix}.block{b}.conv.bias"), vec![blk.channels], Init::Zeros);
                    m.push(format!("{prefix}.block{b}.norm.gamma"), vec![blk.channels], Init::Ones);
                    m.push(format!("{prefix}.block{b}.norm.beta"), vec![blk.channels], Init::Zeros);
                    cin = blk.channels;
                }
            }
        }

        let h = variant.hidden();
        let din = crate::refiner::token_width(variant);
        m.push("refiner.input.weight", vec![din, h], Init::FanIn(din));
        m.push("refiner.input.bias", vec![h], Init::Zeros);
        for l in 0..TRANSFORMER_LAYERS {
            let p = format!("refiner.block{l}");
            m.push(format!("{p}.norm1.gamma"), vec![h], Init::Ones);
            m.push(format!("{p}.norm1.beta"), vec![h], Init::Zeros);
            for proj in ["q", "k", "v", "o"] {
                m.push(format!("{p}.attn.w{proj}"), vec![h, h], Init::FanIn(h));
                m.push(format!("{p}.attn.b{proj}"), vec![h], Init::Zeros);
            }
            m.push(format!("{p}.norm2.gamma"), vec![h], Init::Ones);
            m.push(format!("{p}.norm2.beta"), vec![h], Init::Zeros);
            m.push(format!("{p}.mlp.fc1.weight"), vec![h, MLP_RATIO * h], Init::FanIn(h));
            m.push(format!("{p}.mlp.fc1.bias"), vec![MLP_RATIO * h], Init::Zeros);
            m.push(format!("{p}.mlp.fc2.weight"), vec![MLP_RATIO * h, h], Init::FanIn(MLP_RATIO * h));
            m.push(format!("{p}.mlp.fc2.bias"), vec![h], Init::Zeros);
        }
        m.push("refiner.norm_out.gamma", vec![h], Init::Ones);
        m.push("refiner.norm_out.beta", vec![h], Init::Zeros);
        // Zero head: an untrained refiner leaves the Stage I track untouched.
        m.push("refiner.head.weight", vec![h, 3], Init::Zeros);
        m.push("refiner.head.bias", vec![3], Init::Zeros);
        m
    }

    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) {
        self.entries.push(ParamSpec {
            name: name.into(),
            shape,
            init,
        });
    }

    /// Total scalar count of entries whose name starts with `prefix`.
    pub fn param_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }
}

/// Full parameter set for `variant`, seeded and reproducible. Each tensor
/// draws from its own stream keyed by name.
pub fn init_weights(variant: Variant, seed: RngSeed) -> WeightsContainer {
    let manifest = Manifest::for_variant(variant);
    let mut w = WeightsContainer::new();
    for spec in &manifest.entries {
        let n: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                SeededRng::derive(seed, &spec.name).uniform_vec(n, -bound, bound)
            }
        };
        let t = Tensor::new(spec.shape.clone(), data).expect("manifest shapes are valid");
        w.insert(spec.name.clone(), t).expect("manifest names are unique");
    }
    w
}

/// Replace the Stage I fusion conv by one that passes the level-0
/// correlation channel straight through.
pub fn set_identity_fusion(w: &mut WeightsContainer) {
    let mut k = Tensor::zeros(&[3, 3, NUM_LEVELS, 1]);
    k.set(&[1, 1, 0, 0], 1.0);
    w.set("init.fuse.weight", k);
    w.set("init.fuse.bias", Tensor::zeros(&[1]));
}
