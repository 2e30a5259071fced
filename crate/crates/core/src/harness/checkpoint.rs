//! Binary checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "PROMOECK"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      8     header length H, u64 little-endian
//! 20      H     UTF-8 JSON header
//! 20+H    ...   tensor payload, little-endian, in header order
//! ```
//!
//! The header holds `step`, the echoed `config` (without `output_dir`), optional k-means counts,
//! and a `tensors` table of `{name, dtype, shape, offset, nbytes}` with
//! offsets relative to the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{MiniDiT, RouterState};
use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::router::KMeansState;
use crate::tensor::{DType, Real, Tensor};

use super::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"PROMOECK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    step: usize,
    config: RunConfig,
    #[serde(default)]
    kmeans_counts: Vec<Option<Vec<usize>>>,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus the run metadata needed to rebuild a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub step: usize,
    pub config: RunConfig,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub kmeans_counts: Vec<Option<Vec<usize>>>,
}

const MODEL: &str = "model";
const EMA: &str = "ema";
const KMEANS: &str = "router.kmeans";

fn push_tree<T: Real, M: ParamTree<Tensor<T>>>(out: &mut Vec<(String, Tensor<T>)>, prefix: &str, tree: &M) {
    tree.visit(prefix, &mut |name, t| out.push((name.to_string(), t.clone())));
}

impl<T: Real> Checkpoint<T> {
    pub fn from_run(
        step: usize,
        config: &RunConfig,
        model: &MiniDiT<Tensor<T>>,
        ema: &MiniDiT<Tensor<T>>,
        router: &RouterState<T>,
    ) -> Self {
        let mut tensors = Vec::new();
        push_tree(&mut tensors, MODEL, model);
        push_tree(&mut tensors, EMA, ema);
        for (l, km) in router.kmeans.iter().enumerate() {
            if let Some(km) = km {
                tensors.push((format!("{KMEANS}.{l}.centroids"), km.centroids.clone()));
            }
        }
        Self {
            step,
            // the output location is not part of the run's identity
            config: RunConfig {
                output_dir: None,
                ..config.clone()
            },
            tensors,
            kmeans_counts: router.kmeans.iter().map(|k| k.as_ref().map(|k| k.counts.clone())).collect(),
        }
    }

    fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every tensor under `prefix` into `tree`, checking names and shapes.
    fn restore<M: ParamTree<Tensor<T>>>(&self, prefix: &str, tree: &mut M) -> Result<()> {
        let mut err = None;
        tree.visit_mut(prefix, &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.get(name) {
                Some(src) if src.shape() == t.shape() => *t = src.clone(),
                Some(src) => {
                    err = Some(format!("`{name}` has shape {:?}, model expects {:?}", src.shape(), t.shape()))
                }
                None => err = Some(format!("missing tensor `{name}`")),
            }
        });
        err.map_or(Ok(()), |e| Err(Error::Checkpoint(e)))
    }

    /// Rebuilds `(model, ema, router state)` using the echoed config.
    pub fn into_run(&self) -> Result<(MiniDiT<Tensor<T>>, MiniDiT<Tensor<T>>, RouterState<T>)> {
        let mut model = MiniDiT::init(&self.config.model, self.config.seed)?;
        self.restore(MODEL, &mut model)?;
        let mut ema = model.clone();
        self.restore(EMA, &mut ema)?;
        let depth = self.config.model.depth;
        let mut router = RouterState::new(depth);
        for l in 0..depth {
            if let Some(c) = self.get(&format!("{KMEANS}.{l}.centroids")) {
                let counts = self
                    .kmeans_counts
                    .get(l)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| vec![0; c.shape()[0]]);
                router.kmeans[l] = Some(KMeansState {
                    centroids: c.clone(),
                    counts,
                });
            }
        }
        Ok((model, ema, router))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len();
            for &v in t.data() {
                v.write_le(&mut payload);
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() - offset,
            });
        }
        let header = Header {
            step: self.step,
            config: self.config.clone(),
            kmeans_counts: self.kmeans_counts.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let payload = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "`{}` is {:?}, expected {:?}",
                    e.name,
                    e.dtype,
                    T::DTYPE
                )));
            }
            let n: usize = e.shape.iter().product();
            let w = e.dtype.size();
            let raw = payload
                .get(e.offset..e.offset + e.nbytes)
                .filter(|r| r.len() == n * w)
                .ok_or_else(|| Error::Checkpoint(format!("payload for `{}` is truncated or mis-sized", e.name)))?;
            let data = raw.chunks_exact(w).map(T::read_le).collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        Ok(Self {
            step: header.step,
            config: header.config,
            tensors,
            kmeans_counts: header.kmeans_counts,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::LayerKind;
    use crate::moe::ProMoeLayerConfig;
    use crate::rng::{normal_tensor, stream, Purpose};

    fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.depth = 2;
        c.model.hidden = 16;
        c.model.layer = LayerKind::Promoe(ProMoeLayerConfig {
            n_experts: 3,
            ..Default::default()
        });
        c
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = small_config();
        let model = MiniDiT::<Tensor<f32>>::init(&cfg.model, 4).unwrap();
        let mut ema = model.clone();
        ema.head_w = normal_tensor(&mut stream(4, Purpose::Test, 0), ema.head_w.shape(), 1.0);
        let mut router = RouterState::new(2);
        router.kmeans[1] = Some(KMeansState {
            centroids: normal_tensor(&mut stream(4, Purpose::Test, 1), &[3, 16], 1.0),
            counts: vec![1, 2, 3],
        });
        let ck = Checkpoint::from_run(17, &cfg, &model, &ema, &router);
        let back = Checkpoint::<f32>::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        let mut cfg_seeded = cfg.clone();
        cfg_seeded.seed = 99;
        let ck2 = Checkpoint { config: cfg_seeded, ..ck };
        let (m, e, r) = ck2.into_run().unwrap();
        assert_eq!(m, model);
        assert_eq!(e, ema);
        assert_eq!(r, router);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = small_config();
        let model = MiniDiT::<Tensor<f32>>::init(&cfg.model, 4).unwrap();
        let ck = Checkpoint::from_run(0, &cfg, &model, &model, &RouterState::new(2));
        let mut bytes = ck.encode();
        assert!(Checkpoint::<f64>::decode(&bytes).is_err());
        bytes[8] = 2;
        assert!(matches!(Checkpoint::<f32>::decode(&bytes), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(Checkpoint::<f32>::decode(b"garbage").is_err());
        let good = ck.encode();
        assert!(Checkpoint::<f32>::decode(&good[..good.len() - 4]).is_err());

        let mut other = cfg.clone();
        other.model.hidden = 32;
        let mismatched = Checkpoint { config: other, ..ck };
        assert!(matches!(mismatched.into_run(), Err(Error::Checkpoint(_))));
    }
}
