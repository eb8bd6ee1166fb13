//! Matcher parameters: an ordered registry of named tensors, Kaiming-style
//! seeded initialization, tape binding and the binary weights file.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::config::{EdgeType, MatcherConfig};
use crate::autodiff::{NodeId, Tape, Tensor};

const MAGIC: &[u8; 4] = b"PKE2";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// All learnable parameters of the matcher, in declaration order.
#[derive(Clone, Debug)]
pub struct MatcherWeights {
    pub config: MatcherConfig,
    params: Vec<Param>,
}

#[derive(Debug, Error)]
pub enum WeightsIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic or truncated weights file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("weights file config mismatch: {0}")]
    ConfigMismatch(String),
}

impl MatcherWeights {
    /// Seeded initialization: uniform Kaiming-style fan-in scaling for weight
    /// matrices, zero biases, unit norm scales, dustbin score 1.
    pub fn init(config: &MatcherConfig, seed: u64) -> Self {
        config.validate().expect("invalid matcher config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let d = config.descriptor_dim;

        let linear = |params: &mut Vec<Param>, name: String, out_w: usize, in_w: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / in_w as f64).sqrt();
            let data = (0..out_w * in_w)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(Param {
                name: format!("{name}.w"),
                tensor: Tensor::matrix(out_w, in_w, data),
            });
            params.push(Param {
                name: format!("{name}.b"),
                tensor: Tensor::zeros(vec![out_w]),
            });
        };
        let norm = |params: &mut Vec<Param>, name: String, width: usize| {
            params.push(Param {
                name: format!("{name}.gamma"),
                tensor: Tensor::filled(vec![width], 1.0),
            });
            params.push(Param {
                name: format!("{name}.beta"),
                tensor: Tensor::zeros(vec![width]),
            });
        };

        // Keypoint encoder: [x ‖ c] (3) lifted through 32-64-128-256-D.
        let widths = config.encoder_widths();
        let mut in_w = 3;
        for (i, &out_w) in widths.iter().enumerate() {
            linear(&mut params, format!("encoder.{i}"), out_w, in_w, &mut rng);
            if i + 1 < widths.len() {
                norm(&mut params, format!("encoder.{i}"), out_w);
            }
            in_w = out_w;
        }

        // Attention layers: query/key/value projections plus the update MLP.
        for l in 0..config.schedule.len() {
            linear(&mut params, format!("gnn.{l}.q"), d, d, &mut rng);
            linear(&mut params, format!("gnn.{l}.k"), d, d, &mut rng);
            linear(&mut params, format!("gnn.{l}.v"), d, d, &mut rng);
            linear(&mut params, format!("gnn.{l}.update.0"), 2 * d, 2 * d, &mut rng);
            norm(&mut params, format!("gnn.{l}.update.0"), 2 * d);
            linear(&mut params, format!("gnn.{l}.update.1"), d, 2 * d, &mut rng);
        }

        linear(&mut params, "final".into(), d, d, &mut rng);
        params.push(Param {
            name: "dustbin".into(),
            tensor: Tensor::scalar(1.0),
        });

        // Confidence head.
        linear(&mut params, "conf3.0".into(), 2 * d, 2 * d, &mut rng);
        norm(&mut params, "conf3.0".into(), 2 * d);
        linear(&mut params, "conf3.1".into(), d, 2 * d, &mut rng);
        norm(&mut params, "conf3.1".into(), d);
        linear(&mut params, "conf2.0".into(), d, 1, &mut rng);
        norm(&mut params, "conf2.0".into(), d);
        linear(&mut params, "conf2.1".into(), d, d, &mut rng);
        norm(&mut params, "conf2.1".into(), d);
        linear(&mut params, "conf1".into(), 1, d, &mut rng);

        MatcherWeights {
            config: config.clone(),
            params,
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Inserts every parameter into the tape; `trainable` decides whether the
    /// nodes require gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundWeights {
        let mut ids = BTreeMap::new();
        let mut order = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let id = if trainable {
                tape.var(p.tensor.clone())
            } else {
                tape.constant(p.tensor.clone())
            };
            ids.insert(p.name.clone(), id);
            order.push(id);
        }
        BoundWeights { ids, order }
    }

    pub fn save(&self, path: &Path) -> Result<(), WeightsIoError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.config.descriptor_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.heads as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.sinkhorn_iterations as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.schedule.len() as u32).to_le_bytes());
        for e in &self.config.schedule {
            buf.push(match e {
                EdgeType::SelfEdges => 0,
                EdgeType::CrossEdges => 1,
            });
        }
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&(p.tensor.numel() as u64).to_le_bytes());
            for &x in p.tensor.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Loads a weights file. When `expected` is given, its architecture must
    /// match the file header exactly.
    pub fn load(path: &Path, expected: Option<&MatcherConfig>) -> Result<Self, WeightsIoError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], WeightsIoError> {
            if *pos + n > bytes.len() {
                return Err(WeightsIoError::BadMagic);
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(WeightsIoError::BadMagic);
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let version = u32_at(take(&mut pos, 4)?);
        if version != FORMAT_VERSION {
            return Err(WeightsIoError::BadVersion(version));
        }
        let d = u32_at(take(&mut pos, 4)?) as usize;
        let heads = u32_at(take(&mut pos, 4)?) as usize;
        let sinkhorn = u32_at(take(&mut pos, 4)?) as usize;
        let sched_len = u32_at(take(&mut pos, 4)?) as usize;
        let mut schedule = Vec::with_capacity(sched_len);
        for &b in take(&mut pos, sched_len)? {
            schedule.push(match b {
                0 => EdgeType::SelfEdges,
                1 => EdgeType::CrossEdges,
                other => {
                    return Err(WeightsIoError::ConfigMismatch(format!(
                        "unknown edge tag {other}"
                    )))
                }
            });
        }
        let config = MatcherConfig {
            descriptor_dim: d,
            heads,
            schedule,
            sinkhorn_iterations: sinkhorn,
        };
        if let Some(exp) = expected {
            if *exp != config {
                return Err(WeightsIoError::ConfigMismatch(format!(
                    "expected D={}, heads={}, {} layers; file has D={}, heads={}, {} layers",
                    exp.descriptor_dim,
                    exp.heads,
                    exp.schedule.len(),
                    config.descriptor_dim,
                    config.heads,
                    config.schedule.len()
                )));
            }
        }
        // Parameter layout is derived from the config; only sizes are stored.
        let mut out = MatcherWeights::init(&config, 0);
        let count = u32_at(take(&mut pos, 4)?) as usize;
        if count != out.params.len() {
            return Err(WeightsIoError::ConfigMismatch(format!(
                "expected {} parameter blocks, file has {count}",
                out.params.len()
            )));
        }
        for p in &mut out.params {
            let n = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            if n != p.tensor.numel() {
                return Err(WeightsIoError::ConfigMismatch(format!(
                    "parameter {} expects {} values, file has {n}",
                    p.name,
                    p.tensor.numel()
                )));
            }
            for i in 0..n {
                let x = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
                p.tensor.data_mut()[i] = x;
            }
        }
        if pos != bytes.len() {
            return Err(WeightsIoError::ConfigMismatch(
                "trailing bytes after parameter blocks".into(),
            ));
        }
        Ok(out)
    }
}

/// Tape handles for every bound parameter.
pub struct BoundWeights {
    ids: BTreeMap<String, NodeId>,
    order: Vec<NodeId>,
}

impl BoundWeights {
    pub fn get(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Node ids in declaration order, parallel to `MatcherWeights::params`.
    pub fn ordered(&self) -> &[NodeId] {
        &self.order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialization_roundtrip_is_bitwise() {
        let cfg = MatcherConfig::toy();
        let w = MatcherWeights::init(&cfg, 42);
        let dir = std::env::temp_dir().join("pke2_weights_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w.pke2");
        w.save(&path).unwrap();
        let back = MatcherWeights::load(&path, Some(&cfg)).unwrap();
        assert_eq!(w.params.len(), back.params.len());
        for (a, b) in w.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            let bits_a: Vec<u64> = a.tensor.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = b.tensor.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "parameter {}", a.name);
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn loader_rejects_mismatched_config() {
        let cfg = MatcherConfig::toy();
        let w = MatcherWeights::init(&cfg, 1);
        let dir = std::env::temp_dir().join("pke2_weights_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w.pke2");
        w.save(&path).unwrap();
        let other = MatcherConfig::micro();
        assert!(matches!(
            MatcherWeights::load(&path, Some(&other)),
            Err(WeightsIoError::ConfigMismatch(_))
        ));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn same_seed_same_init() {
        let cfg = MatcherConfig::toy();
        let a = MatcherWeights::init(&cfg, 7);
        let b = MatcherWeights::init(&cfg, 7);
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.tensor.data(), pb.tensor.data());
        }
    }
}
