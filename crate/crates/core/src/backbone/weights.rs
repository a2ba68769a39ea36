use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Projection, Site};
use crate::error::{Error, Result};
use crate::numerics::{checksum_all, Tensor};
use crate::store::{PackEntry, TensorPack};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl LayerWeights {
    pub fn projection(&self, p: Projection) -> &Tensor {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
            Projection::O => &self.wo,
            Projection::Gate => &self.w_gate,
            Projection::Up => &self.w_up,
            Projection::Down => &self.w_down,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Tensor {
        match p {
            Projection::Q => &mut self.wq,
            Projection::K => &mut self.wk,
            Projection::V => &mut self.wv,
            Projection::O => &mut self.wo,
            Projection::Gate => &mut self.w_gate,
            Projection::Up => &mut self.w_up,
            Projection::Down => &mut self.w_down,
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ffn_norm", &self.ffn_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }
}

/// All backbone matrices. Activations are row vectors, so every projection is
/// stored as `[d_in × d_out]` and applied as `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

impl BackboneWeights {
    /// Random initialization, deterministic in `config.seed`.
    ///
    /// The output head is scaled so the untrained model is close to uniform
    /// over the vocabulary.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let proj_std = 1.0 / (d as f64).sqrt();
        let resid_std = proj_std / (2.0 * config.n_layers as f64).sqrt();
        let token_embedding = Tensor::randn(&[v, d], 1.0, &mut rng);
        let position_embedding = Tensor::randn(&[config.max_seq_len, d], 0.5, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::full(&[d], 1.0),
                wq: Tensor::randn(&[d, d], proj_std, &mut rng),
                wk: Tensor::randn(&[d, d], proj_std, &mut rng),
                wv: Tensor::randn(&[d, d], proj_std, &mut rng),
                wo: Tensor::randn(&[d, d], resid_std, &mut rng),
                ffn_norm: Tensor::full(&[d], 1.0),
                w_gate: Tensor::randn(&[d, f], proj_std, &mut rng),
                w_up: Tensor::randn(&[d, f], proj_std, &mut rng),
                w_down: Tensor::randn(&[f, d], resid_std * (d as f64 / f as f64).sqrt(), &mut rng),
            })
            .collect();
        let lm_head = Tensor::randn(&[d, v], HEAD_STD / (d as f64).sqrt(), &mut rng);
        Ok(BackboneWeights {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
            final_norm: Tensor::full(&[d], 1.0),
            lm_head,
        })
    }

    pub fn projection(&self, site: Site) -> Result<&Tensor> {
        self.layers
            .get(site.layer)
            .map(|l| l.projection(site.proj))
            .ok_or_else(|| Error::Index {
                op: "projection",
                index: site.layer,
                size: self.layers.len(),
            })
    }

    pub fn projection_mut(&mut self, site: Site) -> Result<&mut Tensor> {
        let n = self.layers.len();
        self.layers
            .get_mut(site.layer)
            .map(|l| l.projection_mut(site.proj))
            .ok_or(Error::Index {
                op: "projection",
                index: site.layer,
                size: n,
            })
    }

    /// Every tensor with its checkpoint key, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn checksum(&self) -> String {
        checksum_all(self.named_tensors().into_iter().map(|(_, t)| t))
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn to_pack(&self, stage: &str) -> TensorPack {
        let mut pack = TensorPack::new();
        let c = &self.config;
        for (name, t) in self.named_tensors() {
            let mut e = PackEntry::new(name, t.clone()).with("stage", stage);
            if e.name == "token_embedding" {
                e = e
                    .with("vocab_size", c.vocab_size)
                    .with("d_model", c.d_model)
                    .with("n_layers", c.n_layers)
                    .with("n_heads", c.n_heads)
                    .with("d_ff", c.d_ff)
                    .with("max_seq_len", c.max_seq_len)
                    .with("seed", c.seed);
            }
            pack.push(e);
        }
        pack
    }

    pub fn from_pack(pack: &TensorPack) -> Result<Self> {
        let head = pack.get("token_embedding")?;
        let config = ModelConfig {
            vocab_size: head.attr_parse("vocab_size")?,
            d_model: head.attr_parse("d_model")?,
            n_layers: head.attr_parse("n_layers")?,
            n_heads: head.attr_parse("n_heads")?,
            d_ff: head.attr_parse("d_ff")?,
            max_seq_len: head.attr_parse("max_seq_len")?,
            seed: head.attr_parse("seed")?,
        };
        config
            .validate()
            .map_err(|e| Error::format("token_embedding", e.to_string()))?;
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let get = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = pack.tensor(name)?;
            if t.shape() != shape {
                return Err(Error::format(
                    name,
                    format!("shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            Ok(t)
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let k = |n: &str| format!("layers.{i}.{n}");
            layers.push(LayerWeights {
                attn_norm: get(&k("attn_norm"), &[d])?,
                wq: get(&k("wq"), &[d, d])?,
                wk: get(&k("wk"), &[d, d])?,
                wv: get(&k("wv"), &[d, d])?,
                wo: get(&k("wo"), &[d, d])?,
                ffn_norm: get(&k("ffn_norm"), &[d])?,
                w_gate: get(&k("w_gate"), &[d, f])?,
                w_up: get(&k("w_up"), &[d, f])?,
                w_down: get(&k("w_down"), &[f, d])?,
            });
        }
        Ok(BackboneWeights {
            token_embedding: get("token_embedding", &[v, d])?,
            position_embedding: get("position_embedding", &[config.max_seq_len, d])?,
            layers,
            final_norm: get("final_norm", &[d])?,
            lm_head: get("lm_head", &[d, v])?,
            config,
        })
    }

    pub fn save(&self, base: &Path, stage: &str) -> Result<()> {
        self.to_pack(stage).save(base)
    }

    pub fn load(base: &Path) -> Result<Self> {
        BackboneWeights::from_pack(&TensorPack::load(base)?)
    }
}

/// Output-head scale relative to `1/sqrt(d_model)`.
const HEAD_STD: f64 = 1.0;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [ModelConfig::default(), ModelConfig::toy(3)] {
            let w = BackboneWeights::init(&cfg).unwrap();
            assert_eq!(w.parameter_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn pack_round_trip() {
        let w = BackboneWeights::init(&ModelConfig::toy(1)).unwrap();
        let back = BackboneWeights::from_pack(&w.to_pack("base")).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.checksum(), w.checksum());
    }

    #[test]
    fn init_is_seeded() {
        let a = BackboneWeights::init(&ModelConfig::toy(1)).unwrap();
        let b = BackboneWeights::init(&ModelConfig::toy(1)).unwrap();
        let c = BackboneWeights::init(&ModelConfig::toy(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.checksum(), c.checksum());
    }
}
