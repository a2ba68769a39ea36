//! Low-rank adapters: construction, scaled deltas, and merging.
//!
//! An adapter on a projection `W: [d_in × d_out]` holds `B: [d_in × r]` and
//! `A: [r × d_out]`. Its contribution for row-vector inputs `x` is
//! `(alpha / r) · ((x · B) · A)`, and merging adds `(alpha / r) · B · A` to
//! `W`. `B` starts at zero, so a fresh adapter is an exact no-op.

mod hooks;
mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneWeights, Site};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub use hooks::{LoraHooks, LoraVars};
pub use io::{adapters_from_pack, adapters_to_pack, load_adapters, save_adapters, AdapterRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub b: Tensor,
    pub a: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub target: Site,
}

/// Audit record for one merge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReceipt {
    pub target: String,
    pub pre_checksum: String,
    pub post_checksum: String,
    pub scale: f64,
}

impl LoraAdapter {
    /// `A ~ U(-1/sqrt(r), 1/sqrt(r))`, `B = 0`.
    pub fn init(d_in: usize, d_out: usize, rank: usize, alpha: f64, target: Site, seed: u64) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Contract(format!(
                "LoRA rank {rank} must be in 1..={} for a {d_in}x{d_out} projection",
                d_in.min(d_out)
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Contract(format!("LoRA alpha must be positive, got {alpha}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (rank as f64).sqrt();
        Ok(LoraAdapter {
            b: Tensor::zeros(&[d_in, rank]),
            a: Tensor::uniform(&[rank, d_out], bound, &mut rng),
            rank,
            alpha,
            dropout: 0.0,
            target,
        })
    }

    pub fn with_dropout(mut self, p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout must lie in [0, 1), got {p}")));
        }
        self.dropout = p;
        Ok(self)
    }

    pub fn d_in(&self) -> usize {
        self.b.rows()
    }

    pub fn d_out(&self) -> usize {
        self.a.cols()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn is_zero(&self) -> bool {
        self.b.data().iter().all(|v| *v == 0.0) || self.a.data().iter().all(|v| *v == 0.0)
    }

    /// `(alpha / r) · B · A`, the dense update this adapter represents.
    pub fn delta_weight(&self) -> Tensor {
        self.b
            .matmul(&self.a)
            .expect("adapter factors agree")
            .scale(self.scale())
    }

    /// Evaluation-mode delta for a batch of rows.
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = self.register(&mut tape, false);
        let out = vars.apply(&mut tape, xv, None)?;
        Ok(tape.value(out).clone())
    }

    /// Training-mode delta: inverted dropout on `x` when `dropout > 0`.
    pub fn delta_train(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = self.register(&mut tape, false);
        let out = vars.apply(&mut tape, xv, Some(rng))?;
        Ok(tape.value(out).clone())
    }

    /// Puts `B` and `A` on the tape, as trainable parameters or as constants.
    pub fn register<'t>(&'t self, tape: &mut Tape<'t>, trainable: bool) -> LoraVars {
        let (b, a) = if trainable {
            (tape.param(&self.b), tape.param(&self.a))
        } else {
            (tape.constant(&self.b), tape.constant(&self.a))
        };
        LoraVars {
            b,
            a,
            scale: self.scale(),
            dropout: self.dropout,
        }
    }

    pub fn negated(&self) -> Self {
        LoraAdapter {
            b: self.b.scale(-1.0),
            ..self.clone()
        }
    }

    fn check_base(&self, op: &'static str, base: &Tensor) -> Result<()> {
        if base.shape() != [self.d_in(), self.d_out()] {
            return Err(Error::shape(op, base.shape(), &[self.d_in(), self.d_out()]));
        }
        Ok(())
    }
}

/// Records `(alpha / r) · ((x · B) · A)`; `dropout_rng` switches on training
/// mode.
pub(crate) fn lora_delta_on_tape(
    tape: &mut Tape<'_>,
    x: Var,
    b: Var,
    a: Var,
    scale: f64,
    dropout: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let x = match dropout_rng {
        Some(rng) if dropout > 0.0 => {
            let shape = tape.shape(x).to_vec();
            let keep = 1.0 - dropout;
            let n = shape.iter().product();
            let mask: Vec<f64> = (0..n)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = tape.leaf(Tensor::new(shape, mask)?, false);
            tape.mul(x, mask)?
        }
        _ => x,
    };
    let xb = tape.matmul(x, b)?;
    let xba = tape.matmul(xb, a)?;
    Ok(tape.scale(xba, scale))
}

/// `base + (alpha / r) · B · A` as a new matrix.
pub fn merge(base: &Tensor, adapter: &LoraAdapter) -> Result<(Tensor, MergeReceipt)> {
    adapter.check_base("merge", base)?;
    let merged = base.add(&adapter.delta_weight())?;
    let receipt = MergeReceipt {
        target: adapter.target.to_string(),
        pre_checksum: base.checksum(),
        post_checksum: merged.checksum(),
        scale: adapter.scale(),
    };
    Ok((merged, receipt))
}

/// `base + Σ wᵢ · (alphaᵢ / rᵢ) · Bᵢ · Aᵢ`.
pub fn weighted_merge(base: &Tensor, adapters: &[(f64, &LoraAdapter)]) -> Result<Tensor> {
    let mut out = base.clone();
    for (w, adapter) in adapters {
        adapter.check_base("weighted_merge", base)?;
        if !w.is_finite() {
            return Err(Error::Numeric {
                op: "weighted_merge",
                detail: format!("non-finite weight {w}"),
            });
        }
        let d = adapter.delta_weight();
        for (o, v) in out.data_mut().iter_mut().zip(d.data()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Merges each adapter into the backbone projection it targets.
pub fn merge_into(weights: &mut BackboneWeights, adapters: &[LoraAdapter]) -> Result<Vec<MergeReceipt>> {
    let mut receipts = Vec::with_capacity(adapters.len());
    for adapter in adapters {
        let w = weights.projection_mut(adapter.target)?;
        let (merged, receipt) = merge(w, adapter)?;
        *w = merged;
        receipts.push(receipt);
    }
    Ok(receipts)
}
