//! Adaptive feature fusion of the four modality maps per stage, and the
//! shared bottleneck stage producing the task seeds.

use super::encoder::Stage;
use super::layers::Conv;
use super::ModelConfig;
use crate::domain::Region;
use crate::error::Result;
use crate::tensor::{Activation, ParamStore, Pool, Tape, Var};
use crate::{Rng, Scalar};

/// Window of the element-wise enhancement pooling.
pub const ENHANCE_WINDOW: usize = 3;

/// Squeeze-and-excitation bottleneck over the concatenated channels.
#[derive(Clone, Debug)]
pub struct Squeeze {
    pub reduce: Conv,
    pub restore: Conv,
}

#[derive(Clone, Debug)]
pub struct Aff {
    /// Absent in the fusion ablation.
    pub se: Option<Squeeze>,
    pub fuse: Conv,
    pub enhance: bool,
}

/// Fusion result plus the attention weights that produced it.
#[derive(Clone, Debug)]
pub struct AffOut {
    pub fused: Var,
    /// Channel weights `θ`, `4C×1×1`.
    pub channel_weights: Option<Var>,
    /// Element weights of the enhancement step, `C×H×W`.
    pub element_weights: Option<Var>,
}

impl Aff {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, stage: usize, rng: &mut Rng) -> Self {
        let c = cfg.stages[stage].dim;
        let name = format!("aff{}", stage + 1);
        let se = cfg.aff.then(|| {
            let mid = 4 * c / cfg.reduction;
            Squeeze {
                reduce: Conv::same(store, &format!("{name}.se1"), 4 * c, mid, 1, rng),
                restore: Conv::same(store, &format!("{name}.se2"), mid, 4 * c, 1, rng),
            }
        });
        let fuse = Conv::same(store, &format!("{name}.fuse"), 4 * c, c, 1, rng);
        Self { se, fuse, enhance: cfg.aff }
    }

    /// Channel concatenation of the maps in modality order, then SE recalibration.
    pub fn recalibrate<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, maps: [Var; 4]) -> Result<(Var, Option<Var>)> {
        let phi = tape.concat(&maps, 0)?;
        let Some(se) = &self.se else { return Ok((phi, None)) };
        let g = tape.avg_pool(phi, Pool::Global)?;
        let z = se.reduce.forward(tape, store, g)?;
        let z = tape.activation(z, Activation::LeakyRelu);
        let z = se.restore.forward(tape, store, z)?;
        let theta = tape.sigmoid(z);
        Ok((tape.mul(phi, theta)?, Some(theta)))
    }

    /// `F = φ ⊗ sigmoid(avgpool₃ₓ₃(φ))`.
    pub fn element_enhance<T: Scalar>(tape: &mut Tape<T>, phi: Var) -> Result<(Var, Var)> {
        let p = tape.avg_pool(phi, Pool::Local(ENHANCE_WINDOW))?;
        let w = tape.sigmoid(p);
        Ok((tape.mul(phi, w)?, w))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, maps: [Var; 4]) -> Result<AffOut> {
        let (v, channel_weights) = self.recalibrate(tape, store, maps)?;
        let phi = self.fuse.forward(tape, store, v)?;
        if !self.enhance {
            return Ok(AffOut { fused: phi, channel_weights, element_weights: None });
        }
        let (fused, w) = Self::element_enhance(tape, phi)?;
        Ok(AffOut { fused, channel_weights, element_weights: Some(w) })
    }
}

/// Single-branch fourth stage over the fused stage-3 map, plus one 1×1
/// projection per task.
#[derive(Clone, Debug)]
pub struct Stage4 {
    pub stage: Stage,
    pub seeds: Vec<Conv>,
}

#[derive(Clone, Debug)]
pub struct Stage4Out {
    pub f4: Var,
    pub seeds: [Var; 3],
    pub attention: Vec<Var>,
}

impl Stage4 {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, grid: usize, rng: &mut Rng) -> Self {
        let st = &cfg.stages[3];
        let stage = Stage::new(store, "s4", cfg.stages[2].dim, st, grid, cfg, rng);
        let seeds = Region::ALL
            .iter()
            .map(|r| Conv::same(store, &format!("s4.seed.{}", r.key()), st.dim, st.dim, 1, rng))
            .collect();
        Self { stage, seeds }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f3: Var) -> Result<Stage4Out> {
        let so = self.stage.forward(tape, store, f3)?;
        let mut seeds = [so.map; 3];
        for (s, conv) in seeds.iter_mut().zip(&self.seeds) {
            *s = conv.forward(tape, store, so.map)?;
        }
        Ok(Stage4Out { f4: so.map, seeds, attention: so.attention })
    }
}
