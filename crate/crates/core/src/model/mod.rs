//! The segmentation network: per-modality encoder branches, adaptive
//! fusion, a shared bottleneck stage and three task decoders.

pub mod decoder;
pub mod encoder;
pub mod fusion;
pub mod layers;

use serde::{Deserialize, Serialize};

use crate::domain::{Modality, Region};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::{Rng, Scalar};

pub use decoder::{Decoders, FeatureEnhance};
pub use encoder::{Encoder, StageOut};
pub use fusion::{Aff, AffOut, Stage4};

/// One pyramid stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Patch side `p`; the stage shrinks its input extent by this factor.
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub sr_ratio: usize,
    pub depth: usize,
}

impl StageConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }
}

/// The initial per-modality convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemConfig {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Model variants: the full model and the three single-component ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    /// Fusion reduced to concatenation plus the fusion convolution.
    MtAff,
    /// Decoders see only common features, no modality-specific inputs.
    MtTsfi,
    /// Enhancing-tumour decoder without curvature feature enhancement.
    MtFe,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::MtAff, Variant::MtTsfi, Variant::MtFe];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::MtAff => "mt-aff",
            Variant::MtTsfi => "mt-tsfi",
            Variant::MtFe => "mt-fe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected full, mt-aff, mt-tsfi or mt-fe)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square input slice.
    pub input: usize,
    pub stem: StemConfig,
    /// Exactly four stages; the first three are per-modality, the last is shared.
    pub stages: Vec<StageConfig>,
    pub mlp_ratio: usize,
    /// Channel reduction ratio of the squeeze-and-excitation bottleneck.
    pub reduction: usize,
    /// Fraction of channels selected by feature enhancement.
    pub fe_k: f64,
    pub ln_eps: f64,
    pub aff: bool,
    pub tsfi: bool,
    pub fe: bool,
}

impl ModelConfig {
    /// 64×64 slices, dims 16/32/64/128.
    pub fn desk() -> Self {
        Self {
            input: 64,
            stem: StemConfig { channels: 8, kernel: 3, stride: 1, pad: 1 },
            stages: vec![
                StageConfig { patch: 4, dim: 16, heads: 1, sr_ratio: 8, depth: 1 },
                StageConfig { patch: 2, dim: 32, heads: 2, sr_ratio: 4, depth: 1 },
                StageConfig { patch: 2, dim: 64, heads: 4, sr_ratio: 2, depth: 1 },
                StageConfig { patch: 2, dim: 128, heads: 8, sr_ratio: 1, depth: 1 },
            ],
            mlp_ratio: 4,
            reduction: 4,
            fe_k: 0.5,
            ln_eps: 1e-5,
            aff: true,
            tsfi: true,
            fe: true,
        }
    }

    /// 16×16 slices, dims 8/16/32/64; used for gradient checking.
    pub fn tiny() -> Self {
        Self {
            input: 16,
            stem: StemConfig { channels: 4, kernel: 3, stride: 1, pad: 1 },
            stages: vec![
                StageConfig { patch: 2, dim: 8, heads: 1, sr_ratio: 8, depth: 1 },
                StageConfig { patch: 2, dim: 16, heads: 2, sr_ratio: 4, depth: 1 },
                StageConfig { patch: 2, dim: 32, heads: 4, sr_ratio: 2, depth: 1 },
                StageConfig { patch: 2, dim: 64, heads: 8, sr_ratio: 1, depth: 1 },
            ],
            mlp_ratio: 2,
            reduction: 4,
            fe_k: 0.5,
            ln_eps: 1e-5,
            aff: true,
            tsfi: true,
            fe: true,
        }
    }

    pub fn variant(&self) -> Variant {
        match (self.aff, self.tsfi, self.fe) {
            (false, _, _) => Variant::MtAff,
            (_, false, _) => Variant::MtTsfi,
            (_, _, false) => Variant::MtFe,
            _ => Variant::Full,
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.aff = v != Variant::MtAff;
        self.tsfi = v != Variant::MtTsfi;
        self.fe = v != Variant::MtFe;
        self
    }

    /// Extent after the stem.
    pub fn stem_extent(&self) -> Result<usize> {
        let s = &self.stem;
        let padded = self.input + 2 * s.pad;
        if s.stride == 0 || s.kernel == 0 || s.kernel > padded || (padded - s.kernel) % s.stride != 0 {
            return Err(Error::Config(format!(
                "stem kernel {} stride {} pad {} does not tile input extent {}",
                s.kernel, s.stride, s.pad, self.input
            )));
        }
        Ok((padded - s.kernel) / s.stride + 1)
    }

    /// Spatial extent of each stage output.
    pub fn stage_extents(&self) -> Result<Vec<usize>> {
        let mut h = self.stem_extent()?;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            if st.patch == 0 || h % st.patch != 0 {
                return Err(Error::Config(format!("stage {}: extent {h} not divisible by patch {}", i + 1, st.patch)));
            }
            h /= st.patch;
            out.push(h);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::Config(format!("expected 4 stages, got {}", self.stages.len())));
        }
        if self.stem.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("stem channels and mlp ratio must be positive".into()));
        }
        let extents = self.stage_extents()?;
        if self.input % extents[0] != 0 {
            return Err(Error::Config(format!("stage-1 extent {} does not divide input extent {}", extents[0], self.input)));
        }
        for (i, (st, &g)) in self.stages.iter().zip(&extents).enumerate() {
            if st.heads == 0 || st.dim == 0 || st.dim % st.heads != 0 {
                return Err(Error::Config(format!("stage {}: dim {} is not heads {} × head dim", i + 1, st.dim, st.heads)));
            }
            if st.sr_ratio == 0 || g % st.sr_ratio != 0 {
                return Err(Error::Config(format!(
                    "stage {}: token grid {g} not divisible by sr ratio {}",
                    i + 1,
                    st.sr_ratio
                )));
            }
            if st.depth == 0 {
                return Err(Error::Config(format!("stage {}: depth must be at least 1", i + 1)));
            }
        }
        for (i, st) in self.stages[..3].iter().enumerate() {
            let c = 4 * st.dim;
            if self.reduction == 0 || c % self.reduction != 0 {
                return Err(Error::Config(format!("stage {}: reduction {} does not divide {c}", i + 1, self.reduction)));
            }
        }
        if !(self.fe_k > 0.0 && self.fe_k <= 1.0) {
            return Err(Error::Config(format!("fe_k must lie in (0, 1], got {}", self.fe_k)));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Every learnable component, addressed by parameter ids into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub aff: Vec<Aff>,
    pub stage4: Stage4,
    pub decoders: Decoders,
}

/// Intermediate results of one forward pass, kept for inspection.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `features[m][s]`: modality `m`, stage `s + 1`.
    pub features: [[Var; 3]; 4],
    pub common: [Var; 3],
    pub aff: Vec<AffOut>,
    pub f4: Var,
    pub seeds: [Var; 3],
    /// Per-region `H×W` probability maps, in [`Region::ALL`] order.
    pub probs: [Var; 3],
    /// Attention matrices from every block of every stage.
    pub attention: Vec<Var>,
    /// Channels picked by feature enhancement on (common, T1Gd) inputs, if used.
    pub fe_selected: Option<(Vec<usize>, Vec<usize>)>,
}

impl Network {
    /// Builds a freshly initialised network. Parameters are drawn in `f64`
    /// and rounded to `T`, so f32 and f64 models from one seed agree.
    pub fn new<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::<f64>::new();
        let extents = config.stage_extents()?;
        let encoder = Encoder::new(&mut store, &config, &extents, &mut rng);
        let aff = (0..3).map(|s| Aff::new(&mut store, &config, s, &mut rng)).collect();
        let stage4 = Stage4::new(&mut store, &config, extents[3], &mut rng);
        let decoders = Decoders::new(&mut store, &config, &mut rng);
        Ok((Self { config, encoder, aff, stage4, decoders }, store.cast()))
    }

    /// Runs the whole network on one `4×H×W` slice (channels in [`Modality::ALL`] order).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Forward> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] < 4 {
            let have = if shape.len() == 3 { shape[0] } else { 0 };
            let missing = Modality::ALL.get(have).copied().unwrap_or(Modality::T1);
            return Err(Error::Input(format!("missing modality {missing}: input shape {shape:?}, expected 4×H×W")));
        }
        if shape[0] != 4 {
            return Err(Error::Input(format!("expected 4 modality channels, got {}", shape[0])));
        }
        let x = tape.constant(image.clone());
        let scans: Vec<Var> = (0..4).map(|m| tape.select(x, 0, &[m])).collect::<Result<_>>()?;
        self.forward_vars(tape, store, &scans)
    }

    /// As [`Network::forward`], with each modality already on the tape as `1×H×W`.
    pub fn forward_vars<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, scans: &[Var]) -> Result<Forward> {
        let mut attention = Vec::new();
        let features = self.encoder.encode(tape, store, scans, &mut attention)?;
        let mut aff = Vec::with_capacity(3);
        for s in 0..3 {
            let maps = [features[0][s], features[1][s], features[2][s], features[3][s]];
            aff.push(self.aff[s].forward(tape, store, maps)?);
        }
        let common = [aff[0].fused, aff[1].fused, aff[2].fused];
        let out4 = self.stage4.forward(tape, store, common[2])?;
        attention.extend(out4.attention);
        let dec = self.decoders.forward(tape, store, &self.config, &common, &features, &out4.seeds)?;
        Ok(Forward {
            features,
            common,
            aff,
            f4: out4.f4,
            seeds: out4.seeds,
            probs: dec.probs,
            attention,
            fe_selected: dec.fe_selected,
        })
    }
}

/// Probability maps for one slice, without recording gradients.
pub fn predict<T: Scalar>(net: &Network, store: &ParamStore<T>, image: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
    let mut tape = Tape::inference();
    let fwd = net.forward(&mut tape, store, image)?;
    Ok(Region::ALL.map(|r| tape.value(fwd.probs[r.index()]).clone()))
}
