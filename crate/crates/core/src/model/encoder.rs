//! Per-modality pyramid encoder: stem convolution, then stages of patch
//! embedding followed by spatial-reduction attention blocks.

use super::layers::{Conv, Linear, Norm};
use super::{ModelConfig, StageConfig};
use crate::domain::Modality;
use crate::error::{Error, Result};
use crate::tensor::{Activation, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Rng, Scalar};

/// Positional-embedding init half-width.
const POS_INIT: f64 = 0.02;

/// Splits a `C×H×W` map into non-overlapping `p×p` patches, one row per
/// patch in raster order, each row flattened as `(c, dy, dx)`.
pub fn unfold_patches<T: Scalar>(tape: &mut Tape<T>, x: Var, p: usize) -> Result<Var> {
    let [c, h, w] = match *tape.shape(x) {
        [c, h, w] => [c, h, w],
        ref s => return Err(Error::dim("patch_embed", format!("expected C×H×W, got {s:?}"))),
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("extent {h}×{w} not divisible by patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let t = tape.reshape(x, &[c, gh, p, gw, p])?;
    let t = tape.transpose(t, &[1, 3, 0, 2, 4])?;
    tape.reshape(t, &[gh * gw, c * p * p])
}

/// Patch embedding: unfold, affine, layer norm, plus positional embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub patch: usize,
    pub grid: usize,
    pub proj: Linear,
    pub norm: Norm,
    pub pos: ParamId,
}

impl PatchEmbed {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        cfg: &StageConfig,
        grid: usize,
        eps: f64,
        rng: &mut Rng,
    ) -> Self {
        let p = cfg.patch;
        let proj = Linear::new(store, &format!("{name}.proj"), c_in * p * p, cfg.dim, true, rng);
        let norm = Norm::new(store, &format!("{name}.norm"), cfg.dim, eps);
        let pos = store.add(format!("{name}.pos"), Tensor::uniform(&[grid * grid, cfg.dim], POS_INIT, rng));
        Self { patch: p, grid, proj, norm, pos }
    }

    /// `C×H×W → n×C_s` tokens with `n = HW/p²`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let tokens = unfold_patches(tape, x, self.patch)?;
        let n = tape.shape(tokens)[0];
        if n != self.grid * self.grid {
            return Err(Error::Config(format!(
                "input gives {n} tokens but the positional embedding holds {}",
                self.grid * self.grid
            )));
        }
        let a = self.proj.forward(tape, store, tokens)?;
        let a = self.norm.forward(tape, store, a)?;
        let p = tape.param(store, self.pos);
        tape.add(a, p)
    }
}

/// Groups `r×r` neighbourhoods of the token grid, maps them with `W^S`, then normalises.
#[derive(Clone, Debug)]
pub struct SpatialReduce {
    pub ratio: usize,
    pub proj: Linear,
    pub norm: Norm,
}

impl SpatialReduce {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, ratio: usize, eps: f64, rng: &mut Rng) -> Self {
        let proj = Linear::new(store, &format!("{name}.proj"), ratio * ratio * dim, dim, false, rng);
        let norm = Norm::new(store, &format!("{name}.norm"), dim, eps);
        Self { ratio, proj, norm }
    }

    /// `n×C` tokens on a `grid×grid` raster → `n/r²×C`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, seq: Var, grid: usize) -> Result<Var> {
        let r = self.ratio;
        let [n, c] = match *tape.shape(seq) {
            [n, c] => [n, c],
            ref s => return Err(Error::dim("spatial_reduce", format!("expected n×C, got {s:?}"))),
        };
        if n != grid * grid || r == 0 || grid % r != 0 {
            return Err(Error::Config(format!("token grid {grid}×{grid} ({n} tokens) not divisible by sr ratio {r}")));
        }
        let g = grid / r;
        let t = tape.reshape(seq, &[g, r, g, r, c])?;
        let t = tape.transpose(t, &[0, 2, 1, 3, 4])?;
        let t = tape.reshape(t, &[g * g, r * r * c])?;
        let t = self.proj.forward(tape, store, t)?;
        self.norm.forward(tape, store, t)
    }
}

/// Multi-head attention with spatially reduced keys and values.
#[derive(Clone, Debug)]
pub struct Sra {
    pub heads: usize,
    pub head_dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub sr: SpatialReduce,
}

/// Output of [`Sra::forward`] with the per-head attention matrices.
#[derive(Clone, Debug)]
pub struct SraOut {
    pub out: Var,
    pub attention: Vec<Var>,
}

impl Sra {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &StageConfig, eps: f64, rng: &mut Rng) -> Self {
        let d = cfg.dim;
        Self {
            heads: cfg.heads,
            head_dim: cfg.head_dim(),
            q: Linear::new(store, &format!("{name}.q"), d, d, false, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, false, rng),
            out: Linear::new(store, &format!("{name}.o"), d, d, false, rng),
            sr: SpatialReduce::new(store, &format!("{name}.sr"), d, cfg.sr_ratio, eps, rng),
        }
    }

    /// `x` is the already normalised `n×C` sequence.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, grid: usize) -> Result<SraOut> {
        let c = tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.heads * self.head_dim {
            return Err(Error::Config(format!("channels {c} ≠ heads {} × head dim {}", self.heads, self.head_dim)));
        }
        let q = self.q.forward(tape, store, x)?;
        let reduced = self.sr.forward(tape, store, x, grid)?;
        let k = self.k.forward(tape, store, reduced)?;
        let v = self.v.forward(tape, store, reduced)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, d) = (h * self.head_dim, self.head_dim);
            let qh = tape.narrow(q, 1, lo, d)?;
            let kh = tape.narrow(k, 1, lo, d)?;
            let vh = tape.narrow(v, 1, lo, d)?;
            let kt = tape.transpose(kh, &[1, 0])?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let a = tape.softmax(scores, 1)?;
            attention.push(a);
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        let out = self.out.forward(tape, store, cat)?;
        Ok(SraOut { out, attention })
    }
}

/// Pre-norm transformer block: attention and feed-forward sublayers, each with one residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: Norm,
    pub attn: Sra,
    pub norm2: Norm,
    pub ffn_a: Linear,
    pub ffn_b: Linear,
}

impl Block {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &StageConfig, mlp_ratio: usize, eps: f64, rng: &mut Rng) -> Self {
        let d = cfg.dim;
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), d, eps),
            attn: Sra::new(store, &format!("{name}.attn"), cfg, eps, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), d, eps),
            ffn_a: Linear::new(store, &format!("{name}.ffn_a"), d, mlp_ratio * d, true, rng),
            ffn_b: Linear::new(store, &format!("{name}.ffn_b"), mlp_ratio * d, d, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, beta: Var, grid: usize) -> Result<SraOut> {
        let n1 = self.norm1.forward(tape, store, beta)?;
        let sra = self.attn.forward(tape, store, n1, grid)?;
        let gamma = tape.add(sra.out, beta)?;
        let n2 = self.norm2.forward(tape, store, gamma)?;
        let hidden = self.ffn_a.forward(tape, store, n2)?;
        let hidden = tape.activation(hidden, Activation::Relu);
        let f = self.ffn_b.forward(tape, store, hidden)?;
        let rho = tape.add(f, gamma)?;
        Ok(SraOut { out: rho, attention: sra.attention })
    }
}

/// Patch embedding followed by `depth` blocks; maps `C×H×W → C_s×H/p×W/p`.
#[derive(Clone, Debug)]
pub struct Stage {
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct StageOut {
    pub map: Var,
    pub attention: Vec<Var>,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        cfg: &StageConfig,
        grid: usize,
        model: &ModelConfig,
        rng: &mut Rng,
    ) -> Self {
        let embed = PatchEmbed::new(store, &format!("{name}.embed"), c_in, cfg, grid, model.ln_eps, rng);
        let blocks = (0..cfg.depth)
            .map(|b| Block::new(store, &format!("{name}.block{b}"), cfg, model.mlp_ratio, model.ln_eps, rng))
            .collect();
        Self { embed, blocks }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<StageOut> {
        let mut seq = self.embed.forward(tape, store, x)?;
        let mut attention = Vec::new();
        for block in &self.blocks {
            let out = block.forward(tape, store, seq, self.embed.grid)?;
            seq = out.out;
            attention.extend(out.attention);
        }
        let c = tape.shape(seq)[1];
        let g = self.embed.grid;
        let t = tape.transpose(seq, &[1, 0])?;
        let map = tape.reshape(t, &[c, g, g])?;
        Ok(StageOut { map, attention })
    }
}

/// One modality branch: stem plus stages 1–3.
#[derive(Clone, Debug)]
pub struct Branch {
    pub stem: Conv,
    pub stages: Vec<Stage>,
}

impl Branch {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, scan: Var, attention: &mut Vec<Var>) -> Result<[Var; 3]> {
        let mut x = self.stem.forward(tape, store, scan)?;
        let mut out = [x; 3];
        for (s, stage) in self.stages.iter().enumerate() {
            let so = stage.forward(tape, store, x)?;
            attention.extend(so.attention);
            x = so.map;
            out[s] = x;
        }
        Ok(out)
    }
}

/// Four parameter-disjoint branches, one per modality.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub branches: Vec<Branch>,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, extents: &[usize], rng: &mut Rng) -> Self {
        let branches = Modality::ALL
            .iter()
            .map(|m| {
                let name = format!("enc.{}", m.key());
                let s = &cfg.stem;
                let stem = Conv::new(store, &format!("{name}.stem"), 1, s.channels, s.kernel, s.stride, s.pad, rng);
                let mut c_in = s.channels;
                let stages = (0..3)
                    .map(|i| {
                        let st = &cfg.stages[i];
                        let stage = Stage::new(store, &format!("{name}.s{}", i + 1), c_in, st, extents[i], cfg, rng);
                        c_in = st.dim;
                        stage
                    })
                    .collect();
                Branch { stem, stages }
            })
            .collect();
        Self { branches }
    }

    /// Runs each branch on its own `1×H×W` scan. Returns `features[m][s]`.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        scans: &[Var],
        attention: &mut Vec<Var>,
    ) -> Result<[[Var; 3]; 4]> {
        if let Some(m) = Modality::ALL.get(scans.len()) {
            return Err(Error::Input(format!("missing modality {m}")));
        }
        let first = tape.shape(scans[0]).to_vec();
        for (m, &s) in Modality::ALL.iter().zip(scans) {
            if tape.shape(s) != first.as_slice() {
                return Err(Error::dim("encode", format!("{m} scan {:?} differs from T1 scan {first:?}", tape.shape(s))));
            }
        }
        let mut out = Vec::with_capacity(4);
        for (branch, &scan) in self.branches.iter().zip(scans) {
            out.push(branch.forward(tape, store, scan, attention)?);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }
}
