//! Task decoders with modality routing, curvature-based feature
//! enhancement and the per-task segmentation heads.

use super::layers::Conv;
use super::ModelConfig;
use crate::domain::{Modality, Region};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::{Rng, Scalar};

/// Fixed curvature kernel, row-major 3×3.
pub const CURVATURE_KERNEL: [f64; 9] = [
    -1.0 / 16.0,
    5.0 / 16.0,
    -1.0 / 16.0,
    5.0 / 16.0,
    -16.0 / 16.0,
    5.0 / 16.0,
    -1.0 / 16.0,
    5.0 / 16.0,
    -1.0 / 16.0,
];

/// Depthwise 3×3 cross-correlation of each channel with
/// [`CURVATURE_KERNEL`], with edge-replicated borders.
pub fn curvature_map<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, w] = x.dims3("curvature_map")?;
    let d = x.data();
    let mut out = Vec::with_capacity(d.len());
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0f64;
                for (k, &lam) in CURVATURE_KERNEL.iter().enumerate() {
                    let yi = (i + k / 3).saturating_sub(1).min(h - 1);
                    let xj = (j + k % 3).saturating_sub(1).min(w - 1);
                    s += lam * plane[yi * w + xj].wide();
                }
                out.push(T::lit(s));
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Spatial mean of `|curvature|` per channel.
pub fn channel_scores<T: Scalar>(x: &Tensor<T>) -> Result<Vec<f64>> {
    let k = curvature_map(x)?;
    let hw = (k.shape()[1] * k.shape()[2]).max(1);
    Ok(k.data().chunks(hw).map(|p| p.iter().map(|v| v.wide().abs()).sum::<f64>() / hw as f64).collect())
}

/// `ceil(k·c)`, at least one.
pub fn selected_count(c: usize, k: f64) -> usize {
    // guard against products like 0.3·10 = 3.0000000000000004
    ((k * c as f64 - 1e-9).ceil() as usize).clamp(1, c.max(1))
}

/// Indices of the `ceil(k·C)` highest scores, best first; ties go to the lower index.
pub fn top_channels(scores: &[f64], k: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(selected_count(scores.len(), k));
    idx
}

/// Curvature feature enhancement: appends the highest-curvature channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureEnhance {
    pub k: f64,
}

impl FeatureEnhance {
    pub fn out_channels(&self, c: usize) -> usize {
        c + selected_count(c, self.k)
    }

    /// `C×H×W → (C + ceil(kC))×H×W`; the original channels come first.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Vec<usize>)> {
        let scores = channel_scores(tape.value(x))?;
        let picked = top_channels(&scores, self.k);
        let sel = tape.select(x, 0, &picked)?;
        Ok((tape.concat(&[x, sel], 0)?, picked))
    }
}

/// Bilinear upsampling followed by a 3×3 convolution.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub factor: usize,
    pub conv: Conv,
}

impl UpConv {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let u = tape.upsample_bilinear(x, self.factor)?;
        self.conv.forward(tape, store, u)
    }
}

/// One level of the whole-tumour / tumour-core decoder.
#[derive(Clone, Debug)]
pub struct WtTcLevel {
    pub conv: [Conv; 5],
    pub up: UpConv,
}

impl WtTcLevel {
    /// `common` is `F`, `t2` and `x` are the routed modality features at the
    /// same stage, `prev` is the coarser decoder output.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        common: Var,
        prev: Var,
        t2: Var,
        x: Var,
    ) -> Result<Var> {
        let xf = tape.mul(x, common)?;
        let c = tape.concat(&[xf, common], 0)?;
        let z1 = self.conv[0].forward(tape, store, c)?;
        let tf = tape.mul(t2, common)?;
        let c = tape.concat(&[tf, common], 0)?;
        let z2 = self.conv[1].forward(tape, store, c)?;
        let c = tape.concat(&[z1, z2], 0)?;
        let a = self.conv[2].forward(tape, store, c)?;
        let xt = tape.mul(x, t2)?;
        let tri = tape.mul(xt, common)?;
        let z3 = tape.concat(&[a, tri], 0)?;
        let up = self.up.forward(tape, store, prev)?;
        let b = self.conv[3].forward(tape, store, z3)?;
        let c = tape.concat(&[up, b], 0)?;
        self.conv[4].forward(tape, store, c)
    }
}

/// One level of the enhancing-tumour decoder.
#[derive(Clone, Debug)]
pub struct EtLevel {
    pub conv: [Conv; 2],
    pub up: UpConv,
}

impl EtLevel {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, prev: Var, t1gd: Var) -> Result<Var> {
        let p = tape.mul(t1gd, x)?;
        let c = tape.concat(&[p, x], 0)?;
        let z1 = self.conv[0].forward(tape, store, c)?;
        let up = self.up.forward(tape, store, prev)?;
        let c = tape.concat(&[up, z1], 0)?;
        self.conv[1].forward(tape, store, c)
    }
}

/// Upsample to the input extent, 1×1 conv to one channel, sigmoid.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub factor: usize,
    pub conv: Conv,
}

impl SegHead {
    /// Returns an `H×W` probability map.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let u = tape.upsample_bilinear(f, self.factor)?;
        let z = self.conv.forward(tape, store, u)?;
        let p = tape.sigmoid(z);
        let (h, w) = (tape.shape(p)[1], tape.shape(p)[2]);
        tape.reshape(p, &[h, w])
    }
}

#[derive(Clone, Debug)]
pub struct Decoders {
    /// Levels 1–3 for WT and TC, coarse to fine.
    pub wt: Vec<WtTcLevel>,
    pub tc: Vec<WtTcLevel>,
    pub et: Vec<EtLevel>,
    pub heads: Vec<SegHead>,
    pub fe: Option<FeatureEnhance>,
}

#[derive(Clone, Debug)]
pub struct DecodeOut {
    pub probs: [Var; 3],
    pub fe_selected: Option<(Vec<usize>, Vec<usize>)>,
}

/// Stage index (0-based) read by decoder level `i ∈ 1..=3`.
pub fn level_stage(i: usize) -> usize {
    3 - i
}

impl Decoders {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let dims: Vec<usize> = cfg.stages.iter().map(|s| s.dim).collect();
        let fe = cfg.fe.then_some(FeatureEnhance { k: cfg.fe_k });
        let mut wt = Vec::new();
        let mut tc = Vec::new();
        let mut et = Vec::new();
        for region in Region::ALL {
            for i in 1..=3 {
                let s = level_stage(i);
                let (c, prev) = (dims[s], dims[s + 1]);
                let name = format!("dec.{}.l{i}", region.key());
                let up = UpConv {
                    factor: cfg.stages[s + 1].patch,
                    conv: Conv::same(store, &format!("{name}.up"), prev, c, 3, rng),
                };
                match region {
                    Region::Wt | Region::Tc => {
                        let conv = [
                            Conv::same(store, &format!("{name}.conv1"), 2 * c, c, 3, rng),
                            Conv::same(store, &format!("{name}.conv2"), 2 * c, c, 3, rng),
                            Conv::same(store, &format!("{name}.conv3"), 2 * c, c, 3, rng),
                            Conv::same(store, &format!("{name}.conv4"), 2 * c, c, 3, rng),
                            Conv::same(store, &format!("{name}.conv5"), 2 * c, c, 3, rng),
                        ];
                        let level = WtTcLevel { conv, up };
                        if region == Region::Wt { wt.push(level) } else { tc.push(level) }
                    }
                    Region::Et => {
                        let c_in = match (i, fe) {
                            (3, Some(fe)) => fe.out_channels(c),
                            _ => c,
                        };
                        let conv = [
                            Conv::same(store, &format!("{name}.conv1"), 2 * c_in, c, 3, rng),
                            Conv::same(store, &format!("{name}.conv2"), 2 * c, c, 3, rng),
                        ];
                        et.push(EtLevel { conv, up });
                    }
                }
            }
        }
        let factor = cfg.input / cfg.stage_extents().map(|e| e[0]).unwrap_or(cfg.input).max(1);
        let heads = Region::ALL
            .iter()
            .map(|r| SegHead { factor, conv: Conv::same(store, &format!("head.{}", r.key()), dims[0], 1, 1, rng) })
            .collect();
        Self { wt, tc, et, heads, fe }
    }

    /// `common[s]` and `features[m][s]` are indexed by 0-based stage.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cfg: &ModelConfig,
        common: &[Var; 3],
        features: &[[Var; 3]; 4],
        seeds: &[Var; 3],
    ) -> Result<DecodeOut> {
        let routed = |m: Modality, s: usize| if cfg.tsfi { features[m.index()][s] } else { common[s] };
        let mut f = *seeds;
        let mut fe_selected = None;
        for i in 1..=3 {
            let s = level_stage(i);
            let l = i - 1;
            let (t2, flair, t1gd) = (routed(Modality::T2, s), routed(Modality::Flair, s), routed(Modality::T1Gd, s));
            f[0] = self.wt[l].forward(tape, store, common[s], f[0], t2, flair)?;
            f[1] = self.tc[l].forward(tape, store, common[s], f[1], t2, t1gd)?;
            let (x, xg) = match (i, self.fe) {
                (3, Some(fe)) => {
                    let (x, a) = fe.apply(tape, common[s])?;
                    let (xg, b) = fe.apply(tape, t1gd)?;
                    fe_selected = Some((a, b));
                    (x, xg)
                }
                _ => (common[s], t1gd),
            };
            f[2] = self.et[l].forward(tape, store, x, f[2], xg)?;
        }
        let mut probs = f;
        for (p, head) in probs.iter_mut().zip(&self.heads) {
            *p = head.forward(tape, store, *p)?;
        }
        if probs.iter().any(|&p| tape.shape(p) != [cfg.input, cfg.input]) {
            return Err(Error::Config(format!("decoder output {:?} does not match input extent {}", tape.shape(probs[0]), cfg.input)));
        }
        Ok(DecodeOut { probs, fe_selected })
    }
}
