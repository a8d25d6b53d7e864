//! Synthetic multi-modal tumour phantoms.
//!
//! Each tumour is an axis-aligned ellipsoid of edema enclosing a smaller
//! core ellipsoid; the outer shell of the core is enhancing tumour and the
//! inside is necrosis. Enhancing tumour and necrosis share intensities in
//! every modality except T1Gd.

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::domain::Modality;
use crate::error::{Error, Result};
use crate::Rng;

/// Intensity of each tissue class in one modality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueContrast {
    pub outside: f32,
    pub brain: f32,
    pub edema: f32,
    pub necrosis: f32,
    pub enhancing: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// `[D, H, W]`.
    pub grid: [usize; 3],
    /// Inclusive range of tumours per volume.
    pub tumors: [usize; 2],
    /// In-plane edema semi-axis range, voxels.
    pub edema_radius: [f64; 2],
    /// Through-plane edema semi-axis range, voxels.
    pub edema_depth: [f64; 2],
    /// Core semi-axes as a fraction of the edema semi-axes.
    pub core_ratio: [f64; 2],
    /// Normalised core radius beyond which the core enhances.
    pub enhancing_inner: [f64; 2],
    /// Brain ellipsoid semi-axes as a fraction of the half grid.
    pub brain_ratio: f64,
    /// Indexed by [`Modality::index`].
    pub contrast: [TissueContrast; 4],
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid: [12, 64, 64],
            tumors: [1, 2],
            edema_radius: [9.0, 15.0],
            edema_depth: [3.0, 5.0],
            core_ratio: [0.45, 0.7],
            enhancing_inner: [0.45, 0.7],
            brain_ratio: 0.9,
            contrast: default_contrast(),
            noise: 0.03,
            seed: 0,
        }
    }
}

/// T1 is weak everywhere, T1Gd alone separates enhancing tumour from
/// necrosis, T2 and FLAIR light up the whole tumour.
pub fn default_contrast() -> [TissueContrast; 4] {
    let c = |outside, brain, edema, necrosis, enhancing| TissueContrast { outside, brain, edema, necrosis, enhancing };
    [
        c(0.0, 0.60, 0.52, 0.45, 0.45),
        c(0.0, 0.55, 0.55, 0.30, 0.95),
        c(0.0, 0.35, 0.80, 0.65, 0.65),
        c(0.0, 0.35, 0.90, 0.60, 0.60),
    ]
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.grid;
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("phantom grid {:?} has a zero extent", self.grid)));
        }
        if self.tumors[0] > self.tumors[1] {
            return Err(Error::Config(format!("tumor count range {:?} is empty", self.tumors)));
        }
        for (name, r) in [("edema_radius", self.edema_radius), ("edema_depth", self.edema_depth)] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return Err(Error::Config(format!("{name} range {r:?} must be positive and ordered")));
            }
        }
        let half_plane = h.min(w) as f64 / 2.0;
        if self.edema_radius[1] > half_plane {
            return Err(Error::Config(format!(
                "edema radius {} exceeds half the in-plane grid ({half_plane})",
                self.edema_radius[1]
            )));
        }
        if self.edema_depth[1] > d as f64 / 2.0 + 0.5 {
            return Err(Error::Config(format!("edema depth {} exceeds half the grid depth ({d})", self.edema_depth[1])));
        }
        for (name, r) in [("core_ratio", self.core_ratio), ("enhancing_inner", self.enhancing_inner)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1] < 1.0) {
                return Err(Error::Config(format!("{name} range {r:?} must lie in (0, 1) and be ordered")));
            }
        }
        if !(self.brain_ratio > 0.0 && self.brain_ratio <= 1.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("brain_ratio must lie in (0, 1] and noise be non-negative".into()));
        }
        Ok(())
    }
}

struct Tumor {
    center: [f64; 3],
    edema: [f64; 3],
    core: [f64; 3],
    inner: f64,
}

fn radius(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    (0..3).map(|i| ((p[i] - c[i]) / r[i]).powi(2)).sum::<f64>().sqrt()
}

/// Deterministic phantom for `spec`; `subject` only names the result.
pub fn generate_phantom(spec: &PhantomSpec, subject: &str) -> Result<Volume> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let [d, h, w] = spec.grid;
    let mid = [(d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
    let brain = [
        (d as f64 / 2.0).max(1.0) * 1.5,
        h as f64 / 2.0 * spec.brain_ratio,
        w as f64 / 2.0 * spec.brain_ratio,
    ];
    let count = rng.int_in(spec.tumors[0], spec.tumors[1]);
    let tumors: Vec<Tumor> = (0..count)
        .map(|_| {
            let r = rng.uniform_in(spec.edema_radius[0], spec.edema_radius[1]);
            let edema = [
                rng.uniform_in(spec.edema_depth[0], spec.edema_depth[1]),
                r * rng.uniform_in(0.8, 1.0),
                r * rng.uniform_in(0.8, 1.0),
            ];
            // keep the edema inside the brain ellipse in-plane
            let reach_y = (brain[1] - edema[1]).max(0.0) * 0.7;
            let reach_x = (brain[2] - edema[2]).max(0.0) * 0.7;
            let center = [
                mid[0] + rng.uniform_in(-0.25, 0.25) * d as f64,
                mid[1] + rng.uniform_in(-reach_y, reach_y),
                mid[2] + rng.uniform_in(-reach_x, reach_x),
            ];
            let k = rng.uniform_in(spec.core_ratio[0], spec.core_ratio[1]);
            Tumor {
                center,
                edema,
                core: edema.map(|e| e * k),
                inner: rng.uniform_in(spec.enhancing_inner[0], spec.enhancing_inner[1]),
            }
        })
        .collect();

    let n = d * h * w;
    let mut labels = vec![0u8; n];
    let mut inside = vec![false; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let i = (z * h + y) * w + x;
                inside[i] = radius(p, mid, brain) <= 1.0;
                let mut label = 0u8;
                for t in &tumors {
                    let rc = radius(p, t.center, t.core);
                    let l = if rc <= 1.0 {
                        if rc >= t.inner { 4 } else { 1 }
                    } else if radius(p, t.center, t.edema) <= 1.0 {
                        2
                    } else {
                        0
                    };
                    label = stronger(label, l);
                }
                labels[i] = label;
            }
        }
    }

    let mut channels: [Vec<f32>; 4] = Default::default();
    for m in Modality::ALL {
        let c = spec.contrast[m.index()];
        let mut noise_rng = rng.fork(m.index() as u64);
        channels[m.index()] = (0..n)
            .map(|i| {
                let base = match labels[i] {
                    4 => c.enhancing,
                    1 => c.necrosis,
                    2 => c.edema,
                    _ if inside[i] => c.brain,
                    _ => c.outside,
                };
                if spec.noise > 0.0 {
                    (base as f64 + spec.noise * noise_rng.normal()).clamp(0.0, 1.0) as f32
                } else {
                    base
                }
            })
            .collect();
    }
    let vol = Volume { subject: subject.to_string(), shape: spec.grid, channels, labels };
    vol.validate()?;
    Ok(vol)
}

/// Overlapping tumours: enhancing beats necrosis beats edema beats background.
fn stronger(a: u8, b: u8) -> u8 {
    let rank = |l: u8| match l {
        4 => 3,
        1 => 2,
        2 => 1,
        _ => 0,
    };
    if rank(b) > rank(a) {
        b
    } else {
        a
    }
}

/// Spec for subject `index` of a synthetic cohort: the base spec with a derived seed.
pub fn cohort_spec(base: &PhantomSpec, index: usize) -> PhantomSpec {
    let mut s = base.clone();
    s.seed = Rng::new(base.seed).fork(index as u64 + 1).next_u64();
    s
}
