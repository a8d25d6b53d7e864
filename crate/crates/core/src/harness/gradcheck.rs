//! Central finite-difference check of every backward rule, end to end.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{extract_slices, generate_phantom, PhantomSpec, SlicePolicy, SliceSample};
use crate::error::{Error, Result};
use crate::loss::{bce_clipped, dice_loss, total_loss, BceReduction};
use crate::model::{ModelConfig, Network};
use crate::tensor::{Fault, ParamStore, Tape, Tensor};
use crate::Rng;

/// Largest input extent accepted.
pub const MAX_INPUT: usize = 16;

/// Parameter groups, sampled round-robin.
pub const GROUPS: [&str; 8] = ["enc", "aff", "s4", "dec.wt", "dec.tc", "dec.et", "fe", "head"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub params: usize,
    /// Probability pixels checked per loss term.
    pub loss_pixels: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Largest relative gap between the `h` and `h/2` estimates accepted as smooth.
    pub smoothness: f64,
    pub seed: u64,
    #[serde(skip)]
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { params: 100, loss_pixels: 4, step: 2e-3, tolerance: 1e-4, floor: 1e-5, smoothness: 1e-2, seed: 0, fault: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub group: String,
    /// `name[flat index]`.
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub rows: Vec<GradRow>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Elements skipped because the loss is not smooth around them.
    pub resampled: usize,
    pub passed: bool,
}

impl GradReport {
    pub fn failures(&self) -> impl Iterator<Item = &GradRow> {
        self.rows.iter().filter(|r| !r.pass)
    }

    pub fn table(&self) -> String {
        let mut out = String::from("group,param,analytic,numeric,rel_err,status\n");
        for r in &self.rows {
            let status = if r.pass { "pass" } else { "FAIL" };
            let _ = writeln!(out, "{},{},{:e},{:e},{:e},{status}", r.group, r.label, r.analytic, r.numeric, r.rel_err);
        }
        out
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Tumour-bearing slice of a small phantom, with the most enhancing voxels.
pub fn fixture_slice(input: usize, seed: u64) -> Result<SliceSample> {
    let r = input as f64 / 4.0;
    let spec = PhantomSpec {
        grid: [6, input, input],
        tumors: [1, 1],
        edema_radius: [r, r * 1.25],
        edema_depth: [1.5, 2.5],
        seed,
        ..PhantomSpec::default()
    };
    let mut vol = generate_phantom(&spec, "gradcheck")?;
    vol.normalize();
    extract_slices(&vol, SlicePolicy::TumorOnly)?
        .into_iter()
        .max_by_key(|s| (s.masks[2].count(), std::cmp::Reverse(s.index)))
        .ok_or_else(|| Error::Input("gradcheck phantom has no tumour slice".into()))
}

type Branches = (Option<(Vec<usize>, Vec<usize>)>, Vec<bool>);

struct Probe<'a> {
    net: &'a Network,
    image: Tensor<f64>,
    targets: [Tensor<f64>; 3],
    fault: Option<Fault>,
}

impl Probe<'_> {
    fn tape(&self) -> Tape<f64> {
        let mut tape = Tape::new();
        if let Some(f) = self.fault {
            tape.inject_fault(f);
        }
        tape
    }

    /// Loss plus everything that must stay fixed for the loss to be smooth:
    /// the FE channel selection and the rectifier sign pattern.
    fn loss(&self, store: &ParamStore<f64>) -> Result<(f64, Branches)> {
        let mut tape = self.tape();
        let fwd = self.net.forward(&mut tape, store, &self.image)?;
        let terms = total_loss(&mut tape, &fwd.probs, &self.targets, BceReduction::Sum)?;
        Ok((tape.value(terms.total).item()?, (fwd.fe_selected, tape.activation_pattern())))
    }

    fn gradients(&self, store: &mut ParamStore<f64>) -> Result<()> {
        store.zero_grad();
        let mut tape = self.tape();
        let fwd = self.net.forward(&mut tape, store, &self.image)?;
        let terms = total_loss(&mut tape, &fwd.probs, &self.targets, BceReduction::Sum)?;
        tape.backward(terms.total, store)
    }
}

/// Richardson-extrapolated central difference from steps `h` and `h/2`.
/// `None` when a ReLU kink or an FE selection change lies within the stencil,
/// or the two estimates disagree, since the loss is not smooth there.
fn smooth_derivative(
    probe: &Probe<'_>,
    store: &mut ParamStore<f64>,
    id: crate::ParamId,
    e: usize,
    base_sel: &Branches,
    opts: &GradcheckOptions,
) -> Result<Option<f64>> {
    let orig = store.value(id).data()[e];
    let mut central = [0.0; 2];
    for (k, h) in [opts.step, opts.step / 2.0].into_iter().enumerate() {
        let mut side = [0.0; 2];
        for (j, x) in [orig + h, orig - h].into_iter().enumerate() {
            store.value_mut(id).data_mut()[e] = x;
            let (l, sel) = probe.loss(store)?;
            if sel != *base_sel {
                store.value_mut(id).data_mut()[e] = orig;
                return Ok(None);
            }
            side[j] = l;
        }
        central[k] = (side[0] - side[1]) / (2.0 * h);
    }
    store.value_mut(id).data_mut()[e] = orig;
    let r = (4.0 * central[1] - central[0]) / 3.0;
    let spread = (central[0] - central[1]).abs() / r.abs().max(opts.floor);
    Ok((spread <= opts.smoothness).then_some(r))
}

/// Candidate `(param index, flat element)` positions for each group.
fn candidates(net: &Network, store: &ParamStore<f64>, group: &str) -> Vec<(usize, Vec<usize>)> {
    let params: Vec<_> = store.iter().collect();
    if group == "fe" {
        let Some(fe) = net.decoders.fe else { return Vec::new() };
        let Some(p) = params.iter().find(|p| p.name == "dec.et.l3.conv1.w") else { return Vec::new() };
        let c = net.config.stages[0].dim;
        let c_in = fe.out_channels(c);
        let shape = p.value.shape();
        let per_in = shape[2] * shape[3];
        let elems = (0..p.value.len())
            .filter(|i| {
                let ch = (i / per_in) % shape[1];
                (c..c_in).contains(&ch) || (c_in + c..2 * c_in).contains(&ch)
            })
            .collect();
        return vec![(p.id.index(), elems)];
    }
    let prefix = format!("{group}.");
    params
        .iter()
        .filter(|p| p.name.starts_with(&prefix) || (group == "aff" && p.name.starts_with("aff")))
        .filter(|p| !(group == "dec.et" && p.name == "dec.et.l3.conv1.w" && net.decoders.fe.is_some()))
        .map(|p| (p.id.index(), (0..p.value.len()).collect()))
        .collect()
}

/// Checks `opts.params` parameter elements, spread round-robin over [`GROUPS`],
/// plus `opts.loss_pixels` probability pixels for each loss term.
pub fn gradcheck(model: &ModelConfig, seed: u64, opts: &GradcheckOptions) -> Result<GradReport> {
    model.validate()?;
    if model.input > MAX_INPUT {
        return Err(Error::Config(format!("gradcheck needs input ≤ {MAX_INPUT}, got {}", model.input)));
    }
    let (net, mut store) = Network::new::<f64>(model.clone(), seed)?;
    let sample = fixture_slice(model.input, seed)?;
    let probe = Probe { net: &net, image: sample.image_as(), targets: sample.targets(), fault: opts.fault };
    let (_, base_sel) = probe.loss(&store)?;
    probe.gradients(&mut store)?;
    let analytic: Vec<Tensor<f64>> = store.iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();

    let groups: Vec<(&str, Vec<(usize, Vec<usize>)>)> =
        GROUPS.iter().map(|g| (*g, candidates(&net, &store, g))).filter(|(_, c)| !c.is_empty()).collect();
    let mut rng = Rng::new(seed).fork(7);
    let mut rows = Vec::with_capacity(opts.params + 2 * opts.loss_pixels);
    let mut resampled = 0;
    let mut tried = 0;
    while rows.len() < opts.params {
        tried += 1;
        if tried > 20 * opts.params.max(1) {
            return Err(Error::Input("gradcheck could not find stable elements to perturb".into()));
        }
        let (group, cands) = &groups[rows.len() % groups.len()];
        let (pi, elems) = &cands[rng.int_in(0, cands.len() - 1)];
        let e = elems[rng.int_in(0, elems.len() - 1)];
        let id = store.iter().nth(*pi).expect("param index").id;
        let Some(numeric) = smooth_derivative(&probe, &mut store, id, e, &base_sel, opts)? else {
            resampled += 1;
            continue;
        };
        let a = analytic[*pi].data()[e];
        let err = rel_err(a, numeric, opts.floor);
        rows.push(GradRow {
            group: group.to_string(),
            label: format!("{}[{e}]", names[*pi]),
            analytic: a,
            numeric,
            rel_err: err,
            pass: err < opts.tolerance,
        });
    }
    rows.extend(loss_rows(&sample, opts, &mut rng)?);
    let max_rel_err = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let passed = rows.iter().all(|r| r.pass);
    Ok(GradReport { rows, max_rel_err, tolerance: opts.tolerance, resampled, passed })
}

/// Derivatives of each loss term with respect to single probability pixels.
fn loss_rows(sample: &SliceSample, opts: &GradcheckOptions, rng: &mut Rng) -> Result<Vec<GradRow>> {
    let target: Tensor<f64> = sample.masks[0].to_tensor();
    let n = target.len();
    let pred = Tensor::from_fn(target.shape(), |_| rng.uniform_in(0.05, 0.95));
    let eval = |p: &Tensor<f64>, term: &str, want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        if let Some(f) = opts.fault {
            tape.inject_fault(f);
        }
        let v = tape.constant(p.clone());
        let l = if term == "bce" { bce_clipped(&mut tape, v, &target)? } else { dice_loss(&mut tape, v, &target)? };
        let value = tape.value(l).item()?;
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(l, &mut ParamStore::new())?;
        Ok((value, tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n])))
    };
    let mut rows = Vec::new();
    for term in ["bce", "dice"] {
        let (_, grad) = eval(&pred, term, true)?;
        for _ in 0..opts.loss_pixels {
            let e = rng.int_in(0, n - 1);
            let mut central = [0.0; 2];
            for (k, h) in [opts.step, opts.step / 2.0].into_iter().enumerate() {
                let mut p = pred.clone();
                p.data_mut()[e] += h;
                let (plus, _) = eval(&p, term, false)?;
                p.data_mut()[e] -= 2.0 * h;
                let (minus, _) = eval(&p, term, false)?;
                central[k] = (plus - minus) / (2.0 * h);
            }
            let numeric = (4.0 * central[1] - central[0]) / 3.0;
            let err = rel_err(grad[e], numeric, opts.floor);
            rows.push(GradRow {
                group: format!("loss.{term}"),
                label: format!("pred[{e}]"),
                analytic: grad[e],
                numeric,
                rel_err: err,
                pass: err < opts.tolerance,
            });
        }
    }
    Ok(rows)
}
