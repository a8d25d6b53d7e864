use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stable index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub id: ParamId,
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Owns every learnable tensor of a model, addressable by id or name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name `{name}`");
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { id, name, value, grad });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        for (dst, &src) in self.params[id.0].grad.data_mut().iter_mut().zip(g) {
            *dst += src;
        }
    }

    /// Copy of the store at another precision (gradients reset).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast());
        }
        out
    }

    /// Overwrites values from `(name, shape, data)` triples; every parameter
    /// must be present with a matching shape.
    pub fn load_values<'a, I>(&mut self, entries: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a [usize], &'a [f64])>,
    {
        let mut seen = vec![false; self.params.len()];
        for (name, shape, data) in entries {
            let id = self.find(name).ok_or_else(|| Error::Load {
                param: name.to_string(),
                detail: "not present in the model".into(),
            })?;
            let p = &mut self.params[id.0];
            if p.value.shape() != shape || data.len() != p.value.len() {
                return Err(Error::Load {
                    param: name.to_string(),
                    detail: format!("shape {:?} in checkpoint, {:?} in model", shape, p.value.shape()),
                });
            }
            for (dst, &v) in p.value.data_mut().iter_mut().zip(data) {
                *dst = T::lit(v);
            }
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Load { param: self.params[i].name.clone(), detail: "missing from checkpoint".into() });
        }
        Ok(())
    }
}

/// Plain gradient descent: `value ← value − lr·grad` for every parameter.
/// Gradients are left untouched.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let lr = T::lit(lr);
    for p in &mut store.params {
        for (v, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * g;
        }
    }
    Ok(())
}

/// Gradient descent with heavy-ball momentum:
/// `v ← μ·v + grad`, `value ← value − lr·v`. With `μ = 0` and no clipping this is [`sgd_step`].
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// Rescale the whole gradient to at most this L2 norm before the update.
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

/// L2 norm of all gradients in `store`.
pub fn grad_norm<T: Scalar>(store: &ParamStore<T>) -> f64 {
    store.params.iter().flat_map(|p| p.grad.data()).map(|g| g.wide() * g.wide()).sum::<f64>().sqrt()
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self { lr, momentum, clip_norm: None, velocity: Vec::new() })
    }

    pub fn with_clip_norm(mut self, clip: Option<f64>) -> Result<Self> {
        if let Some(c) = clip {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        self.clip_norm = clip;
        Ok(self)
    }

    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let scale = match self.clip_norm {
            Some(c) => {
                let n = grad_norm(store);
                if n > c { c / n } else { 1.0 }
            }
            None => 1.0,
        };
        if self.momentum == 0.0 && scale == 1.0 {
            return sgd_step(store, self.lr);
        }
        if self.velocity.is_empty() {
            self.velocity = store.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        if self.velocity.len() != store.params.len() {
            return Err(Error::Contract("optimizer state belongs to a different parameter store".into()));
        }
        for (p, vel) in store.params.iter_mut().zip(&mut self.velocity) {
            for ((v, &g), m) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(vel.iter_mut()) {
                *m = self.momentum * *m + scale * g.wide();
                *v = T::lit(v.wide() - self.lr * *m);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_single_update() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::scalar(1.0));
        s.accumulate_grad(id, &[0.5]);
        sgd_step(&mut s, 0.01).unwrap();
        assert!((s.value(id).item().unwrap() - 0.995).abs() < 1e-15);
        assert_eq!(s.grad(id).item().unwrap(), 0.5);
    }

    #[test]
    fn zero_grad_leaves_value() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", Tensor::scalar(3.0));
        sgd_step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(id).item().unwrap(), 3.0);
        s.accumulate_grad(id, &[2.0]);
        s.zero_grad();
        assert_eq!(s.grad(id).item().unwrap(), 0.0);
    }

    #[test]
    fn non_positive_lr_rejected() {
        let mut s = ParamStore::<f32>::new();
        assert!(matches!(sgd_step(&mut s, 0.0), Err(Error::Config(_))));
        assert!(matches!(sgd_step(&mut s, -1.0), Err(Error::Config(_))));
        assert!(matches!(sgd_step(&mut s, f64::NAN), Err(Error::Config(_))));
    }

    #[test]
    fn clipping_rescales_to_threshold() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::zeros(&[2]));
        s.accumulate_grad(id, &[3.0, 4.0]);
        assert_eq!(grad_norm(&s), 5.0);
        let mut opt = Sgd::new(0.1, 0.0).unwrap().with_clip_norm(Some(1.0)).unwrap();
        opt.step(&mut s).unwrap();
        let v = s.value(id).data();
        assert!((v[0] + 0.06).abs() < 1e-15 && (v[1] + 0.08).abs() < 1e-15);
        assert!(Sgd::new(0.1, 0.0).unwrap().with_clip_norm(Some(0.0)).is_err());
    }

    #[test]
    fn clipping_ignores_small_gradients() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::zeros(&[2]));
        s.accumulate_grad(id, &[0.3, 0.4]);
        let mut opt = Sgd::new(1.0, 0.0).unwrap().with_clip_norm(Some(1.0)).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id).data(), &[-0.3, -0.4]);
    }

    #[test]
    fn load_reports_first_mismatch() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[2]));
        s.add("b", Tensor::zeros(&[3]));
        let err = s.load_values([("a", &[2usize][..], &[1.0, 2.0][..]), ("b", &[2usize][..], &[1.0, 2.0][..])]);
        match err {
            Err(Error::Load { param, .. }) => assert_eq!(param, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
