use std::collections::BTreeMap;

use super::{Gradients, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients keyed by parameter name.
pub type GradMap<T = f32> = BTreeMap<String, Tensor<T>>;

/// One trainable tensor with its Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.dims().to_vec());
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
        }
    }
}

/// Named parameter set of one network plus its optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T: Scalar = f32> {
    entries: BTreeMap<String, Param<T>>,
    step: u64,
}

/// Sign of an optimizer update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Move along the gradient (maximize).
    Ascend,
    /// Move against the gradient (minimize).
    Descend,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            step: 0,
        }
    }

    /// Adds a parameter with zeroed moments. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, Param::new(value));
        Ok(())
    }

    pub fn insert_param(&mut self, name: impl Into<String>, param: Param<T>) -> Result<()> {
        let name = name.into();
        let dims = param.value.dims();
        if param.first_moment.dims() != dims || param.second_moment.dims() != dims {
            return Err(Error::Contract(format!(
                "moment dims disagree with parameter `{name}`"
            )));
        }
        if self.entries.insert(name.clone(), param).is_some() {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            first_moment: p.first_moment.cast(),
                            second_moment: p.second_moment.cast(),
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Binding<'t, T> {
        Binding {
            vars: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), tape.leaf(p.value.clone())))
                .collect(),
        }
    }

    /// Registers every parameter as a constant on `tape`.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Binding<'t, T> {
        Binding {
            vars: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), tape.constant(p.value.clone())))
                .collect(),
        }
    }

    /// One bias-corrected Adam update. `Ascend` adds the step, `Descend`
    /// subtracts it; moments are updated identically in both cases.
    pub fn adam_step(&mut self, grads: &GradMap<T>, direction: Direction, cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.entries.len() || grads.keys().any(|k| !self.entries.contains_key(k)) {
            let missing = self
                .entries
                .keys()
                .find(|k| !grads.contains_key(*k))
                .or_else(|| grads.keys().find(|k| !self.entries.contains_key(*k)));
            return Err(Error::Contract(format!(
                "gradient keys do not match parameters (first difference: {})",
                missing.map(String::as_str).unwrap_or("?")
            )));
        }
        for (name, p) in &self.entries {
            if grads[name].dims() != p.value.dims() {
                return Err(Error::Contract(format!(
                    "gradient for `{name}` has dims {:?}, parameter has {:?}",
                    grads[name].dims(),
                    p.value.dims()
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let sign = match direction {
            Direction::Ascend => 1.0,
            Direction::Descend => -1.0,
        };
        for (name, p) in self.entries.iter_mut() {
            let g = grads[name].data();
            let Param {
                value,
                first_moment,
                second_moment,
            } = p;
            for (((w, m), v), &gi) in value
                .data_mut()
                .iter_mut()
                .zip(first_moment.data_mut())
                .zip(second_moment.data_mut())
                .zip(g)
            {
                let gi = gi.as_f64();
                let m_new = cfg.beta1 * m.as_f64() + (1.0 - cfg.beta1) * gi;
                let v_new = cfg.beta2 * v.as_f64() + (1.0 - cfg.beta2) * gi * gi;
                *m = T::from_f64(m_new);
                *v = T::from_f64(v_new);
                let update = cfg.lr * (m_new / bc1) / ((v_new / bc2).sqrt() + cfg.eps);
                *w = T::from_f64(w.as_f64() + sign * update);
            }
        }
        Ok(())
    }
}

/// Parameters of one [`ModelParams`] registered on a tape.
#[derive(Debug)]
pub struct Binding<'t, T: Scalar = f32> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Binding<'t, T> {
    /// Binding over already-registered vars, e.g. leaves of a gradient check.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<'t, T>)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    /// The same parameters cut off from gradient flow: they still shape the
    /// forward pass but their leaves receive nothing.
    pub fn detached(&self) -> Self {
        Self {
            vars: self.vars.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
        }
    }

    /// Gradient of every bound parameter, keyed by name.
    pub fn gradients(&self, grads: &Gradients<T>) -> GradMap<T> {
        self.vars.iter().map(|(k, v)| (k.clone(), grads.wrt(v))).collect()
    }
}
