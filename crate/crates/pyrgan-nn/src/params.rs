//! Named trainable parameters with their Adam moment buffers.
//!
//! A [`ParamSet`] owns everything an optimizer needs; graphs borrow values by
//! [`ParamRef`] and deposit gradients back by the same handle. Export/import
//! round-trips every tensor (values and moments) by name so training can
//! resume bit-for-bit.

use crate::Arr4;

/// Stable handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamRef(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Arr4,
    /// First-moment Adam buffer.
    pub m: Arr4,
    /// Second-moment Adam buffer.
    pub v: Arr4,
}

/// A named collection of trainable tensors plus the optimizer step counter.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    /// Number of Adam steps taken (the bias-correction exponent).
    pub step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under `name`. Names must be unique within the set.
    pub fn register(&mut self, name: impl Into<String>, value: Arr4) -> ParamRef {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name:?}"
        );
        let m = Arr4::zeros(value.raw_dim());
        let v = Arr4::zeros(value.raw_dim());
        self.params.push(Param { name, value, m, v });
        ParamRef(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, r: ParamRef) -> &Param {
        &self.params[r.0]
    }

    pub fn get_mut(&mut self, r: ParamRef) -> &mut Param {
        &mut self.params[r.0]
    }

    pub fn value(&self, r: ParamRef) -> &Arr4 {
        &self.params[r.0].value
    }

    pub fn refs(&self) -> impl Iterator<Item = ParamRef> + '_ {
        (0..self.params.len()).map(ParamRef)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamRef> {
        self.params.iter().position(|p| p.name == name).map(ParamRef)
    }

    /// Zeroes all moment buffers and the step counter, as when a freshly
    /// copied network starts its own optimization.
    pub fn reset_optimizer(&mut self) {
        for p in &mut self.params {
            p.m.fill(0.0);
            p.v.fill(0.0);
        }
        self.step = 0;
    }

    /// Flattens to `(name, tensor)` pairs: `<name>` for values, plus
    /// `<name>.m` / `<name>.v` moment buffers, plus a 1-element `.step`.
    pub fn export_tensors(&self) -> Vec<(String, Arr4)> {
        let mut out = Vec::with_capacity(self.params.len() * 3 + 1);
        for p in &self.params {
            out.push((p.name.clone(), p.value.clone()));
            out.push((format!("{}.m", p.name), p.m.clone()));
            out.push((format!("{}.v", p.name), p.v.clone()));
        }
        let mut step = Arr4::zeros((1, 1, 1, 1));
        step[[0, 0, 0, 0]] = self.step as f64;
        out.push((".step".to_string(), step));
        out
    }

    /// Restores values and moments from [`export_tensors`](Self::export_tensors)
    /// output. Every registered parameter must be present with its exact shape.
    pub fn import_tensors(&mut self, tensors: &[(String, Arr4)]) -> Result<(), String> {
        let lookup = |name: &str| -> Result<&Arr4, String> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| format!("missing tensor {name:?}"))
        };
        for p in &mut self.params {
            for (label, slot) in [("", 0usize), (".m", 1), (".v", 2)] {
                let t = lookup(&format!("{}{}", p.name, label))?;
                let dst = match slot {
                    0 => &mut p.value,
                    1 => &mut p.m,
                    _ => &mut p.v,
                };
                if t.raw_dim() != dst.raw_dim() {
                    return Err(format!(
                        "shape mismatch for {:?}: stored {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        dst.shape()
                    ));
                }
                dst.assign(t);
            }
        }
        self.step = lookup(".step")?[[0, 0, 0, 0]] as u64;
        Ok(())
    }
}
