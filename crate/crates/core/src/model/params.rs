use crate::error::{Error, Result};
use crate::numerics::{Init, Tape, Tensor, Var};

/// Ordered, named parameter tensors of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// SplitMix64 step; derives independent per-parameter seeds.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        self.tensors.len() - 1
    }

    /// Appends a `N(0, std²)` parameter seeded from `(seed, index)`.
    pub(crate) fn push_normal(&mut self, name: &str, shape: &[usize], seed: u64, std: f64) -> Result<usize> {
        let init = Init::Normal {
            seed: mix_seed(seed, self.len() as u64),
            mean: 0.0,
            std,
        };
        Ok(self.push(name, Tensor::new(shape, init)?))
    }

    pub(crate) fn push_value(&mut self, name: &str, shape: &[usize], value: f64) -> Result<usize> {
        Ok(self.push(name, Tensor::new(shape, Init::Value(value))?))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`, as a differentiable leaf when
    /// `trainable`, otherwise as a constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                let t = t.clone().with_requires_grad(false);
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    /// Adds the gradients `backward` left on `tape` into each parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &[Var]) -> Result<()> {
        if vars.len() != self.tensors.len() {
            return Err(Error::shape(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.tensors.len()
            )));
        }
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces every value with a fresh `N(0, std²)` draw. Used to probe
    /// gradients away from the structured initialisation.
    pub fn randomize(&mut self, seed: u64, std: f64) -> Result<()> {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            let fresh = Tensor::new(
                t.shape(),
                Init::Normal {
                    seed: mix_seed(seed, i as u64),
                    mean: 0.0,
                    std,
                },
            )?;
            t.data_mut().copy_from_slice(fresh.data());
        }
        Ok(())
    }

    /// Copies values from `other`, which must have identical names and
    /// shapes.
    pub fn load_values(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::shape("parameter names differ"));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape(format!(
                    "parameter shape {:?} != {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
