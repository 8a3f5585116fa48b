use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Named trainable parameters. Names are stable, dot-separated paths such as
/// `cascades.3.enc1.crnn.conv_x.weight`.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn insert(&mut self, name: String, value: Tensor) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(Error::validation(format!("duplicate parameter '{name}'")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    /// Swaps in a new variable under an existing name (used when a layer is
    /// resized).
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = var;
                Ok(())
            }
            None => Err(Error::validation(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

/// Hierarchical parameter builder with seeded initialization.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl AsRef<str>) -> Builder<'_> {
        let prefix = self.path(name.as_ref());
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    /// Uniform `[-bound, bound]` initialization.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|_| if bound > 0.0 { self.rng.random_range(-bound..bound) } else { 0.0 })
            .collect();
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?;
        let path = self.path(name);
        self.store.insert(path, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        self.uniform(name, shape, 0.0)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn store(&mut self) -> &mut ParamStore {
        self.store
    }
}
