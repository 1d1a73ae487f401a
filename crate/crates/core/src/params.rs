//! Named parameter storage with seeded, order-independent initialization.
//!
//! Every parameter gets its own ChaCha8 stream derived from the store seed and
//! the parameter's full name, so the values do not depend on construction order.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Names ending with one of these are buffers, not trainable parameters.
const BUFFER_SUFFIXES: [&str; 2] = ["running_mean", "running_var"];

#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("len", &self.vars.lock().unwrap().len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    /// All variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.vars()
            .into_iter()
            .filter(|(name, _)| !BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s)))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable_vars()
            .iter()
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    /// Detached copies of every tensor, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites every stored variable from `tensors`. All names must be present
    /// with matching shapes; extra entries are rejected too.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let vars = self.vars.lock().unwrap();
        if let Some(extra) = tensors.keys().find(|k| !vars.contains_key(*k)) {
            return Err(Error::Shape(format!("unexpected parameter `{extra}`")));
        }
        for (name, var) in vars.iter() {
            let value = tensors
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))?;
            if value.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.dims(),
                    var.dims()
                )));
            }
            var.set(&value.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// Frozen (non-tracking) tensors suitable for `VarBuilder::from_tensors`.
    pub fn frozen_tensors(&self) -> Result<HashMap<String, Tensor>> {
        Ok(self.snapshot()?.into_iter().collect())
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        // FNV-1a of the name, mixed with the store seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(h ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    fn init_values(&self, name: &str, shape: &Shape, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = self.rng_for(name);
        let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> f64 {
            let s: f64 = StandardNormal.sample(rng);
            mean + std * s
        };
        match init {
            Init::Const(c) => vec![c; n],
            Init::Randn { mean, stdev } => (0..n).map(|_| normal(&mut rng, mean, stdev)).collect(),
            Init::Uniform { lo, up } => (0..n).map(|_| rng.gen_range(lo..=up)).collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => (0..n).map(|_| normal(&mut rng, 0.0, std)).collect(),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                    }
                }
            }
        }
    }
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        if let Some(var) = self.vars.lock().unwrap().get(name) {
            if var.shape() != &s {
                candle_core::bail!(
                    "shape mismatch for {name}: stored {:?}, requested {:?}",
                    var.shape(),
                    s
                );
            }
            return Ok(var.as_tensor().clone());
        }
        let values = self.init_values(name, &s, h);
        let tensor = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        self.vars.lock().unwrap().insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.vars.lock().unwrap().get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("no parameter named {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars.lock().unwrap().contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_independent_of_creation_order() {
        let dev = Device::Cpu;
        let a = ParamStore::new(3);
        let b = ParamStore::new(3);
        let va = a.var_builder(DType::F32, &dev);
        let vb = b.var_builder(DType::F32, &dev);
        let x1 = va.get_with_hints((4, 5), "x", candle_nn::init::DEFAULT_KAIMING_NORMAL).unwrap();
        let _ = va.get_with_hints(3, "y", Init::Const(1.0)).unwrap();
        let _ = vb.get_with_hints(3, "y", Init::Const(1.0)).unwrap();
        let x2 = vb.get_with_hints((4, 5), "x", candle_nn::init::DEFAULT_KAIMING_NORMAL).unwrap();
        let d = (x1 - x2).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn different_seeds_give_different_values() {
        let dev = Device::Cpu;
        let a = ParamStore::new(1).var_builder(DType::F64, &dev);
        let b = ParamStore::new(2).var_builder(DType::F64, &dev);
        let x = a.get_with_hints(16, "w", Init::Randn { mean: 0., stdev: 1. }).unwrap();
        let y = b.get_with_hints(16, "w", Init::Randn { mean: 0., stdev: 1. }).unwrap();
        let d = (x - y).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dev = Device::Cpu;
        let s = ParamStore::new(0);
        let _ = s.var_builder(DType::F32, &dev).get(3, "a").unwrap();
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Tensor::zeros(4, DType::F32, &dev).unwrap());
        assert!(matches!(s.load(&m), Err(Error::Shape(_))));
    }

    #[test]
    fn buffers_are_not_trainable() {
        let dev = Device::Cpu;
        let s = ParamStore::new(0);
        let vb = s.var_builder(DType::F32, &dev);
        let _ = vb.get(3, "bn.weight").unwrap();
        let _ = vb.get(3, "bn.running_mean").unwrap();
        assert_eq!(s.trainable_vars().len(), 1);
        assert_eq!(s.num_parameters(), 3);
    }
}
