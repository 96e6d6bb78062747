//! Deterministic parameter creation and loading.
//!
//! candle's own `VarBuilder` init path draws from a thread-local RNG, which
//! would break the seed-reproducibility contract, so parameters are sampled
//! here from an explicit stream. The same builder serves four cases: fresh
//! trainable weights, fresh frozen weights (fast inference without graph
//! tracking), weights loaded from a checkpoint as trainable (student
//! initialized from teacher), and loaded frozen (the teacher itself).

use crate::error::{Error, Result};
use crate::rng::ChaCha12Rng;
use candle_core::{Device, Tensor, Var};
use candle_nn::VarMap;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

#[derive(Debug, Clone, Copy)]
pub enum ParamInit {
    /// Normal(0, std^2) truncated to two standard deviations (resampled).
    TruncNormal(f64),
    /// Plain Normal(0, std^2).
    Normal(f64),
    Const(f64),
}

impl ParamInit {
    fn sample(&self, n: usize, rng: &mut ChaCha12Rng) -> Vec<f32> {
        use rand_distr::{Distribution, StandardNormal};
        match *self {
            ParamInit::Const(c) => vec![c as f32; n],
            ParamInit::Normal(std) => super::normal_vec(rng, n, 0.0, std as f32),
            ParamInit::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f32 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break z * std as f32;
                    }
                })
                .collect(),
        }
    }
}

enum Source {
    Fresh { map: VarMap, rng: RefCell<ChaCha12Rng> },
    FreshFrozen { rng: RefCell<ChaCha12Rng> },
    Loaded { tensors: HashMap<String, Tensor>, map: Option<VarMap> },
}

struct State {
    source: Source,
    device: Device,
}

/// Hierarchical parameter builder; `pp` extends the name prefix like
/// candle's `VarBuilder`.
#[derive(Clone)]
pub struct ParamBuilder {
    state: Rc<State>,
    prefix: String,
}

impl ParamBuilder {
    /// Fresh trainable parameters registered in a `VarMap`, sampled from `rng`.
    pub fn fresh(rng: ChaCha12Rng, device: &Device) -> Self {
        Self::from_state(Source::Fresh { map: VarMap::new(), rng: RefCell::new(rng) }, device)
    }

    /// Fresh parameters as plain tensors: no gradient tracking, no registry.
    pub fn fresh_frozen(rng: ChaCha12Rng, device: &Device) -> Self {
        Self::from_state(Source::FreshFrozen { rng: RefCell::new(rng) }, device)
    }

    /// Parameters taken by name from `tensors`; `trainable` re-registers each
    /// as a fresh `Var` (copy), otherwise they stay frozen constants.
    pub fn loaded(tensors: HashMap<String, Tensor>, trainable: bool, device: &Device) -> Self {
        let map = trainable.then(VarMap::new);
        Self::from_state(Source::Loaded { tensors, map }, device)
    }

    fn from_state(source: Source, device: &Device) -> Self {
        ParamBuilder {
            state: Rc::new(State { source, device: device.clone() }),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder { state: Rc::clone(&self.state), prefix }
    }

    pub fn device(&self) -> &Device {
        &self.state.device
    }

    /// The var map holding every trainable parameter created so far, if any.
    pub fn varmap(&self) -> Option<&VarMap> {
        match &self.state.source {
            Source::Fresh { map, .. } => Some(map),
            Source::Loaded { map, .. } => map.as_ref(),
            Source::FreshFrozen { .. } => None,
        }
    }

    /// Create or fetch the parameter `name` with the given shape.
    pub fn take(&self, name: &str, shape: &[usize], init: ParamInit) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let n: usize = shape.iter().product();
        match &self.state.source {
            Source::Fresh { map, rng } => {
                let data = init.sample(n, &mut rng.borrow_mut());
                let t = Tensor::from_vec(data, shape, &self.state.device)?;
                let var = Var::from_tensor(&t)?;
                let out = var.as_tensor().clone();
                map.data().lock().unwrap().insert(full, var);
                Ok(out)
            }
            Source::FreshFrozen { rng } => {
                let data = init.sample(n, &mut rng.borrow_mut());
                Ok(Tensor::from_vec(data, shape, &self.state.device)?)
            }
            Source::Loaded { tensors, map } => {
                let t = tensors.get(&full).ok_or_else(|| {
                    Error::Checkpoint(format!("missing weight `{full}` in checkpoint"))
                })?;
                if t.dims() != shape {
                    return Err(Error::Checkpoint(format!(
                        "weight `{full}` has shape {:?}, expected {:?}",
                        t.dims(),
                        shape
                    )));
                }
                match map {
                    Some(map) => {
                        let var = Var::from_tensor(t)?;
                        let out = var.as_tensor().clone();
                        map.data().lock().unwrap().insert(full, var);
                        Ok(out)
                    }
                    None => Ok(t.clone()),
                }
            }
        }
    }
}
