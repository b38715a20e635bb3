use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::layers::{NamedSlots, Slot};
use super::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [OptimizerKind::Sgd, OptimizerKind::Rmsprop, OptimizerKind::Adam];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }

    /// Display name used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "SGD",
            OptimizerKind::Rmsprop => "RMSprop",
            OptimizerKind::Adam => "Adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "rmsprop" => Ok(Self::Rmsprop),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer '{other}' (expected sgd, rmsprop or adam)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub rho: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerSettings {
    /// SGD momentum 0.9, RMSprop rho 0.9, Adam (0.9, 0.999), eps 1e-7.
    pub fn standard(kind: OptimizerKind) -> Self {
        Self {
            kind,
            momentum: 0.9,
            rho: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            weight_decay: 0.0,
        }
    }
}

/// First-order optimizer with per-parameter state keyed by parameter name.
pub struct Optimizer<T> {
    settings: OptimizerSettings,
    steps: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(settings: OptimizerSettings) -> Self {
        Self {
            settings,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn settings(&self) -> &OptimizerSettings {
        &self.settings
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with learning rate `lr` to every parameter
    /// that has a gradient. Buffers are ignored.
    pub fn step(&mut self, slots: &mut NamedSlots<'_, T>, lr: f64) {
        self.steps += 1;
        let s = self.settings;
        let lr_t = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(s.eps);
        let wd = T::from_f64_lossy(s.weight_decay);
        for (name, slot) in slots.iter_mut() {
            let Slot::Param(param) = slot else { continue };
            let Some(grad) = param.grad() else { continue };
            let mut g = grad.clone();
            if s.weight_decay != 0.0 {
                for (gv, &w) in g.data_mut().iter_mut().zip(param.value.data()) {
                    *gv += wd * w;
                }
            }
            let shape = g.shape().to_vec();
            match s.kind {
                OptimizerKind::Sgd => {
                    let mu = T::from_f64_lossy(s.momentum);
                    let v = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
                    for ((w, vv), &gv) in param.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vv = mu * *vv + gv;
                        *w -= lr_t * *vv;
                    }
                }
                OptimizerKind::Rmsprop => {
                    let rho = T::from_f64_lossy(s.rho);
                    let ms = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
                    for ((w, m), &gv) in param.value.data_mut().iter_mut().zip(ms.data_mut()).zip(g.data()) {
                        *m = rho * *m + (T::one() - rho) * gv * gv;
                        *w -= lr_t * gv / (m.sqrt() + eps);
                    }
                }
                OptimizerKind::Adam => {
                    let b1 = T::from_f64_lossy(s.beta1);
                    let b2 = T::from_f64_lossy(s.beta2);
                    let c1 = T::from_f64_lossy(1.0 - s.beta1.powf(self.steps as f64));
                    let c2 = T::from_f64_lossy(1.0 - s.beta2.powf(self.steps as f64));
                    let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
                    let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
                    for (((w, mm), vv), &gv) in param
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mm = b1 * *mm + (T::one() - b1) * gv;
                        *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                        let mhat = *mm / c1;
                        let vhat = *vv / c2;
                        *w -= lr_t * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }

    /// Moment tensors for persistence, as `first.<param>` / `second.<param>`.
    pub fn state_tensors(&self) -> BTreeMap<String, &Tensor<T>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.first {
            out.insert(format!("first.{k}"), v);
        }
        for (k, v) in &self.second {
            out.insert(format!("second.{k}"), v);
        }
        out
    }

    pub fn restore(&mut self, steps: u64, tensors: BTreeMap<String, Tensor<T>>) {
        self.steps = steps;
        self.first.clear();
        self.second.clear();
        for (k, v) in tensors {
            if let Some(rest) = k.strip_prefix("first.") {
                self.first.insert(rest.to_string(), v);
            } else if let Some(rest) = k.strip_prefix("second.") {
                self.second.insert(rest.to_string(), v);
            }
        }
    }
}
