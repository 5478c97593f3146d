use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{GroupSet, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// First-order optimizer with group-filtered steps.
///
/// Adam moments are kept per parameter name and shared by every filter that
/// touches the parameter; the bias-correction counter advances only when the
/// parameter is actually updated.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            moments: BTreeMap::new(),
        }
    }

    pub fn sgd() -> Self {
        Self::new(OptimizerKind::Sgd)
    }

    pub fn adam() -> Self {
        Self::new(OptimizerKind::default())
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Updates parameters whose group is in `filter`, then clears every gradient.
    pub fn step(&mut self, params: &mut ParamStore, filter: GroupSet, lr: f64) -> Result<()> {
        if filter.is_empty() {
            return Err(Error::InvalidArgument(
                "optimizer step with an empty group filter".into(),
            ));
        }
        for (name, param) in params.iter_mut() {
            if !filter.contains(param.group) {
                continue;
            }
            let Some(grad) = param.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let values = param.tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in values.iter_mut().zip(&grad) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let slot = self
                        .moments
                        .entry(name.to_string())
                        .or_insert_with(|| Moments {
                            m: vec![0.0; grad.len()],
                            v: vec![0.0; grad.len()],
                            step: 0,
                        });
                    slot.step += 1;
                    let c1 = 1.0 - beta1.powi(slot.step as i32);
                    let c2 = 1.0 - beta2.powi(slot.step as i32);
                    for (j, (w, g)) in values.iter_mut().zip(&grad).enumerate() {
                        slot.m[j] = beta1 * slot.m[j] + (1.0 - beta1) * g;
                        slot.v[j] = beta2 * slot.v[j] + (1.0 - beta2) * g * g;
                        let mhat = slot.m[j] / c1;
                        let vhat = slot.v[j] / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: "optimizer_step",
                });
            }
        }
        params.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Tensor;
    use crate::model::Group;

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::full(&[1], 1.0), Group::Backbone)
            .unwrap();
        p.insert("a", Tensor::full(&[1], 1.0), Group::Adapter)
            .unwrap();
        p.get_mut("w").unwrap().accumulate_grad(&[2.0]).unwrap();
        p.get_mut("a").unwrap().accumulate_grad(&[-3.0]).unwrap();
        p
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = store();
        Optimizer::sgd().step(&mut p, GroupSet::all(), 0.1).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.8).abs() < 1e-15);
        assert!(p.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn filter_isolates_groups() {
        let mut p = store();
        let before = p.group_bytes(GroupSet::only(Group::Backbone));
        Optimizer::adam()
            .step(&mut p, GroupSet::only(Group::Adapter), 0.1)
            .unwrap();
        assert_eq!(before, p.group_bytes(GroupSet::only(Group::Backbone)));
        assert_ne!(p.get("a").unwrap().data()[0], 1.0);
        // grads cleared for all, including the filtered-out group
        assert!(p.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = store();
        Optimizer::adam()
            .step(&mut p, GroupSet::all(), 0.01)
            .unwrap();
        // w - lr * g / (|g| + eps)
        let expect_w = 1.0 - 0.01 * 2.0 / (2.0 + 1e-8);
        let expect_a = 1.0 + 0.01 * 3.0 / (3.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expect_w).abs() < 1e-15);
        assert!((p.get("a").unwrap().data()[0] - expect_a).abs() < 1e-15);
    }

    #[test]
    fn empty_filter_is_an_error() {
        let mut p = store();
        assert!(Optimizer::sgd()
            .step(&mut p, GroupSet::empty(), 0.1)
            .is_err());
    }
}
