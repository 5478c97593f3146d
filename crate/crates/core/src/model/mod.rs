//! Vision transformer with bottleneck adapters, patch masking and task heads.

mod config;
mod mask;
mod params;
mod vit;

use std::collections::BTreeMap;

pub use config::{ModelConfig, Task};
pub use mask::PatchMask;
pub use params::{BoundParams, Group, GroupSet, Param, ParamStore};
pub use vit::{argmax_rows, Model, StudentPass, LN_EPS};

/// Exact scalar count per parameter group.
pub fn count_params(params: &ParamStore) -> BTreeMap<Group, usize> {
    params.count_by_group()
}

/// Adapter share of all parameters.
pub fn adapter_fraction(params: &ParamStore) -> f64 {
    let counts = count_params(params);
    let total: usize = counts.values().sum();
    if total == 0 {
        return 0.0;
    }
    counts[&Group::Adapter] as f64 / total as f64
}
