//! Analytic gradients against central finite differences (step 1e-5).

mod common;

use common::gradcheck::{composed_error, primitive_errors, TOL};
use hybrid_tta::model::{Model, ModelConfig};

#[test]
fn primitives_match_finite_differences() {
    for (name, worst) in primitive_errors() {
        assert!(worst <= TOL, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn composed_multitask_loss_matches_finite_differences() {
    let (worst, at, checked) = composed_error();
    let model = Model::new(ModelConfig::tiny()).unwrap();
    assert_eq!(checked, model.init_params(0).total_count());
    assert!(worst <= TOL, "worst relative error {worst:e} at {at}");
}
