//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use flowlab_core::{Component, GaussianMixture, MarginalFamily, ProductMixture, Schedule, ScoreField, Target};

pub fn bimodal_1d() -> GaussianMixture {
    GaussianMixture::new(
        1,
        &[Component::new(0.3, vec![-2.0], 0.25), Component::new(0.7, vec![1.5], 0.25)],
    )
    .expect("valid mixture")
}

pub fn exact_field(target: Target, steps: usize) -> ScoreField {
    let schedule = Arc::new(Schedule::new(steps, 2.0, 4.0).expect("valid schedule"));
    ScoreField::exact(Arc::new(MarginalFamily::new(target, schedule)))
}

pub fn product(dim: usize) -> Target {
    ProductMixture::replicate(bimodal_1d(), dim).expect("valid product").into()
}

pub fn dense_2d() -> Target {
    GaussianMixture::new(
        2,
        &[
            Component::new(0.5, vec![1.0, 0.0], 0.4),
            Component::new(0.5, vec![-1.0, 0.5], 0.4),
        ],
    )
    .expect("valid mixture")
    .into()
}
