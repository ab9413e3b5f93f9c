//! Named experiments, shipped as configs.

const EXPERIMENTS: &[(&str, &str)] = &[
    ("synchronous-1d-optimality", include_str!("../experiments/synchronous-1d-optimality.toml")),
    ("closed-form-d1", include_str!("../experiments/closed-form-d1.toml")),
    ("closed-form-d2", include_str!("../experiments/closed-form-d2.toml")),
    ("rotation-invariance", include_str!("../experiments/rotation-invariance.toml")),
    ("tanaka", include_str!("../experiments/tanaka.toml")),
    ("rho-recovery", include_str!("../experiments/rho-recovery.toml")),
    ("rotation-chop-density", include_str!("../experiments/rotation-chop-density.toml")),
    ("kernel-infeasibility", include_str!("../experiments/kernel-infeasibility.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    EXPERIMENTS.iter().map(|(n, _)| *n)
}

pub fn get(name: &str) -> Option<&'static str> {
    EXPERIMENTS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}
