//! Deterministic discrete-event simulation of a traced multi-node platform.

mod engine;
mod spec;

pub use engine::{run_workload, GroundTruth, Manifest, ManifestRequest, RequestTruth, SimOutput};
pub use spec::{ComponentSpec, FaultSpec, NodeSpec, RequestTypeSpec, RunSpec, SpecError, Step, WorkloadSpec, DISK_CALLS};

/// Workload files shipped with the crate, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("mixed", include_str!("../../workloads/mixed.toml")),
    ("hadoop", include_str!("../../workloads/hadoop.toml")),
    ("param_server", include_str!("../../workloads/param_server.toml")),
    ("bulk_copy", include_str!("../../workloads/bulk_copy.toml")),
];

/// Parses a bundled workload.
pub fn bundled(name: &str) -> Option<WorkloadSpec> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| WorkloadSpec::from_toml(text).expect("bundled workloads are valid"))
}

#[cfg(test)]
mod tests;
