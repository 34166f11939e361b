//! Shared fixtures for the benchmarks.

use varphylo::seq_io::{encode, EncodedAlignment};
use varphylo::simulator::simulate;
use varphylo::{SimulationSpec, SubstitutionParams};

pub const GTR: SubstitutionParams =
    SubstitutionParams::Gtr { rho: [0.3, 0.06, 0.08, 0.1, 0.06, 0.4], pi: [0.1, 0.2, 0.3, 0.4] };

/// Five-taxon GTR alignment of `n_sites` columns.
pub fn gtr_alignment(n_sites: usize) -> EncodedAlignment {
    let spec = SimulationSpec { params: GTR, branch_lengths: vec![0.05, 0.1, 0.2, 0.3, 0.45], n_sites, seed: 1 };
    encode(&simulate(&spec).expect("valid spec").alignment)
}
