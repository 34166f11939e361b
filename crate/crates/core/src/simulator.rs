//! Star-tree sequence simulation and the exact log likelihood given the
//! true ancestor.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seq_io::{Alignment, ALPHABET};
use crate::subst::{build_rate_matrix, transition_matrix, SubstitutionParams, TransitionMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub params: SubstitutionParams,
    /// One per leaf (M ≥ 2).
    pub branch_lengths: Vec<f64>,
    pub n_sites: usize,
    pub seed: u64,
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.branch_lengths.len() < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 branches, got {}", self.branch_lengths.len())));
        }
        if let Some(b) = self.branch_lengths.iter().find(|&&b| !(b >= 0.0) || !b.is_finite()) {
            return Err(Error::InvalidSpec(format!("branch lengths must be non-negative, got {b}")));
        }
        if self.n_sites == 0 {
            return Err(Error::InvalidSpec("n_sites must be at least 1".into()));
        }
        Ok(())
    }

    pub fn n_sequences(&self) -> usize {
        self.branch_lengths.len()
    }

    fn transitions(&self) -> Result<Vec<TransitionMatrix>> {
        let d = build_rate_matrix(&self.params)?;
        self.branch_lengths.iter().map(|&b| transition_matrix(&d, b)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    /// Root state index per site.
    pub root: Vec<u8>,
    /// Leaves named `seq1..seqM`.
    pub alignment: Alignment,
    pub spec: SimulationSpec,
}

impl SimulatedDataset {
    pub fn root_sequence(&self) -> String {
        self.root.iter().map(|&s| ALPHABET[s as usize] as char).collect()
    }
}

/// Draws a root from π and each leaf from the root's row of P(b_m).
pub fn simulate(spec: &SimulationSpec) -> Result<SimulatedDataset> {
    spec.validate()?;
    let transitions = spec.transitions()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let root_dist = WeightedIndex::new(spec.params.pi()).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let rows: Vec<[WeightedIndex<f64>; 4]> = transitions
        .iter()
        .map(|t| {
            let make = |a: usize| WeightedIndex::new(t.p[a]).map_err(|e| Error::InvalidSpec(e.to_string()));
            Ok([make(0)?, make(1)?, make(2)?, make(3)?])
        })
        .collect::<Result<_>>()?;

    let root: Vec<u8> = (0..spec.n_sites).map(|_| root_dist.sample(&mut rng) as u8).collect();
    let mut leaves = vec![String::with_capacity(spec.n_sites); spec.n_sequences()];
    for &a in &root {
        for (leaf, dists) in leaves.iter_mut().zip(&rows) {
            leaf.push(ALPHABET[dists[a as usize].sample(&mut rng)] as char);
        }
    }
    let names = (1..=spec.n_sequences()).map(|m| format!("seq{m}")).collect();
    Ok(SimulatedDataset { root, alignment: Alignment::new(names, leaves)?, spec: spec.clone() })
}

/// `Σ_n Σ_m ln P(b_m)[root_n, x_nm]` under the dataset's own parameters.
pub fn true_log_likelihood(d: &SimulatedDataset) -> Result<f64> {
    let transitions = d.spec.transitions()?;
    if d.alignment.n_sequences() != transitions.len() || d.alignment.n_sites() != d.root.len() {
        return Err(Error::InvalidAlignment("dataset does not match its spec".into()));
    }
    let mut total = 0.0;
    for (row, t) in d.alignment.rows().iter().zip(&transitions) {
        for (&a, c) in d.root.iter().zip(row.bytes()) {
            let x = crate::seq_io::state_index(c).expect("validated alignment");
            total += t.p[a as usize][x].ln();
        }
    }
    Ok(total)
}
