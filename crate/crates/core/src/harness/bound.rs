//! Checks the variational upper bound on mutual information over random
//! discrete channels.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::complexity::{exact_mutual_information, variational_bound_discrete, DiscreteChannel, PriorSpec};
use crate::error::{Error, Result};

pub const BOUND_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    Uniform,
    Marginal,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub trial: usize,
    pub states: usize,
    pub symbols: usize,
    pub prior: PriorKind,
    pub exact_mi: f64,
    pub bound: f64,
    /// `bound − exact_mi`.
    pub gap: f64,
}

impl BoundRow {
    pub fn violates(&self) -> bool {
        self.gap < -BOUND_TOLERANCE || (self.prior == PriorKind::Marginal && self.gap.abs() > BOUND_TOLERANCE)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.violates()).count()
    }

    /// Smallest `bound − MI` over all rows.
    pub fn worst_gap(&self) -> f64 {
        self.rows.iter().map(|r| r.gap).fold(f64::INFINITY, f64::min)
    }

    /// Largest `|bound − MI|` under the marginal prior.
    pub fn max_marginal_gap(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.prior == PriorKind::Marginal)
            .map(|r| r.gap.abs())
            .fold(0.0, f64::max)
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "trial\tstates\tsymbols\tprior\texact_mi\tbound\tgap")?;
        for r in &self.rows {
            let prior = match r.prior {
                PriorKind::Uniform => "uniform",
                PriorKind::Marginal => "marginal",
                PriorKind::Random => "random",
            };
            writeln!(
                w,
                "{}\t{}\t{}\t{prior}\t{:.15e}\t{:.15e}\t{:.6e}",
                r.trial, r.states, r.symbols, r.exact_mi, r.bound, r.gap
            )?;
        }
        Ok(())
    }
}

/// A Dirichlet(1, …, 1) draw; entries are strictly positive.
fn simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1).max(f64::MIN_POSITIVE)).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// `trials` random channels with `|S| ≤ max_states` and `|C| ≤ max_symbols`,
/// each scored under uniform, marginal and random priors.
pub fn verify_bound(trials: usize, max_states: usize, max_symbols: usize, seed: u64) -> Result<BoundReport> {
    if trials == 0 || max_states == 0 || max_symbols == 0 {
        return Err(Error::InvalidArgument(
            "trials, max_states and max_symbols must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(3 * trials);
    for trial in 0..trials {
        let states = rng.random_range(max_states.min(2)..=max_states);
        let symbols = rng.random_range(max_symbols.min(2)..=max_symbols);
        let source = simplex(&mut rng, states);
        let conditional = (0..states).map(|_| simplex(&mut rng, symbols)).collect();
        let channel = DiscreteChannel::new(source, conditional)?;
        let exact_mi = exact_mutual_information(&channel);
        let priors = [
            (PriorKind::Uniform, vec![1.0 / symbols as f64; symbols]),
            (PriorKind::Marginal, channel.marginal()),
            (PriorKind::Random, simplex(&mut rng, symbols)),
        ];
        for (prior, q) in priors {
            let bound = variational_bound_discrete(&channel, &PriorSpec::Discrete(q))?;
            rows.push(BoundRow {
                trial,
                states,
                symbols,
                prior,
                exact_mi,
                bound,
                gap: bound - exact_mi,
            });
        }
    }
    Ok(BoundReport { rows })
}
