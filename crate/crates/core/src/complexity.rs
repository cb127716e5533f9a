//! Description-length machinery: exact mutual information of discrete
//! channels, the expected-KL variational upper bound, the closed-form Gaussian
//! KL used as the training regularizer, and the information-bottleneck
//! Lagrangian. All quantities are in nats.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::GaussianPosterior;

const SUM_TOLERANCE: f64 = 1e-12;

/// Source distribution `p(s)` and row-stochastic conditional `p(c|s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteChannel {
    source: Vec<f64>,
    conditional: Vec<Vec<f64>>,
}

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution(format!("{what} is empty")));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidDistribution(format!(
            "{what} sums to {total}, not 1"
        )));
    }
    Ok(())
}

impl DiscreteChannel {
    pub fn new(source: Vec<f64>, conditional: Vec<Vec<f64>>) -> Result<Self> {
        check_distribution("source", &source)?;
        if conditional.len() != source.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} conditional rows for {} source states",
                conditional.len(),
                source.len()
            )));
        }
        let width = conditional[0].len();
        for (s, row) in conditional.iter().enumerate() {
            if row.len() != width {
                return Err(Error::InvalidDistribution(format!(
                    "conditional row {s} has {} symbols, expected {width}",
                    row.len()
                )));
            }
            check_distribution(&format!("conditional row {s}"), row)?;
        }
        Ok(Self {
            source,
            conditional,
        })
    }

    pub fn source(&self) -> &[f64] {
        &self.source
    }

    pub fn conditional(&self) -> &[Vec<f64>] {
        &self.conditional
    }

    pub fn states(&self) -> usize {
        self.source.len()
    }

    pub fn symbols(&self) -> usize {
        self.conditional[0].len()
    }

    /// `p(c) = Σ_s p(s) p(c|s)`.
    pub fn marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.symbols()];
        for (ps, row) in self.source.iter().zip(&self.conditional) {
            for (mc, pcs) in m.iter_mut().zip(row) {
                *mc += ps * pcs;
            }
        }
        m
    }
}

/// Plain-text form: `|S| |C|`, then `p(s)`, then `|S|` rows of `p(c|s)`.
impl FromStr for DiscreteChannel {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate();
        let parse_line = |(n, line): (usize, &str)| -> Result<Vec<f64>> {
            line.split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|e| {
                        Error::InvalidDistribution(format!("line {}: `{t}`: {e}", n + 1))
                    })
                })
                .collect()
        };
        let missing = |what: &str| Error::InvalidDistribution(format!("missing {what}"));

        let header = lines.next().ok_or_else(|| missing("header line"))?;
        let dims: Vec<usize> = header
            .1
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|e| Error::InvalidDistribution(format!("line 1: `{t}`: {e}")))
            })
            .collect::<Result<_>>()?;
        let [states, symbols] = dims[..] else {
            return Err(Error::InvalidDistribution(
                "line 1: expected `|S| |C|`".into(),
            ));
        };
        let source = parse_line(lines.next().ok_or_else(|| missing("source line"))?)?;
        if source.len() != states {
            return Err(Error::InvalidDistribution(format!(
                "source has {} entries, header says {states}",
                source.len()
            )));
        }
        let mut conditional = Vec::with_capacity(states);
        for s in 0..states {
            let row = parse_line(lines.next().ok_or_else(|| missing(&format!("row {s}")))?)?;
            if row.len() != symbols {
                return Err(Error::InvalidDistribution(format!(
                    "row {s} has {} entries, header says {symbols}",
                    row.len()
                )));
            }
            conditional.push(row);
        }
        if let Some((n, _)) = lines.next() {
            return Err(Error::InvalidDistribution(format!(
                "unexpected content on line {}",
                n + 1
            )));
        }
        DiscreteChannel::new(source, conditional)
    }
}

/// Prior `q(c)` over the message space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PriorSpec {
    StandardNormal,
    Discrete(Vec<f64>),
}

/// Upper limit `C_ij` on `I(s; c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityBudget {
    pub nats: f64,
}

impl ComplexityBudget {
    pub fn new(nats: f64) -> Result<Self> {
        if !(nats >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "complexity budget must be nonnegative, got {nats}"
            )));
        }
        Ok(Self { nats })
    }

    pub fn admits(&self, nats: f64) -> bool {
        nats <= self.nats
    }
}

/// `I(s; c)` by exhaustive summation.
pub fn exact_mutual_information(channel: &DiscreteChannel) -> f64 {
    let marginal = channel.marginal();
    let mut mi = 0.0;
    for (ps, row) in channel.source.iter().zip(&channel.conditional) {
        for (pcs, pc) in row.iter().zip(&marginal) {
            if *ps > 0.0 && *pcs > 0.0 {
                mi += ps * pcs * (pcs / pc).ln();
            }
        }
    }
    mi
}

fn discrete_kl(p: &[f64], q: &[f64]) -> Option<f64> {
    let mut kl = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi > 0.0 {
            if *qi <= 0.0 {
                return None;
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Some(kl)
}

/// `Σ_s p(s) KL(p(c|s) ‖ q)`, an upper bound on `I(s; c)` for any prior.
pub fn variational_bound_discrete(channel: &DiscreteChannel, prior: &PriorSpec) -> Result<f64> {
    let q = match prior {
        PriorSpec::Discrete(q) => q,
        PriorSpec::StandardNormal => {
            return Err(Error::InvalidArgument(
                "a discrete channel needs a discrete prior".into(),
            ))
        }
    };
    if q.len() != channel.symbols() {
        return Err(Error::DimensionMismatch {
            context: "prior",
            expected: channel.symbols(),
            got: q.len(),
        });
    }
    check_distribution("prior", q)?;
    let mut bound = 0.0;
    for (s, (ps, row)) in channel.source.iter().zip(&channel.conditional).enumerate() {
        let kl = discrete_kl(row, q).ok_or_else(|| {
            Error::InvalidDistribution(format!(
                "prior is zero on the support of conditional row {s}"
            ))
        })?;
        bound += ps * kl;
    }
    Ok(bound)
}

/// `KL(N(mean, exp(logvar)) ‖ N(0, I))`.
pub fn gaussian_kl(post: &GaussianPosterior) -> f64 {
    0.5 * post
        .mean()
        .iter()
        .zip(post.logvar())
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Gradient of [`gaussian_kl`] with respect to `(mean, logvar)`.
pub fn gaussian_kl_grad(post: &GaussianPosterior) -> (Vec<f64>, Vec<f64>) {
    let dmean = post.mean().to_vec();
    let dlogvar = post.logvar().iter().map(|lv| 0.5 * (lv.exp() - 1.0)).collect();
    (dmean, dlogvar)
}

/// Minibatch estimate of `E_s[KL(p(c|s) ‖ q)]`.
pub fn complexity_regularizer(batch: &[GaussianPosterior]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument(
            "complexity regularizer needs a nonempty batch".into(),
        ));
    }
    Ok(batch.iter().map(gaussian_kl).sum::<f64>() / batch.len() as f64)
}

/// `I(s; c)` for `s ~ N(0, 1)`, `c = gain·s + n`, `n ~ N(0, noise_var)`.
pub fn gaussian_channel_mi(gain: f64, noise_var: f64) -> Result<f64> {
    if !(noise_var > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be positive, got {noise_var}"
        )));
    }
    Ok(0.5 * (1.0 + gain * gain / noise_var).ln())
}

/// Expected KL of the linear-Gaussian encoder `N(gain·s, noise_var)` against
/// the prior `N(0, prior_var)`, with `s ~ N(0, 1)`. Equals
/// [`gaussian_channel_mi`] when `prior_var = gain² + noise_var`.
pub fn linear_gaussian_bound(gain: f64, noise_var: f64, prior_var: f64) -> Result<f64> {
    if !(noise_var > 0.0 && prior_var > 0.0) {
        return Err(Error::InvalidArgument(
            "variances must be positive".into(),
        ));
    }
    Ok(0.5 * ((gain * gain + noise_var) / prior_var - 1.0 + (prior_var / noise_var).ln()))
}

/// `I(s; c) − ε I(c; Y)`.
pub fn ib_objective(mi_sc: f64, mi_cy: f64, tradeoff: f64) -> f64 {
    debug_assert!(tradeoff >= 0.0, "tradeoff must be nonnegative");
    mi_sc - tradeoff * mi_cy
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn bsc(flip: f64) -> DiscreteChannel {
        DiscreteChannel::new(
            vec![0.5, 0.5],
            vec![vec![1.0 - flip, flip], vec![flip, 1.0 - flip]],
        )
        .unwrap()
    }

    #[test]
    fn mutual_information_examples() {
        let indep = DiscreteChannel::new(
            vec![0.3, 0.7],
            vec![vec![0.2, 0.8], vec![0.2, 0.8]],
        )
        .unwrap();
        assert!(exact_mutual_information(&indep).abs() < 1e-15);
        assert!((exact_mutual_information(&bsc(0.0)) - LN2).abs() < 1e-15);
        // ln 2 - H_b(0.1)
        let hb = -(0.1f64 * 0.1f64.ln() + 0.9 * 0.9f64.ln());
        assert!((hb - 0.325_082_973_391_448).abs() < 1e-12);
        assert!((exact_mutual_information(&bsc(0.1)) - 0.368_064_207_168_497).abs() < 1e-12);
    }

    #[test]
    fn bound_examples() {
        let ch = DiscreteChannel::new(
            vec![0.8, 0.2],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let b = variational_bound_discrete(&ch, &PriorSpec::Discrete(vec![0.5, 0.5])).unwrap();
        assert!((b - LN2).abs() < 1e-15);
        let mi = exact_mutual_information(&ch);
        let expected = -(0.8f64 * 0.8f64.ln() + 0.2 * 0.2f64.ln());
        assert!((mi - expected).abs() < 1e-15);
        assert!((mi - 0.500_402_423_538_188).abs() < 1e-12);
        assert!(b > mi);

        let marg = variational_bound_discrete(&ch, &PriorSpec::Discrete(ch.marginal())).unwrap();
        assert!((marg - mi).abs() < 1e-12);

        let indep = DiscreteChannel::new(
            vec![0.5, 0.5],
            vec![vec![0.25, 0.75], vec![0.25, 0.75]],
        )
        .unwrap();
        let z = variational_bound_discrete(&indep, &PriorSpec::Discrete(vec![0.25, 0.75])).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn bound_rejects_prior_without_support() {
        let ch = bsc(0.1);
        let err = variational_bound_discrete(&ch, &PriorSpec::Discrete(vec![1.0, 0.0]));
        assert!(matches!(err, Err(Error::InvalidDistribution(_))));
        assert!(variational_bound_discrete(&ch, &PriorSpec::StandardNormal).is_err());
    }

    #[test]
    fn symmetric_channel_has_zero_uniform_gap() {
        let ch = bsc(0.1);
        let b = variational_bound_discrete(&ch, &PriorSpec::Discrete(vec![0.5, 0.5])).unwrap();
        assert_eq!(b - exact_mutual_information(&ch), 0.0);
    }

    #[test]
    fn invalid_channels_rejected() {
        assert!(DiscreteChannel::new(vec![0.5, 0.6], vec![vec![1.0], vec![1.0]]).is_err());
        assert!(DiscreteChannel::new(vec![1.0], vec![vec![0.5, 0.4]]).is_err());
        assert!(DiscreteChannel::new(vec![1.0], vec![vec![1.5, -0.5]]).is_err());
        assert!(DiscreteChannel::new(vec![0.5, 0.5], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn gaussian_kl_examples() {
        let kl = |m: f64, lv: f64| gaussian_kl(&GaussianPosterior::new(vec![m], vec![lv]).unwrap());
        assert_eq!(kl(0.0, 0.0), 0.0);
        assert!((kl(1.0, 0.0) - 0.5).abs() < 1e-15);
        assert!((kl(0.0, 2f64.ln()) - 0.153_426_409_720_027).abs() < 1e-12);
    }

    #[test]
    fn regularizer_is_batch_mean() {
        let a = GaussianPosterior::new(vec![1.0], vec![0.0]).unwrap();
        let b = GaussianPosterior::standard(1);
        assert_eq!(complexity_regularizer(&[b.clone(), b.clone()]).unwrap(), 0.0);
        assert!((complexity_regularizer(&[a.clone(), b]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(complexity_regularizer(&[a.clone()]).unwrap(), gaussian_kl(&a));
        assert!(complexity_regularizer(&[]).is_err());
    }

    #[test]
    fn gaussian_channel_examples() {
        assert_eq!(gaussian_channel_mi(0.0, 1.0).unwrap(), 0.0);
        assert!((gaussian_channel_mi(1.0, 1.0).unwrap() - 0.346_573_590_279_973).abs() < 1e-12);
        assert!((gaussian_channel_mi(2.0, 1.0).unwrap() - 0.804_718_956_217_050).abs() < 1e-12);
        assert!(gaussian_channel_mi(1.0, 0.0).is_err());
    }

    #[test]
    fn linear_gaussian_bound_tightens_towards_marginal() {
        let (a, nv) = (1.5, 0.5);
        let mi = gaussian_channel_mi(a, nv).unwrap();
        let true_var = a * a + nv;
        let grid = [8.0, 4.0, 2.0, 1.5, 1.0];
        let gaps: Vec<f64> = grid
            .iter()
            .map(|f| linear_gaussian_bound(a, nv, true_var * f).unwrap() - mi)
            .collect();
        assert!(gaps.iter().all(|g| *g >= -1e-12));
        assert!(gaps.windows(2).all(|w| w[1] <= w[0]));
        assert!(gaps[4].abs() < 1e-12);
    }

    #[test]
    fn ib_examples() {
        assert_eq!(ib_objective(1.0, 2.0, 0.5), 0.0);
        assert_eq!(ib_objective(0.7, 3.0, 0.0), 0.7);
        assert!((ib_objective(0.368_064, 0.2, 1.0) - 0.168_064).abs() < 1e-12);
    }

    #[test]
    fn parses_text_channel() {
        let ch: DiscreteChannel = "2 2\n0.5 0.5\n0.9 0.1\n0.1 0.9\n".parse().unwrap();
        assert_eq!(ch, bsc(0.1));
        assert!("2 2\n0.5 0.5\n0.9 0.1\n".parse::<DiscreteChannel>().is_err());
        assert!("2 2\n0.5 0.5\n0.9 0.1\n0.1 x\n".parse::<DiscreteChannel>().is_err());
        assert!("2\n".parse::<DiscreteChannel>().is_err());
    }
}
