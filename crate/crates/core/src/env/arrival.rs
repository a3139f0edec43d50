use rand::Rng;
use rand_distr::{Distribution as _, Exp, Poisson};
use serde::{Deserialize, Serialize};

use super::conversion::round_half_up;
use super::EnvError;
use crate::SimRng;

/// Law of a per-slot arrival count.
///
/// Continuous laws are discretized by rounding half up, so every variant
/// yields a non-negative integer number of bits or energy units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    /// Poisson with the given mean. A mean of zero is the point mass at 0.
    Poisson { mean: f64 },
    /// Exponential with the given rate (mean `1/rate`).
    Exponential { rate: f64 },
    /// Mixture of exponentials.
    Hyperexponential { weights: Vec<f64>, rates: Vec<f64> },
}

impl Distribution {
    pub fn poisson(mean: f64) -> Self {
        Distribution::Poisson { mean }
    }

    /// Two-phase hyperexponential with phase weights `(0.9, 0.1)` and rates
    /// chosen so that each phase contributes half of `mean`.
    pub fn hyperexponential_with_mean(mean: f64) -> Self {
        let weights = vec![0.9, 0.1];
        let rates = weights.iter().map(|w| 2.0 * w / mean).collect();
        Distribution::Hyperexponential { weights, rates }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidConfig(msg));
        match self {
            Distribution::Poisson { mean } => {
                if !mean.is_finite() || *mean < 0.0 {
                    return bad(format!("Poisson mean must be finite and non-negative, got {mean}"));
                }
            }
            Distribution::Exponential { rate } => {
                if !rate.is_finite() || *rate <= 0.0 {
                    return bad(format!("exponential rate must be positive, got {rate}"));
                }
            }
            Distribution::Hyperexponential { weights, rates } => {
                if weights.is_empty() || weights.len() != rates.len() {
                    return bad("hyperexponential needs matching, non-empty weights and rates".into());
                }
                if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) || rates.iter().any(|r| !r.is_finite() || *r <= 0.0) {
                    return bad("hyperexponential weights and rates must be positive".into());
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return bad(format!("hyperexponential weights must sum to 1, got {total}"));
                }
            }
        }
        Ok(())
    }

    /// Mean of the underlying (undiscretized) law.
    pub fn mean(&self) -> f64 {
        match self {
            Distribution::Poisson { mean } => *mean,
            Distribution::Exponential { rate } => 1.0 / rate,
            Distribution::Hyperexponential { weights, rates } => weights.iter().zip(rates).map(|(w, r)| w / r).sum(),
        }
    }

    /// Same family, rescaled to a new mean.
    pub fn with_mean(&self, mean: f64) -> Result<Self, EnvError> {
        let out = match self {
            Distribution::Poisson { .. } => Distribution::Poisson { mean },
            Distribution::Exponential { .. } => Distribution::Exponential { rate: 1.0 / mean },
            Distribution::Hyperexponential { weights, rates } => {
                let factor = self.mean() / mean;
                Distribution::Hyperexponential {
                    weights: weights.clone(),
                    rates: rates.iter().map(|r| r * factor).collect(),
                }
            }
        };
        out.validate()?;
        Ok(out)
    }

    /// `P(X = k)` for `k` in `0..len`, where `X` is the integer variate.
    pub fn pmf_table(&self, len: usize) -> Vec<f64> {
        match self {
            Distribution::Poisson { mean } => {
                let mut out = Vec::with_capacity(len);
                if *mean == 0.0 {
                    out.extend((0..len).map(|k| if k == 0 { 1.0 } else { 0.0 }));
                    return out;
                }
                let mut p = (-mean).exp();
                for k in 0..len {
                    out.push(p);
                    p *= mean / (k + 1) as f64;
                }
                out
            }
            Distribution::Exponential { rate } => rounded_exponential_pmf(*rate, len),
            Distribution::Hyperexponential { weights, rates } => {
                let mut out = vec![0.0; len];
                for (w, r) in weights.iter().zip(rates) {
                    for (o, p) in out.iter_mut().zip(rounded_exponential_pmf(*r, len)) {
                        *o += w * p;
                    }
                }
                out
            }
        }
    }

    /// Mean of the integer variate, summed until the tail mass drops below 1e-15.
    pub fn integer_mean(&self) -> f64 {
        let mut len = 64usize;
        loop {
            let pmf = self.pmf_table(len);
            let mass: f64 = pmf.iter().sum();
            if 1.0 - mass < 1e-15 || len > 1 << 20 {
                return pmf.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
            }
            len *= 2;
        }
    }

    pub(crate) fn sampler(&self) -> Result<Sampler, EnvError> {
        self.validate()?;
        let exp = |rate: f64| Exp::new(rate).map_err(|e| EnvError::InvalidConfig(e.to_string()));
        Ok(match self {
            Distribution::Poisson { mean } if *mean == 0.0 => Sampler::Zero,
            Distribution::Poisson { mean } => {
                Sampler::Poisson(Poisson::new(*mean).map_err(|e| EnvError::InvalidConfig(e.to_string()))?)
            }
            Distribution::Exponential { rate } => Sampler::Exponential(exp(*rate)?),
            Distribution::Hyperexponential { weights, rates } => {
                let mut acc = 0.0;
                let cumulative = weights
                    .iter()
                    .map(|w| {
                        acc += w;
                        acc
                    })
                    .collect();
                let phases = rates.iter().map(|r| exp(*r)).collect::<Result<_, _>>()?;
                Sampler::Hyperexponential { cumulative, phases }
            }
        })
    }
}

fn rounded_exponential_pmf(rate: f64, len: usize) -> Vec<f64> {
    // round-half-up: X rounds to k iff k - 1/2 <= X < k + 1/2
    (0..len)
        .map(|k| {
            if k == 0 {
                -(-0.5 * rate).exp_m1()
            } else {
                (-rate * (k as f64 - 0.5)).exp() * -(-rate).exp_m1()
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub(crate) enum Sampler {
    Zero,
    Poisson(Poisson<f64>),
    Exponential(Exp<f64>),
    Hyperexponential { cumulative: Vec<f64>, phases: Vec<Exp<f64>> },
}

impl Sampler {
    #[inline]
    pub(crate) fn sample_real(&self, rng: &mut SimRng) -> f64 {
        match self {
            Sampler::Zero => 0.0,
            Sampler::Poisson(p) => p.sample(rng),
            Sampler::Exponential(e) => e.sample(rng),
            Sampler::Hyperexponential { cumulative, phases } => {
                let u: f64 = rng.random();
                let idx = cumulative.iter().position(|c| u < *c).unwrap_or(phases.len() - 1);
                phases[idx].sample(rng)
            }
        }
    }

    #[inline]
    pub(crate) fn sample(&self, rng: &mut SimRng) -> u32 {
        match self {
            Sampler::Zero => 0,
            Sampler::Poisson(p) => {
                let v: f64 = p.sample(rng);
                v as u32
            }
            _ => round_half_up(self.sample_real(rng)),
        }
    }
}

/// Autoregressive arrivals: `X_k = A·X_{k-1} + ω`, `Y_k = b·Y_{k-1} + χ`,
/// rounded half up and clipped to `[0, cap]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovArrivals {
    /// `n × n` coefficient matrix `A`.
    pub coupling: Vec<Vec<f64>>,
    /// Scalar coefficient `b`.
    pub energy_coeff: f64,
    pub data_noise: Vec<Distribution>,
    pub energy_noise: Distribution,
    /// Largest data arrival per node. Defaults to `d_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_cap: Option<u32>,
    /// Largest energy arrival. Defaults to `e_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_cap: Option<u32>,
}

/// Generator of data and energy arrivals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalModel {
    Iid { data: Vec<Distribution>, energy: Distribution },
    Markov(MarkovArrivals),
}

impl ArrivalModel {
    pub fn iid_poisson(data_means: &[f64], energy_mean: f64) -> Self {
        ArrivalModel::Iid {
            data: data_means.iter().map(|m| Distribution::poisson(*m)).collect(),
            energy: Distribution::poisson(energy_mean),
        }
    }

    pub fn is_markov(&self) -> bool {
        matches!(self, ArrivalModel::Markov(_))
    }

    pub fn validate(&self, nodes: usize) -> Result<(), EnvError> {
        match self {
            ArrivalModel::Iid { data, energy } => {
                if data.len() != nodes {
                    return Err(EnvError::InvalidConfig(format!(
                        "expected {nodes} data arrival laws, got {}",
                        data.len()
                    )));
                }
                data.iter().try_for_each(Distribution::validate)?;
                energy.validate()
            }
            ArrivalModel::Markov(m) => {
                if m.coupling.len() != nodes || m.coupling.iter().any(|row| row.len() != nodes) {
                    return Err(EnvError::InvalidConfig(format!("coupling matrix must be {nodes}x{nodes}")));
                }
                if m.coupling.iter().flatten().any(|a| !a.is_finite()) || !m.energy_coeff.is_finite() {
                    return Err(EnvError::InvalidConfig("autoregressive coefficients must be finite".into()));
                }
                if m.data_noise.len() != nodes {
                    return Err(EnvError::InvalidConfig(format!(
                        "expected {nodes} data noise laws, got {}",
                        m.data_noise.len()
                    )));
                }
                m.data_noise.iter().try_for_each(Distribution::validate)?;
                m.energy_noise.validate()
            }
        }
    }

    /// Per-node mean data arrival of an i.i.d. model (integer variate).
    pub fn iid_data_means(&self) -> Option<Vec<f64>> {
        match self {
            ArrivalModel::Iid { data, .. } => Some(data.iter().map(Distribution::integer_mean).collect()),
            ArrivalModel::Markov(_) => None,
        }
    }
}

/// Sampling state for an [`ArrivalModel`] bound to buffer capacities.
#[derive(Clone, Debug)]
pub(crate) enum ArrivalSampler {
    Iid {
        data: Vec<Sampler>,
        energy: Sampler,
    },
    Markov {
        coupling: Vec<Vec<f64>>,
        energy_coeff: f64,
        data_noise: Vec<Sampler>,
        energy_noise: Sampler,
        data_cap: u32,
        energy_cap: u32,
    },
}

impl ArrivalSampler {
    pub(crate) fn new(model: &ArrivalModel, d_max: u32, e_max: u32) -> Result<Self, EnvError> {
        Ok(match model {
            ArrivalModel::Iid { data, energy } => ArrivalSampler::Iid {
                data: data.iter().map(Distribution::sampler).collect::<Result<_, _>>()?,
                energy: energy.sampler()?,
            },
            ArrivalModel::Markov(m) => ArrivalSampler::Markov {
                coupling: m.coupling.clone(),
                energy_coeff: m.energy_coeff,
                data_noise: m.data_noise.iter().map(Distribution::sampler).collect::<Result<_, _>>()?,
                energy_noise: m.energy_noise.sampler()?,
                data_cap: m.data_cap.unwrap_or(d_max),
                energy_cap: m.energy_cap.unwrap_or(e_max),
            },
        })
    }

    /// Writes the data arrivals into `x` and returns the energy arrival.
    #[inline]
    pub(crate) fn sample(&self, prev_x: Option<&[u32]>, prev_y: Option<u32>, x: &mut [u32], rng: &mut SimRng) -> u32 {
        match self {
            ArrivalSampler::Iid { data, energy } => {
                for (xi, s) in x.iter_mut().zip(data) {
                    *xi = s.sample(rng);
                }
                energy.sample(rng)
            }
            ArrivalSampler::Markov {
                coupling,
                energy_coeff,
                data_noise,
                energy_noise,
                data_cap,
                energy_cap,
            } => {
                let prev_x = prev_x.expect("Markov arrivals need the previous data arrivals");
                for (i, xi) in x.iter_mut().enumerate() {
                    let drift: f64 = coupling[i].iter().zip(prev_x).map(|(a, p)| a * *p as f64).sum();
                    let v = drift + data_noise[i].sample_real(rng);
                    *xi = round_half_up(v).min(*data_cap);
                }
                let prev_y = prev_y.expect("Markov arrivals need the previous energy arrival");
                let v = energy_coeff * prev_y as f64 + energy_noise.sample_real(rng);
                round_half_up(v).min(*energy_cap)
            }
        }
    }

    pub(crate) fn caps(&self) -> Option<(u32, u32)> {
        match self {
            ArrivalSampler::Iid { .. } => None,
            ArrivalSampler::Markov { data_cap, energy_cap, .. } => Some((*data_cap, *energy_cap)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn pmfs_are_normalized() {
        for d in [
            Distribution::poisson(0.0),
            Distribution::poisson(0.3),
            Distribution::poisson(13.0),
            Distribution::Exponential { rate: 0.5 },
            Distribution::hyperexponential_with_mean(0.625),
        ] {
            let total: f64 = d.pmf_table(2000).iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn hyperexponential_hits_requested_mean() {
        let d = Distribution::hyperexponential_with_mean(0.625);
        d.validate().unwrap();
        assert_abs_diff_eq!(d.mean(), 0.625, epsilon = 1e-12);
        let scaled = d.with_mean(2.0).unwrap();
        assert_abs_diff_eq!(scaled.mean(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn poisson_sample_mean_matches() {
        let s = Distribution::poisson(1.5).sampler().unwrap();
        let mut rng = SimRng::seed_from_u64(7);
        let n = 200_000;
        let total: u64 = (0..n).map(|_| s.sample(&mut rng) as u64).sum();
        assert_abs_diff_eq!(total as f64 / n as f64, 1.5, epsilon = 0.02);
    }

    #[test]
    fn rounded_exponential_sampler_matches_pmf() {
        let d = Distribution::Exponential { rate: 0.8 };
        let s = d.sampler().unwrap();
        let pmf = d.pmf_table(4);
        let mut rng = SimRng::seed_from_u64(3);
        let n = 200_000;
        let mut counts = [0u32; 4];
        for _ in 0..n {
            let v = s.sample(&mut rng) as usize;
            if v < 4 {
                counts[v] += 1;
            }
        }
        for k in 0..4 {
            assert_abs_diff_eq!(counts[k] as f64 / n as f64, pmf[k], epsilon = 0.005);
        }
    }

    #[test]
    fn invalid_laws_are_rejected() {
        assert!(Distribution::poisson(-1.0).validate().is_err());
        assert!(Distribution::Exponential { rate: 0.0 }.validate().is_err());
        let bad = Distribution::Hyperexponential { weights: vec![0.5, 0.4], rates: vec![1.0, 2.0] };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn markov_arrivals_round_and_clip() {
        let model = ArrivalModel::Markov(MarkovArrivals {
            coupling: vec![vec![0.2, 0.3], vec![0.3, 0.2]],
            energy_coeff: 0.5,
            data_noise: vec![Distribution::poisson(0.0), Distribution::poisson(0.0)],
            energy_noise: Distribution::poisson(0.0),
            data_cap: Some(3),
            energy_cap: None,
        });
        let sampler = ArrivalSampler::new(&model, 10, 20).unwrap();
        let mut rng = SimRng::seed_from_u64(0);
        let mut x = [0u32; 2];
        // 0.2*5 + 0.3*10 = 4 -> capped at 3; 0.3*5 + 0.2*10 = 3.5 -> rounds to 4 -> capped at 3
        let y = sampler.sample(Some(&[5, 10]), Some(7), &mut x, &mut rng);
        assert_eq!(x, [3, 3]);
        assert_eq!(y, 4); // 3.5 rounds half up
        let y = sampler.sample(Some(&[1, 1]), Some(50), &mut x, &mut rng);
        assert_eq!(x, [1, 1]); // 0.5 rounds up
        assert_eq!(y, 20); // clipped to e_max
    }
}
