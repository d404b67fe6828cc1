use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::SimTime;

/// Link-delay law. Delays are in simulated milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynchronyModel {
    /// Uniform in `[min_ms, delta_ms]`; never exceeds `delta_ms`.
    Synchronous { min_ms: u64, delta_ms: u64 },
    /// Log-normal before `gst_ms`, capped so delivery happens by `gst + delta`;
    /// uniform in `[min_ms, delta_ms]` for sends at or after `gst_ms`.
    Partial {
        min_ms: u64,
        delta_ms: u64,
        gst_ms: SimTime,
        mu: f64,
        sigma: f64,
    },
    /// Log-normal with no upper bound.
    Asynchronous { mu: f64, sigma: f64 },
}

impl SynchronyModel {
    pub fn fixed(delay_ms: u64) -> Self {
        SynchronyModel::Synchronous {
            min_ms: delay_ms,
            delta_ms: delay_ms,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            SynchronyModel::Synchronous { min_ms, delta_ms }
            | SynchronyModel::Partial {
                min_ms, delta_ms, ..
            } if min_ms > delta_ms => Err(format!("min_ms {min_ms} exceeds delta_ms {delta_ms}")),
            SynchronyModel::Partial { sigma, .. } | SynchronyModel::Asynchronous { sigma, .. }
                if !(sigma.is_finite() && sigma > 0.0) =>
            {
                Err(format!("sigma must be positive, got {sigma}"))
            }
            _ => Ok(()),
        }
    }

    /// Upper bound on delay for a send at `now`, if the model has one.
    pub fn bound_at(&self, now: SimTime) -> Option<u64> {
        match *self {
            SynchronyModel::Synchronous { delta_ms, .. } => Some(delta_ms),
            SynchronyModel::Partial {
                delta_ms, gst_ms, ..
            } => Some(delta_ms + gst_ms.saturating_sub(now)),
            SynchronyModel::Asynchronous { .. } => None,
        }
    }

    /// Expected link delay; the base for protocol timeouts.
    pub fn mean_delay_ms(&self) -> f64 {
        match *self {
            SynchronyModel::Synchronous { min_ms, delta_ms }
            | SynchronyModel::Partial {
                min_ms, delta_ms, ..
            } => (min_ms + delta_ms) as f64 / 2.0,
            SynchronyModel::Asynchronous { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
        }
    }

    pub fn sample_delay<R: Rng + ?Sized>(&self, now: SimTime, rng: &mut R) -> u64 {
        match *self {
            SynchronyModel::Synchronous { min_ms, delta_ms } => rng.random_range(min_ms..=delta_ms),
            SynchronyModel::Partial {
                min_ms,
                delta_ms,
                gst_ms,
                mu,
                sigma,
            } => {
                if now >= gst_ms {
                    rng.random_range(min_ms..=delta_ms)
                } else {
                    let raw = lognormal(mu, sigma, rng);
                    raw.min(gst_ms - now + delta_ms)
                }
            }
            SynchronyModel::Asynchronous { mu, sigma } => lognormal(mu, sigma, rng),
        }
    }
}

fn lognormal<R: Rng + ?Sized>(mu: f64, sigma: f64, rng: &mut R) -> u64 {
    let d = LogNormal::new(mu, sigma).expect("validated parameters");
    let x: f64 = d.sample(rng);
    x.round().min(u64::MAX as f64 / 4.0) as u64
}

/// A single shared channel every transmission queues on (think one Wi-Fi
/// cell). A message occupies it for `per_message_ms + bytes / bytes_per_ms`
/// and then propagates with the synchrony model's delay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedMedium {
    pub per_message_ms: f64,
    #[serde(default)]
    pub bytes_per_ms: Option<f64>,
}

impl SharedMedium {
    pub fn occupancy_ms(&self, bytes: usize) -> f64 {
        self.per_message_ms + self.bytes_per_ms.map_or(0.0, |bw| bytes as f64 / bw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub synchrony: SynchronyModel,
    #[serde(default)]
    pub medium: Option<SharedMedium>,
}

impl NetworkModel {
    pub fn new(synchrony: SynchronyModel) -> Self {
        Self {
            synchrony,
            medium: None,
        }
    }

    pub fn with_medium(mut self, medium: SharedMedium) -> Self {
        self.medium = Some(medium);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn synchronous_never_exceeds_delta() {
        let m = SynchronyModel::Synchronous {
            min_ms: 5,
            delta_ms: 100,
        };
        let mut rng = substream(1, "t");
        assert!((0..10_000).all(|i| m.sample_delay(i, &mut rng) <= 100));
    }

    #[test]
    fn partial_respects_delta_after_gst() {
        let m = SynchronyModel::Partial {
            min_ms: 1,
            delta_ms: 50,
            gst_ms: 5_000,
            mu: 6.0,
            sigma: 1.5,
        };
        let mut rng = substream(2, "t");
        for now in (5_000..15_000).step_by(1) {
            assert!(m.sample_delay(now, &mut rng) <= 50);
        }
        for now in (0..5_000).step_by(7) {
            assert!(now + m.sample_delay(now, &mut rng) <= 5_050);
        }
    }

    #[test]
    fn asynchronous_exceeds_any_fixed_bound_eventually() {
        let m = SynchronyModel::Asynchronous {
            mu: 4.0,
            sigma: 1.5,
        };
        let mut rng = substream(3, "t");
        let max = (0..100_000)
            .map(|_| m.sample_delay(0, &mut rng))
            .max()
            .unwrap();
        // exp(4 + 1.5 * 4.26) is the 1e-5 upper quantile, about 32_000 ms.
        assert!(max > 10_000, "max delay {max}");
    }

    #[test]
    fn validation() {
        assert!(SynchronyModel::Synchronous {
            min_ms: 9,
            delta_ms: 3
        }
        .validate()
        .is_err());
        assert!(SynchronyModel::Asynchronous {
            mu: 1.0,
            sigma: 0.0
        }
        .validate()
        .is_err());
        assert!(SynchronyModel::fixed(10).validate().is_ok());
    }
}
