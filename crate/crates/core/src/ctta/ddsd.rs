use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Decision {
    /// Update every student group.
    Ft,
    /// Update the adapter group only.
    Et,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Ft => "FT",
            Decision::Et => "ET",
        })
    }
}

impl FromStr for Decision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FT" => Ok(Decision::Ft),
            "ET" => Ok(Decision::Et),
            other => Err(Error::InvalidArgument(format!(
                "unknown decision '{other}'"
            ))),
        }
    }
}

/// FT iff the loss strictly exceeds the threshold.
pub fn ddsd_decide(loss_seg: f64, tau: f64) -> Result<Decision> {
    if !loss_seg.is_finite() || !tau.is_finite() {
        return Err(Error::NonFinite { op: "ddsd_decide" });
    }
    Ok(if loss_seg > tau {
        Decision::Ft
    } else {
        Decision::Et
    })
}

pub fn update_threshold(tau: f64, loss_seg: f64, alpha_l: f64) -> f64 {
    alpha_l * tau + (1.0 - alpha_l) * loss_seg
}

/// Threshold tracker: decides on the current threshold, then folds the loss in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ddsd {
    pub tau: f64,
    pub alpha_l: f64,
}

impl Ddsd {
    pub fn new(alpha_l: f64) -> Self {
        Ddsd { tau: 0.0, alpha_l }
    }

    pub fn observe(&mut self, loss_seg: f64) -> Result<Decision> {
        let d = ddsd_decide(loss_seg, self.tau)?;
        self.tau = update_threshold(self.tau, loss_seg, self.alpha_l);
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn strict_comparison() {
        assert_eq!(ddsd_decide(0.7, 0.5).unwrap(), Decision::Ft);
        assert_eq!(ddsd_decide(0.5, 0.5).unwrap(), Decision::Et);
        assert_eq!(ddsd_decide(1e-9, 0.0).unwrap(), Decision::Ft);
        assert!(ddsd_decide(f64::NAN, 0.1).is_err());
        assert!(ddsd_decide(f64::INFINITY, 0.1).is_err());
    }

    #[test]
    fn threshold_arithmetic() {
        assert!((update_threshold(0.5, 1.0, 0.9) - 0.55).abs() < 1e-15);
    }

    #[test]
    fn constant_stream_contracts_by_alpha_l() {
        let (l, a) = (0.8, 0.9);
        let mut tau = 0.0;
        for _ in 0..200 {
            let next = update_threshold(tau, l, a);
            assert!(((next - l).abs() - a * (tau - l).abs()).abs() <= 1e-12);
            tau = next;
        }
    }

    #[test]
    fn unrolled_sum_matches_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let a: f64 = rng.random_range(0.0..1.0);
            let len = rng.random_range(1..60);
            let losses: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..3.0)).collect();
            let mut d = Ddsd::new(a);
            for &l in &losses {
                d.observe(l).unwrap();
            }
            let t = losses.len();
            let closed: f64 = (1.0 - a)
                * losses
                    .iter()
                    .enumerate()
                    .map(|(k, l)| a.powi((t - 1 - k) as i32) * l)
                    .sum::<f64>();
            worst = worst.max((d.tau - closed).abs());
        }
        assert!(worst <= 1e-12, "{worst:e}");
    }

    #[test]
    fn first_decision_is_ft() {
        let mut d = Ddsd::new(0.9);
        assert_eq!(d.tau, 0.0);
        assert_eq!(d.observe(0.01).unwrap(), Decision::Ft);
    }

    #[test]
    fn decision_uses_pre_update_threshold() {
        // with alpha_l = 0 the post-update threshold equals the loss, so a
        // decide-after-update variant can never fire FT
        let losses = [1.0, 2.0, 1.5, 3.0];
        let mut d = Ddsd::new(0.0);
        let specified: Vec<_> = losses.iter().map(|l| d.observe(*l).unwrap()).collect();
        let mut tau = 0.0;
        let reordered: Vec<_> = losses
            .iter()
            .map(|l| {
                tau = update_threshold(tau, *l, 0.0);
                ddsd_decide(*l, tau).unwrap()
            })
            .collect();
        use Decision::*;
        assert_eq!(specified, vec![Ft, Ft, Et, Ft]);
        assert_eq!(reordered, vec![Et, Et, Et, Et]);
    }

    #[test]
    fn tau_nonnegative_for_nonnegative_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = Ddsd::new(0.9);
        for _ in 0..500 {
            d.observe(rng.random_range(0.0..2.0)).unwrap();
            assert!(d.tau >= 0.0);
        }
    }

    proptest! {
        #[test]
        fn threshold_stays_within_loss_range(
            losses in prop::collection::vec(0.0f64..10.0, 1..100),
            alpha_l in 0.0f64..1.0,
        ) {
            let (lo, hi) = losses.iter().fold((f64::MAX, 0.0f64), |(a, b), l| (a.min(*l), b.max(*l)));
            let mut tau = losses[0];
            for l in &losses {
                tau = update_threshold(tau, *l, alpha_l);
                prop_assert!(tau >= lo - 1e-12 && tau <= hi + 1e-12);
            }
        }

        #[test]
        fn decision_matches_strict_comparison(loss in 0.0f64..10.0, tau in 0.0f64..10.0) {
            let d = ddsd_decide(loss, tau).unwrap();
            prop_assert_eq!(d == Decision::Ft, loss > tau);
        }
    }
}
