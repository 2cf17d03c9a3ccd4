use std::collections::BTreeMap;

use num_traits::{FromPrimitive, Num, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aeh::{ResultDocument, RunStatus};
use crate::interface::ComplexityLabel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("no runs to summarize")]
    Empty,
    #[error("inconsistent counts: total {total}, successes {successes}, zero-shot {zero_shot}")]
    Counts { total: u64, successes: u64, zero_shot: u64 },
    #[error("{name} must be {bound}, got {value}")]
    Domain { name: &'static str, bound: &'static str, value: f64 },
}

/// Success decomposition over a batch of runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessStats<T> {
    pub total: u64,
    pub successes: u64,
    pub zero_shot_successes: u64,
    pub p_s: T,
    pub p_zs: T,
    /// `None` when every run was a zero-shot success.
    pub p_aeh_given_not_zs: Option<T>,
}

fn ratio<T: Num + FromPrimitive>(a: u64, b: u64) -> T {
    T::from_u64(a).expect("count fits") / T::from_u64(b).expect("count fits")
}

impl<T: Num + FromPrimitive + Copy> SuccessStats<T> {
    pub fn from_counts(total: u64, successes: u64, zero_shot: u64) -> Result<Self, StatsError> {
        if total == 0 {
            return Err(StatsError::Empty);
        }
        if successes > total || zero_shot > successes {
            return Err(StatsError::Counts {
                total,
                successes,
                zero_shot,
            });
        }
        Ok(SuccessStats {
            total,
            successes,
            zero_shot_successes: zero_shot,
            p_s: ratio(successes, total),
            p_zs: ratio(zero_shot, total),
            p_aeh_given_not_zs: (total > zero_shot).then(|| ratio(successes - zero_shot, total - zero_shot)),
        })
    }

    /// Zero-shot share of the successful runs rather than of all runs.
    pub fn zero_shot_share_of_successes(&self) -> Option<T> {
        (self.successes > 0).then(|| ratio(self.zero_shot_successes, self.successes))
    }

    /// `p_zs + (1 - p_zs) * p_aeh`, which equals `p_s`.
    pub fn recomposed(&self) -> T {
        let aeh = self.p_aeh_given_not_zs.unwrap_or_else(T::zero);
        self.p_zs + (T::one() - self.p_zs) * aeh
    }

    fn aeh(&self) -> T {
        // with no non-zero-shot runs the AEH term contributes nothing
        self.p_aeh_given_not_zs.unwrap_or_else(T::zero)
    }
}

fn as_f64<T: ToPrimitive>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn check_at_least_one(name: &'static str, v: f64) -> Result<(), StatsError> {
    if v >= 1.0 {
        Ok(())
    } else {
        Err(StatsError::Domain {
            name,
            bound: ">= 1",
            value: v,
        })
    }
}

/// Success probability if the zero-shot and AEH rates were divided by
/// `alpha` and `beta`: `p_zs/a + p_aeh/b - p_zs*p_aeh/(a*b)`.
pub fn q_only_success<T>(stats: &SuccessStats<T>, alpha: T, beta: T) -> Result<T, StatsError>
where
    T: Num + FromPrimitive + ToPrimitive + Copy,
{
    check_at_least_one("alpha", as_f64(alpha))?;
    check_at_least_one("beta", as_f64(beta))?;
    let (zs, aeh) = (stats.p_zs, stats.aeh());
    Ok(zs / alpha + aeh / beta - zs * aeh / (alpha * beta))
}

/// Derivative in gamma of [`q_only_success`] with `alpha = beta = gamma`:
/// `-(p_zs + p_aeh)/g^2 + 2 p_zs p_aeh/g^3`.
pub fn q_only_sensitivity<T>(stats: &SuccessStats<T>, gamma: T) -> Result<T, StatsError>
where
    T: Num + FromPrimitive + ToPrimitive + Copy,
{
    let g = as_f64(gamma);
    if g <= 1.0 {
        return Err(StatsError::Domain {
            name: "gamma",
            bound: "> 1",
            value: g,
        });
    }
    let (zs, aeh) = (stats.p_zs, stats.aeh());
    let two = T::one() + T::one();
    let g2 = gamma * gamma;
    Ok(T::zero() - (zs + aeh) / g2 + two * zs * aeh / (g2 * gamma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub stats: SuccessStats<f64>,
    /// Successful runs by total attempts, then complexity.
    pub histogram: BTreeMap<u32, BTreeMap<ComplexityLabel, u64>>,
    pub failures_by_label: BTreeMap<ComplexityLabel, u64>,
    /// Documents that did not parse.
    pub skipped: usize,
}

impl LogSummary {
    /// Per-attempt share of successful runs, in attempt order.
    pub fn success_fractions(&self) -> Vec<(u32, f64)> {
        let n = self.stats.successes as f64;
        self.histogram
            .iter()
            .map(|(x, by)| (*x, by.values().sum::<u64>() as f64 / n))
            .collect()
    }
}

/// Summarizes result documents. Entries that are not valid result
/// documents are counted in `skipped`.
pub fn aggregate_logs(raw: &[serde_json::Value]) -> Result<LogSummary, StatsError> {
    let mut histogram: BTreeMap<u32, BTreeMap<ComplexityLabel, u64>> = BTreeMap::new();
    let mut failures_by_label = BTreeMap::new();
    let (mut total, mut successes, mut zero_shot, mut skipped) = (0, 0, 0, 0);
    for value in raw {
        let Ok(doc) = serde_json::from_value::<ResultDocument>(value.clone()) else {
            skipped += 1;
            continue;
        };
        total += 1;
        match doc.status {
            RunStatus::Success => {
                successes += 1;
                zero_shot += u64::from(doc.total_attempts == 0);
                *histogram
                    .entry(doc.total_attempts)
                    .or_default()
                    .entry(doc.complexity_label)
                    .or_default() += 1;
            }
            RunStatus::Failure => *failures_by_label.entry(doc.complexity_label).or_default() += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} result documents skipped");
    }
    Ok(LogSummary {
        stats: SuccessStats::from_counts(total, successes, zero_shot)?,
        histogram,
        failures_by_label,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use serde_json::json;

    #[test]
    fn benchmark_counts() {
        let s = SuccessStats::<f64>::from_counts(295, 235, 42).unwrap();
        assert!((s.p_s - 0.7966).abs() < 5e-4);
        assert!((s.p_zs - 0.1424).abs() < 5e-4);
        assert!((s.p_aeh_given_not_zs.unwrap() - 0.7628).abs() < 5e-4);
        assert!((s.recomposed() - s.p_s).abs() < 1e-12);
        assert!((s.zero_shot_share_of_successes().unwrap() - 0.1787).abs() < 5e-4);
    }

    #[test]
    fn rational_identity_is_exact() {
        let s = SuccessStats::<Ratio<i64>>::from_counts(295, 235, 42).unwrap();
        assert_eq!(s.recomposed(), s.p_s);
        assert_eq!(s.p_aeh_given_not_zs, Some(Ratio::new(193, 253)));
    }

    #[test]
    fn all_zero_shot_has_no_conditional() {
        let s = SuccessStats::<f64>::from_counts(5, 5, 5).unwrap();
        assert_eq!((s.p_s, s.p_zs, s.p_aeh_given_not_zs), (1.0, 1.0, None));
    }

    #[test]
    fn bad_counts() {
        assert_eq!(SuccessStats::<f64>::from_counts(0, 0, 0), Err(StatsError::Empty));
        assert!(SuccessStats::<f64>::from_counts(3, 4, 0).is_err());
        assert!(SuccessStats::<f64>::from_counts(3, 2, 3).is_err());
    }

    #[test]
    fn rational_ablation() {
        let s = SuccessStats::<Ratio<i64>>::from_counts(295, 235, 42).unwrap();
        assert_eq!(q_only_success(&s, Ratio::from(1), Ratio::from(1)).unwrap(), s.p_s);
        assert!(q_only_sensitivity(&s, Ratio::new(3, 2)).unwrap() < Ratio::from(0));
    }

    #[test]
    fn ablation_domain() {
        let s = SuccessStats::<f64>::from_counts(295, 235, 42).unwrap();
        assert!(q_only_success(&s, 0.5, 1.0).is_err());
        assert!(q_only_sensitivity(&s, 1.0).is_err());
    }

    #[test]
    fn aggregate_skips_malformed() {
        let docs = vec![
            json!({"status": "success", "total_attempts": 0, "model_switches": 0, "complexity_label": "basic"}),
            json!({"status": "success", "total_attempts": 2, "model_switches": 0, "complexity_label": "complex"}),
            json!({"status": "failure", "total_attempts": 9, "model_switches": 2, "complexity_label": "standard"}),
            json!({"status": "maybe"}),
        ];
        let s = aggregate_logs(&docs).unwrap();
        assert_eq!((s.stats.total, s.stats.successes, s.stats.zero_shot_successes, s.skipped), (3, 2, 1, 1));
        assert_eq!(s.histogram[&2][&ComplexityLabel::Complex], 1);
        assert_eq!(s.success_fractions(), [(0, 0.5), (2, 0.5)]);
        assert_eq!(aggregate_logs(&[json!(1)]).unwrap_err(), StatsError::Empty);
    }
}
