use serde::{Deserialize, Serialize};

/// Summary of one performance metric across repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Lower-middle element for even counts.
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Min,
    Max,
    #[default]
    Mean,
    Median,
    Std,
    Count,
}

impl Statistic {
    pub const ALL: [Statistic; 6] = [
        Statistic::Min,
        Statistic::Max,
        Statistic::Mean,
        Statistic::Median,
        Statistic::Std,
        Statistic::Count,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Statistic::Min => "min",
            Statistic::Max => "max",
            Statistic::Mean => "mean",
            Statistic::Median => "median",
            Statistic::Std => "std",
            Statistic::Count => "count",
        }
    }

    pub fn parse(s: &str) -> Option<Statistic> {
        Statistic::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

impl std::fmt::Display for Statistic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Stats {
    /// `None` for an empty sample or non-finite values.
    pub fn from_samples(values: &[f64]) -> Option<Stats> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let min = sorted[0];
        let max = sorted[n - 1];
        // rounding can push the mean of equal samples outside [min, max]
        let mean = (sorted.iter().sum::<f64>() / n as f64).clamp(min, max);
        let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Some(Stats {
            min,
            max,
            mean,
            median: sorted[(n - 1) / 2],
            std: var.sqrt(),
            count: n,
        })
    }

    pub fn get(&self, s: Statistic) -> f64 {
        match s {
            Statistic::Min => self.min,
            Statistic::Max => self.max,
            Statistic::Mean => self.mean,
            Statistic::Median => self.median,
            Statistic::Std => self.std,
            Statistic::Count => self.count as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_values() {
        let s = Stats::from_samples(&[2.0, 4.0]).unwrap();
        assert_eq!(
            s,
            Stats { min: 2.0, max: 4.0, mean: 3.0, median: 2.0, std: 1.0, count: 2 }
        );
    }

    #[test]
    fn single_value() {
        let s = Stats::from_samples(&[5.0]).unwrap();
        assert_eq!(
            s,
            Stats { min: 5.0, max: 5.0, mean: 5.0, median: 5.0, std: 0.0, count: 1 }
        );
    }

    #[test]
    fn empty_and_nan() {
        assert!(Stats::from_samples(&[]).is_none());
        assert!(Stats::from_samples(&[1.0, f64::NAN]).is_none());
    }

    #[test]
    fn equal_samples_mean_within_range() {
        let s = Stats::from_samples(&[0.1, 0.1, 0.1]).unwrap();
        assert!(s.mean <= s.max && s.mean >= s.min);
    }

    /// Brute-force reference: median by counting, std by two-pass sums.
    fn reference(values: &[f64]) -> (f64, f64, f64, f64, f64) {
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // lower median: smallest v with at least ceil(n/2) values <= v
        let need = values.len().div_ceil(2);
        let median = values
            .iter()
            .cloned()
            .filter(|v| values.iter().filter(|w| *w <= v).count() >= need)
            .fold(f64::INFINITY, f64::min);
        let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64).sqrt();
        (min, max, median, mean, std)
    }

    proptest! {
        #[test]
        fn aggregation_sanity(values in prop::collection::vec(-1e6f64..1e6, 1..40)) {
            let s = Stats::from_samples(&values).unwrap();
            prop_assert!(s.min <= s.median && s.median <= s.max);
            prop_assert!(s.min <= s.mean && s.mean <= s.max);
            prop_assert!(s.std >= 0.0);
            prop_assert_eq!(s.count, values.len());
            let (min, max, median, mean, std) = reference(&values);
            prop_assert_eq!((s.min, s.max), (min, max));
            prop_assert_eq!(s.median, median);
            prop_assert!((s.mean - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
            prop_assert!((s.std - std).abs() <= 1e-6 * (1.0 + std));
        }
    }
}
