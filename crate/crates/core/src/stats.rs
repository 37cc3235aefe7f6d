//! Summary statistics for report rows.

use serde::{Deserialize, Serialize};

/// Average / median / max / min / population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub average: f64,
    pub median: f64,
    pub max: f64,
    pub min: f64,
    pub std_dev: f64,
}

impl Summary {
    /// `None` for an empty slice. The median of an even count is the mean
    /// of the two middle values.
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let average = v.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        let var = v.iter().map(|x| (x - average).powi(2)).sum::<f64>() / n as f64;
        Some(Summary { count: n, average, median, max: v[n - 1], min: v[0], std_dev: var.sqrt() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.average, s.median, s.max, s.min), (2.5, 2.5, 4.0, 1.0));
        assert!((s.std_dev - 1.25f64.sqrt()).abs() < 1e-12);
        assert_eq!(Summary::of(&[7.0]).unwrap().std_dev, 0.0);
        assert!(Summary::of(&[]).is_none());
    }
}
