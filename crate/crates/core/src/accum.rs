//! Compensated summation.

/// Neumaier's variant of Kahan summation.
///
/// Alternating subset sums lose digits to cancellation as the number of
/// alternatives grows; every layer and every signed combination of layers
/// goes through this accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl Extend<f64> for NeumaierSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for v in iter {
            self.add(v);
        }
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = NeumaierSum::new();
        acc.extend(iter);
        acc
    }
}

/// Compensated sum of a slice.
pub fn sum(values: &[f64]) -> f64 {
    values.iter().copied().collect::<NeumaierSum>().value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_small_terms_lost_by_naive_summation() {
        let values = [1.0, 1e100, 1.0, -1e100];
        let naive: f64 = values.iter().sum();
        assert_eq!(naive, 0.0);
        assert_eq!(sum(&values), 2.0);
    }

    #[test]
    fn alternating_binomial_series_cancels_exactly() {
        // sum_l (-1)^l C(20, l) = 0
        let mut c = 1.0f64;
        let mut acc = NeumaierSum::new();
        for l in 0..=20u32 {
            acc.add(if l % 2 == 0 { c } else { -c });
            c = c * f64::from(20 - l) / f64::from(l + 1);
        }
        assert_eq!(acc.value(), 0.0);
    }
}
