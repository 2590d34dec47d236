use serde::{Deserialize, Serialize};

/// Linear schedule from `start` at step 0 to `end` at `total_steps`, held
/// constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl AnnealSchedule {
    pub fn linear(start: f64, end: f64, total_steps: usize) -> Self {
        Self {
            start,
            end,
            total_steps: total_steps.max(1),
        }
    }

    pub fn constant(value: f64) -> Self {
        Self::linear(value, value, 1)
    }

    /// Spread-loss margin, 0.2 → 0.9.
    pub fn spread_margin(total_steps: usize) -> Self {
        Self::linear(0.2, 0.9, total_steps)
    }

    /// Merge similarity threshold, 0.90 → 0.55.
    pub fn merge_threshold(total_steps: usize) -> Self {
        Self::linear(0.90, 0.55, total_steps)
    }

    pub fn value(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return self.end;
        }
        let frac = step as f64 / self.total_steps as f64;
        self.start + (self.end - self.start) * frac
    }

    pub fn with_total_steps(self, total_steps: usize) -> Self {
        Self::linear(self.start, self.end, total_steps)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn endpoints_are_exact() {
        let s = AnnealSchedule::merge_threshold(7);
        assert_eq!(s.value(0), 0.90);
        assert_eq!(s.value(7), 0.55);
        assert_eq!(s.value(100), 0.55);
        let m = AnnealSchedule::spread_margin(3);
        assert_eq!(m.value(0), 0.2);
        assert_eq!(m.value(3), 0.9);
    }

    proptest! {
        #[test]
        fn monotone_between_endpoints(start in -2.0f64..2.0, end in -2.0f64..2.0, n in 1usize..50) {
            let s = AnnealSchedule::linear(start, end, n);
            for step in 0..n {
                let (a, b) = (s.value(step), s.value(step + 1));
                if end >= start { prop_assert!(a <= b) } else { prop_assert!(a >= b) }
            }
        }
    }
}
