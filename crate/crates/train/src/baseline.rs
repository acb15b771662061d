//! Baseline update rule.

use crate::config::BaselineRule;

/// Evaluates the rule on a history of per-epoch win rates (oldest first):
/// true if the latest rate exceeds `immediate`, or the last `consecutive`
/// rates all exceed `threshold`.
pub fn baseline_test(history: &[f64], rule: &BaselineRule) -> bool {
    let Some(&last) = history.last() else { return false };
    if last > rule.immediate {
        return true;
    }
    history.len() >= rule.consecutive && history[history.len() - rule.consecutive..].iter().all(|&w| w > rule.threshold)
}

/// Stateful form used during training: the run of epochs above threshold
/// restarts whenever the baseline is replaced.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineTracker {
    rule: BaselineRule,
    streak: Vec<f64>,
}

impl BaselineTracker {
    pub fn new(rule: BaselineRule) -> Self {
        Self { rule, streak: Vec::new() }
    }

    /// Records one epoch's win rate; returns true when the baseline should
    /// be replaced.
    pub fn record(&mut self, win_rate: f64) -> bool {
        self.streak.push(win_rate);
        let fire = baseline_test(&self.streak, &self.rule);
        if fire {
            self.streak.clear();
        }
        fire
    }

    /// Epochs in the current run above threshold.
    pub fn streak(&self) -> usize {
        self.streak.iter().rev().take_while(|&&w| w > self.rule.threshold).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_table() {
        let r = BaselineRule::default();
        assert!(baseline_test(&[0.6; 10], &r));
        assert!(baseline_test(&[0.71], &r));
        let mut broken = vec![0.6; 9];
        broken.push(0.4);
        assert!(!baseline_test(&broken, &r));
        assert!(!baseline_test(&[0.6; 9], &r));
        assert!(!baseline_test(&[0.7], &r));
        assert!(!baseline_test(&[], &r));
    }

    #[test]
    fn tracker_resets_after_firing() {
        let mut t = BaselineTracker::new(BaselineRule::default());
        for _ in 0..9 {
            assert!(!t.record(0.6));
        }
        assert!(t.record(0.6));
        assert_eq!(t.streak(), 0);
        // a fresh run of ten is needed again
        for _ in 0..9 {
            assert!(!t.record(0.55));
        }
        assert!(t.record(0.55));
        assert!(t.record(0.8));
        assert!(!t.record(0.5));
    }
}
