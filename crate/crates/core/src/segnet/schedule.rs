/// Reduce-on-plateau learning rate with early stopping.
///
/// Epochs are numbered from 1. An epoch improves when its validation loss is
/// strictly below the best so far. The stagnation counter resets on
/// improvement and after every decay. Early stopping fires once
/// `early_stop_patience` epochs have passed since the best epoch, and takes
/// precedence over a decay in the same epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    lr: f64,
    factor: f64,
    patience: usize,
    early_stop_patience: usize,
    best: f64,
    best_epoch: usize,
    stagnant: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEvent {
    pub epoch: usize,
    pub improved: bool,
    pub lr_decreased: bool,
    pub stop: bool,
    /// Learning rate for the next epoch.
    pub lr: f64,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize, early_stop_patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            early_stop_patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stagnant: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> ScheduleEvent {
        let improved = val_loss < self.best;
        let mut ev = ScheduleEvent {
            epoch,
            improved,
            lr_decreased: false,
            stop: false,
            lr: self.lr,
        };
        if improved {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stagnant = 0;
            return ev;
        }
        self.stagnant += 1;
        if epoch - self.best_epoch >= self.early_stop_patience {
            ev.stop = true;
        } else if self.stagnant >= self.patience {
            self.lr *= self.factor;
            self.stagnant = 0;
            ev.lr_decreased = true;
            ev.lr = self.lr;
        }
        ev
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(losses: &[f64]) -> (Vec<usize>, Option<usize>, Vec<f64>) {
        let mut s = PlateauSchedule::new(1e-3, 0.9, 5, 15);
        let mut drops = Vec::new();
        let mut lrs = Vec::new();
        for (i, &l) in losses.iter().enumerate() {
            lrs.push(s.lr());
            let ev = s.observe(i + 1, l);
            if ev.lr_decreased {
                drops.push(i + 1);
            }
            if ev.stop {
                return (drops, Some(i + 1), lrs);
            }
        }
        (drops, None, lrs)
    }

    #[test]
    fn flat_after_first_epoch() {
        let (drops, stop, lrs) = run(&[1.0; 40]);
        assert_eq!(drops, vec![6, 11]);
        assert_eq!(stop, Some(16));
        for w in lrs.windows(2) {
            assert!(w[1] == w[0] || w[1] == w[0] * 0.9);
        }
        assert_eq!(lrs[6], 1e-3 * 0.9);
        assert_eq!(lrs[11], 1e-3 * 0.9 * 0.9);
    }

    #[test]
    fn improvement_resets_both_counters() {
        let mut losses = vec![1.0, 1.0, 1.0, 1.0, 0.5];
        losses.extend([0.6; 30]);
        let (drops, stop, _) = run(&losses);
        assert_eq!(drops, vec![10, 15]);
        assert_eq!(stop, Some(20));
    }

    #[test]
    fn equal_loss_is_not_improvement() {
        let mut s = PlateauSchedule::new(1.0, 0.5, 2, 100);
        assert!(s.observe(1, 0.3).improved);
        assert!(!s.observe(2, 0.3).improved);
        assert!(s.observe(3, 0.3).lr_decreased);
        assert!(!s.observe(4, f64::NAN).improved);
    }
}
