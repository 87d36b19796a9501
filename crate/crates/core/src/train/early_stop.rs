#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

/// Patience-based early stopping. No stop is possible during the first
/// `patience` epochs; staleness is counted from epoch `patience + 1`, and
/// training stops once `patience` consecutive later epochs fail to improve
/// on the best value.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub higher_is_better: bool,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, higher_is_better: bool) -> Self {
        Self {
            patience,
            higher_is_better,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    fn improves(&self, value: f64) -> bool {
        if value.is_nan() {
            return false;
        }
        match self.best {
            None => true,
            Some(b) if self.higher_is_better => value > b,
            Some(b) => value < b,
        }
    }

    /// Records the metric of `epoch` (1-based). Returns the decision and
    /// whether this epoch is the new best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> (Decision, bool) {
        let improved = self.improves(value);
        if improved {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        if epoch <= self.patience + 1 {
            self.stale = 0;
        }
        let stop = epoch > self.patience && self.stale >= self.patience.max(1);
        (if stop { Decision::Stop } else { Decision::Continue }, improved)
    }
}

pub fn early_stop(state: &mut EarlyStopper, epoch: usize, val_metric: f64) -> Decision {
    state.observe(epoch, val_metric).0
}
