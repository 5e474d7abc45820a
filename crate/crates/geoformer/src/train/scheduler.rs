//! Plateau learning-rate scheduler: decay by a fixed ratio when validation
//! stops improving, never below the floor.

#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    ratio: f64,
    floor: f64,
    patience: usize,
    /// Minimum relative improvement that counts as progress.
    threshold: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub const RATIO: f64 = 0.8;
    pub const FLOOR: f64 = 1e-6;

    pub fn new(init_lr: f64, patience: usize, threshold: f64) -> Self {
        PlateauScheduler {
            lr: init_lr,
            ratio: Self::RATIO,
            floor: Self::FLOOR,
            patience: patience.max(1),
            threshold,
            best: None,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Feed one validation loss; returns the (possibly reduced) rate.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(b) => val_loss < b * (1.0 - self.threshold),
        };
        if improved {
            self.best = Some(val_loss);
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr * self.ratio).max(self.floor);
                self.stale = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improving_loss_keeps_rate() {
        let mut s = PlateauScheduler::new(1e-4, 2, 1e-4);
        for i in 0..10 {
            let lr = s.step(1.0 / (i + 1) as f64);
            assert_eq!(lr, 1e-4);
        }
    }

    #[test]
    fn flat_loss_decays_on_patience() {
        let mut s = PlateauScheduler::new(1e-4, 2, 1e-4);
        let seq: Vec<f64> = (0..5).map(|_| s.step(1.0)).collect();
        let expect = [1e-4, 1e-4, 8e-5, 8e-5, 6.4e-5];
        for (got, want) in seq.iter().zip(expect) {
            assert!((got - want).abs() < 1e-18, "{got} vs {want}");
        }
    }

    #[test]
    fn rate_pins_at_floor_exactly() {
        let mut s = PlateauScheduler::new(1e-4, 1, 1e-4);
        let mut last = 0.0;
        for _ in 0..200 {
            last = s.step(1.0);
        }
        assert_eq!(last, 1e-6);
    }

    #[test]
    fn matches_closed_form_decay_table() {
        // with patience 1 and flat loss, lr after k decays is
        // max(1e-4 * 0.8^k, 1e-6)
        let mut s = PlateauScheduler::new(1e-4, 1, 1e-4);
        s.step(1.0); // establishes best, no decay
        let mut expected = 1e-4f64;
        for _ in 0..60 {
            let lr = s.step(1.0);
            expected = (expected * 0.8).max(1e-6);
            assert_eq!(lr, expected);
        }
    }
}
