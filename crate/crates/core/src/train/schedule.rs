//! Plateau-driven learning-rate decay for the two optimisers.

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlateauSchedule {
    pub lr_main: f64,
    pub lr_disc: f64,
    main_decay: f64,
    disc_decay: f64,
    patience: usize,
    threshold: f64,
    floor: f64,
    best: f64,
    bad_evals: usize,
}

impl PlateauSchedule {
    pub fn new(
        lr_main: f64,
        lr_disc: f64,
        main_decay: f64,
        disc_decay: f64,
        patience: usize,
        threshold: f64,
        floor: f64,
    ) -> Self {
        PlateauSchedule {
            lr_main,
            lr_disc,
            main_decay,
            disc_decay,
            patience,
            threshold,
            floor,
            best: f64::INFINITY,
            bad_evals: 0,
        }
    }

    /// Records a validation loss; returns true when the rates were decayed.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best - self.threshold {
            self.best = val_loss;
            self.bad_evals = 0;
            return false;
        }
        self.bad_evals += 1;
        if self.bad_evals < self.patience.max(1) {
            return false;
        }
        self.bad_evals = 0;
        self.lr_main = (self.lr_main / self.main_decay).max(self.floor);
        self.lr_disc = (self.lr_disc / self.disc_decay).max(self.floor);
        true
    }
}
