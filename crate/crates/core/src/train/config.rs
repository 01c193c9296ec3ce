use crate::bank::{PositiveCount, RetrievalConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;

/// Piecewise-constant learning rate: multiplied by `decay_factor` at the
/// start of every epoch listed in `decay_epochs` (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.initial * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Offline,
    Online,
    TeacherFree,
    CeOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Offline => "offline",
            Mode::Online => "online",
            Mode::TeacherFree => "teacher_free",
            Mode::CeOnly => "ce_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "offline" => Mode::Offline,
            "online" => Mode::Online,
            "teacher_free" => Mode::TeacherFree,
            "ce_only" => Mode::CeOnly,
            _ => return None,
        })
    }
}

/// Which in-context terms a run evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Terms follow the configured gammas.
    None,
    KdOnly,
    KdPicd,
    KdNicd,
    Full,
    /// Full objective with every same-class row as a positive.
    IckdAll,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::KdOnly,
        Ablation::KdPicd,
        Ablation::KdNicd,
        Ablation::Full,
        Ablation::IckdAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::KdOnly => "kd_only",
            Ablation::KdPicd => "kd_picd",
            Ablation::KdNicd => "kd_nicd",
            Ablation::Full => "full",
            Ablation::IckdAll => "ickd_all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineConfig {
    /// Also give student 1 the in-context terms, using student 2's predictions.
    pub mirror: bool,
    /// Initialization seed of student 2.
    pub peer_seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            mirror: false,
            peer_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub retrieval: RetrievalConfig,
    pub mode: Mode,
    pub ablation: Ablation,
    pub online: OnlineConfig,
    /// When false the `wall_ms` column is written as 0 so metrics files are
    /// reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr: LrSchedule {
                initial: 0.05,
                decay_epochs: vec![30, 45],
                decay_factor: 0.1,
            },
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            loss: LossConfig::default(),
            retrieval: RetrievalConfig::default(),
            mode: Mode::Offline,
            ablation: Ablation::None,
            online: OnlineConfig::default(),
            record_wall_time: false,
        }
    }
}

/// Terms a run will evaluate, after applying the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveTerms {
    pub picd: bool,
    pub nicd: bool,
    pub all_positives: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr.decay_factor > 0.0 && self.lr.decay_factor <= 1.0) {
            return Err(Error::invalid(format!(
                "decay factor must lie in (0, 1], got {}",
                self.lr.decay_factor
            )));
        }
        if !(self.lr.initial > 0.0 && self.lr.initial.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.lr.initial
            )));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        self.loss.validate()?;
        self.retrieval.validate()
    }

    /// A term is evaluated only if the ablation keeps it and its gamma is
    /// positive, so switching a gamma to 0 and dropping the term are the
    /// same run.
    pub fn active_terms(&self) -> ActiveTerms {
        let picd_gamma = self.loss.gamma_picd > 0.0;
        let nicd_gamma = self.loss.gamma_nicd > 0.0;
        let (picd, nicd) = match self.ablation {
            Ablation::KdOnly => (false, false),
            Ablation::KdPicd => (picd_gamma, false),
            Ablation::KdNicd => (false, nicd_gamma),
            Ablation::None | Ablation::Full | Ablation::IckdAll => (picd_gamma, nicd_gamma),
        };
        ActiveTerms {
            picd,
            nicd,
            all_positives: self.ablation == Ablation::IckdAll,
        }
    }

    pub(crate) fn retrieval_for_run(&self) -> RetrievalConfig {
        let mut r = self.retrieval;
        if self.active_terms().all_positives {
            r.k_positive = PositiveCount::All;
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_steps() {
        let s = LrSchedule {
            initial: 0.1,
            decay_epochs: vec![2, 4],
            decay_factor: 0.5,
        };
        let lrs: Vec<f64> = (0..6).map(|e| s.lr_at(e)).collect();
        assert_eq!(lrs, vec![0.1, 0.1, 0.05, 0.05, 0.025, 0.025]);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let mut c = TrainConfig::default();
        c.lr.decay_factor = 0.0;
        assert!(c.validate().is_err());
        c.lr.decay_factor = 1.0;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn ablation_switches_terms() {
        let mut c = TrainConfig::default();
        let terms = |c: &TrainConfig| {
            let t = c.active_terms();
            (t.picd, t.nicd)
        };
        c.ablation = Ablation::KdOnly;
        assert_eq!(terms(&c), (false, false));
        c.ablation = Ablation::KdPicd;
        assert_eq!(terms(&c), (true, false));
        c.ablation = Ablation::KdNicd;
        assert_eq!(terms(&c), (false, true));
        c.ablation = Ablation::Full;
        assert_eq!(terms(&c), (true, true));
        c.loss.gamma_picd = 0.0;
        assert_eq!(terms(&c), (false, true));
        c.ablation = Ablation::IckdAll;
        assert!(c.active_terms().all_positives);
        assert_eq!(c.retrieval_for_run().k_positive, PositiveCount::All);
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()), Some(a));
        }
    }
}
