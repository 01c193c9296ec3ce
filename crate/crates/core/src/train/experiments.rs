//! Multi-seed harnesses: ablation grids, hyperparameter sweeps and the
//! paired comparisons for the online and teacher-free modes.
//!
//! Seeds run on scoped threads; results are always collected in seed order.

use std::thread;

use super::{
    distill_offline, distill_online, distill_teacher_free, mean_std, train_teacher, Ablation, TrainConfig, TrainError,
};
use crate::bank::PositiveCount;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::net::{MlpArchitecture, MlpModel};

/// Shared inputs of a multi-seed experiment. `base.seed` is overridden per run.
#[derive(Debug, Clone)]
pub struct ExperimentSetup<'a> {
    pub teacher_arch: &'a MlpArchitecture,
    pub student_arch: &'a MlpArchitecture,
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentSetup<'_> {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.base.clone()
        }
    }
}

fn per_seed<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || f(seed))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("experiment worker panicked"))
            .collect()
    })
}

fn source(e: TrainError) -> Error {
    e.source
}

/// One CE-trained teacher per seed, in seed order.
pub fn train_teachers(setup: &ExperimentSetup<'_>) -> Result<Vec<MlpModel>> {
    per_seed(&setup.seeds, |seed| {
        train_teacher(setup.teacher_arch, setup.train, setup.test, &setup.config(seed))
            .map(|(m, _)| m)
            .map_err(source)
    })
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub ablation: Ablation,
    pub use_a_weights: bool,
    pub use_b_weights: bool,
}

impl AblationCell {
    pub fn new(ablation: Ablation) -> Self {
        Self {
            ablation,
            use_a_weights: true,
            use_b_weights: true,
        }
    }

    /// `kd_picd`, `full/a=off`, `full/a=off,b=off`, ...
    pub fn label(&self) -> String {
        let mut off = Vec::new();
        if !self.use_a_weights {
            off.push("a=off");
        }
        if !self.use_b_weights {
            off.push("b=off");
        }
        if off.is_empty() {
            self.ablation.name().to_string()
        } else {
            format!("{}/{}", self.ablation.name(), off.join(","))
        }
    }

    /// The row plus every on/off combination of the weightings it uses.
    pub fn with_weight_variants(ablation: Ablation) -> Vec<Self> {
        let (a, b) = match ablation {
            Ablation::KdOnly => (false, false),
            Ablation::KdPicd => (true, false),
            Ablation::KdNicd => (false, true),
            Ablation::None | Ablation::Full | Ablation::IckdAll => (true, true),
        };
        let mut out = Vec::new();
        for use_a in if a { vec![true, false] } else { vec![true] } {
            for use_b in if b { vec![true, false] } else { vec![true] } {
                out.push(Self {
                    ablation,
                    use_a_weights: use_a,
                    use_b_weights: use_b,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: AblationCell,
    /// Final test accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Distills one student per (cell, seed) from the matching teacher.
pub fn run_ablation_grid(
    setup: &ExperimentSetup<'_>,
    teachers: &[MlpModel],
    cells: &[AblationCell],
) -> Result<Vec<CellResult>> {
    if teachers.len() != setup.seeds.len() {
        return Err(Error::invalid(format!(
            "{} teachers for {} seeds",
            teachers.len(),
            setup.seeds.len()
        )));
    }
    let mut out = Vec::with_capacity(cells.len());
    for cell in cells {
        let indexed: Vec<u64> = (0..setup.seeds.len() as u64).collect();
        let accuracies = per_seed(&indexed, |k| {
            let k = k as usize;
            let mut cfg = setup.config(setup.seeds[k]);
            cfg.ablation = cell.ablation;
            cfg.loss.use_a_weights = cell.use_a_weights;
            cfg.loss.use_b_weights = cell.use_b_weights;
            distill_offline(&teachers[k], setup.student_arch, setup.train, setup.test, &cfg)
                .map(|(_, m)| m.final_test_acc)
                .map_err(source)
        })?;
        let (mean, std) = mean_std(&accuracies);
        out.push(CellResult {
            cell: cell.clone(),
            accuracies,
            mean,
            std,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    K,
    Beta1,
    Beta2,
    GammaPicd,
    GammaNicd,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::K,
        SweepAxis::Beta1,
        SweepAxis::Beta2,
        SweepAxis::GammaPicd,
        SweepAxis::GammaNicd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::Beta1 => "beta1",
            SweepAxis::Beta2 => "beta2",
            SweepAxis::GammaPicd => "gamma_picd",
            SweepAxis::GammaNicd => "gamma_nicd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Default grid of the axis.
    pub fn grid(self) -> Vec<SweepValue> {
        use SweepValue::{All, Num};
        match self {
            SweepAxis::K => vec![Num(1.0), Num(5.0), Num(25.0), All],
            SweepAxis::Beta1 => [0.5, 1.0, 2.0, 4.0].map(Num).to_vec(),
            SweepAxis::Beta2 => [1.0, 2.0, 4.0, 8.0].map(Num).to_vec(),
            SweepAxis::GammaPicd => [0.0, 1.0, 2.0, 4.0, 8.0].map(Num).to_vec(),
            SweepAxis::GammaNicd => [0.0, 2.5, 5.0, 10.0, 20.0].map(Num).to_vec(),
        }
    }

    /// Optimum reported for the full-scale image benchmarks.
    pub fn reference_optimum(self) -> SweepValue {
        SweepValue::Num(match self {
            SweepAxis::K => 100.0,
            SweepAxis::Beta1 => 1.0,
            SweepAxis::Beta2 => 4.0,
            SweepAxis::GammaPicd => 2.0,
            SweepAxis::GammaNicd => 10.0,
        })
    }

    pub fn apply(self, cfg: &mut TrainConfig, value: SweepValue) -> Result<()> {
        match (self, value) {
            (SweepAxis::K, SweepValue::All) => cfg.retrieval.k_positive = PositiveCount::All,
            (SweepAxis::K, SweepValue::Num(v)) if v >= 1.0 && v.fract() == 0.0 => {
                cfg.retrieval.k_positive = PositiveCount::Top(v as usize)
            }
            (_, SweepValue::All) | (SweepAxis::K, _) => {
                return Err(Error::invalid(format!(
                    "invalid value {value} for axis {}",
                    self.name()
                )))
            }
            (SweepAxis::Beta1, SweepValue::Num(v)) => cfg.retrieval.beta1 = v,
            (SweepAxis::Beta2, SweepValue::Num(v)) => cfg.retrieval.beta2 = v,
            (SweepAxis::GammaPicd, SweepValue::Num(v)) => cfg.loss.gamma_picd = v,
            (SweepAxis::GammaNicd, SweepValue::Num(v)) => cfg.loss.gamma_nicd = v,
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepValue {
    Num(f64),
    All,
}

impl std::fmt::Display for SweepValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepValue::Num(v) => write!(f, "{v}"),
            SweepValue::All => f.write_str("all"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub axis: SweepAxis,
    pub value: SweepValue,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Full-objective distillation at every grid value of `axis`.
pub fn run_sweep(
    setup: &ExperimentSetup<'_>,
    teachers: &[MlpModel],
    axis: SweepAxis,
    values: &[SweepValue],
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(values.len());
    for &value in values {
        let mut base = setup.base.clone();
        base.ablation = Ablation::Full;
        axis.apply(&mut base, value)?;
        let sub = ExperimentSetup { base, ..setup.clone() };
        let cell = run_ablation_grid(&sub, teachers, &[AblationCell::new(Ablation::Full)])?;
        let r = cell.into_iter().next().expect("one cell");
        out.push(SweepPoint {
            axis,
            value,
            accuracies: r.accuracies,
            mean: r.mean,
            std: r.std,
        });
    }
    Ok(out)
}

/// Grid value with the highest mean accuracy; ties go to the earlier value.
pub fn argmax_point(points: &[SweepPoint]) -> Option<&SweepPoint> {
    points.iter().fold(None, |best: Option<&SweepPoint>, p| match best {
        Some(b) if b.mean >= p.mean => Some(b),
        _ => Some(p),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFreeComparison {
    pub baseline: Vec<f64>,
    pub student: Vec<f64>,
}

pub fn run_teacher_free_comparison(
    arch: &MlpArchitecture,
    train: &LabeledDataset,
    test: &LabeledDataset,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<TeacherFreeComparison> {
    let runs = per_seed(seeds, |seed| {
        let cfg = TrainConfig { seed, ..base.clone() };
        let o = distill_teacher_free(arch, train, test, &cfg).map_err(source)?;
        Ok((o.baseline_metrics.final_test_acc, o.student_metrics.final_test_acc))
    })?;
    Ok(TeacherFreeComparison {
        baseline: runs.iter().map(|r| r.0).collect(),
        student: runs.iter().map(|r| r.1).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineComparison {
    pub solo1: Vec<f64>,
    pub solo2: Vec<f64>,
    pub online1: Vec<f64>,
    pub online2: Vec<f64>,
}

/// Online pairs against CE-only training of each architecture with the same
/// initialization seeds. Student 2 of run `seed` is seeded with
/// `seed + base.online.peer_seed`.
pub fn run_online_comparison(
    arch1: &MlpArchitecture,
    arch2: &MlpArchitecture,
    train: &LabeledDataset,
    test: &LabeledDataset,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<OnlineComparison> {
    let runs = per_seed(seeds, |seed| {
        let mut cfg = TrainConfig { seed, ..base.clone() };
        cfg.online.peer_seed = seed.wrapping_add(base.online.peer_seed);
        let solo2_cfg = TrainConfig {
            seed: cfg.online.peer_seed,
            ..cfg.clone()
        };
        let solo1 = train_teacher(arch1, train, test, &cfg)
            .map_err(source)?
            .1
            .final_test_acc;
        let solo2 = train_teacher(arch2, train, test, &solo2_cfg)
            .map_err(source)?
            .1
            .final_test_acc;
        let o = distill_online(arch1, arch2, train, test, &cfg).map_err(source)?;
        Ok([solo1, solo2, o.metrics1.final_test_acc, o.metrics2.final_test_acc])
    })?;
    Ok(OnlineComparison {
        solo1: runs.iter().map(|r| r[0]).collect(),
        solo2: runs.iter().map(|r| r[1]).collect(),
        online1: runs.iter().map(|r| r[2]).collect(),
        online2: runs.iter().map(|r| r[3]).collect(),
    })
}
