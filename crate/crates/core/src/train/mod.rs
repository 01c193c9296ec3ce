//! Training loops: CE baselines, offline distillation with a frozen teacher
//! bank, online distillation between two peers with an evolving bank, and
//! teacher-free distillation from a pretrained copy of the student.
//!
//! All loops are sequential over mini-batches. Within a batch the per-sample
//! gradients are summed in batch order, so runs are bit-reproducible.

mod config;
mod experiments;
mod metrics;

use std::time::Instant;

pub use config::{Ablation, ActiveTerms, LrSchedule, Mode, OnlineConfig, TrainConfig};
pub use experiments::{
    argmax_point, run_ablation_grid, run_online_comparison, run_sweep, run_teacher_free_comparison, train_teachers,
    AblationCell, CellResult, ExperimentSetup, OnlineComparison, SweepAxis, SweepPoint, SweepValue,
    TeacherFreeComparison,
};
pub use metrics::{mean_std, parse_metrics_csv, EpochMetrics, RunMetrics, StepRecord, METRICS_HEADER, METRIC_SERIES};

use crate::bank::{aggregate_from, build_bank, build_bank_at_epoch, retrieve_positive, FeatureBank, NegativeCache};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, NegativeContext, SampleContext};
use crate::net::{
    backward_accumulate, forward, init_model, sgd_step, ForwardRecord, MlpArchitecture, MlpModel, MomentumBuffer,
    SgdParams,
};
use crate::numerics::{argmax, softmax_with_temperature, ProbVector};
use crate::rng::{SeededRng, Stream};

/// A failed run, with whatever metrics were recorded before the failure.
#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct TrainError {
    pub source: Error,
    pub partial: Option<RunMetrics>,
}

impl From<Error> for TrainError {
    fn from(source: Error) -> Self {
        Self { source, partial: None }
    }
}

pub type TrainResult<T> = std::result::Result<T, TrainError>;

/// Top-1 accuracy; argmax ties resolve to the lower class index.
pub fn evaluate(model: &MlpModel, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    check_shapes(model.architecture(), dataset)?;
    let mut correct = 0usize;
    for i in 0..dataset.len() {
        let rec = train_forward(model, dataset.row(i))?;
        if argmax(&rec.logits) == dataset.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

fn check_shapes(arch: &MlpArchitecture, dataset: &LabeledDataset) -> Result<()> {
    if arch.input_dim() != dataset.dim() {
        return Err(Error::invalid(format!(
            "model expects {} inputs, dataset has dimension {}",
            arch.input_dim(),
            dataset.dim()
        )));
    }
    if arch.class_count() != dataset.class_count() {
        return Err(Error::invalid(format!(
            "model has {} outputs, dataset has {} classes",
            arch.class_count(),
            dataset.class_count()
        )));
    }
    Ok(())
}

/// Sample order of one epoch: Fisher-Yates on the epoch's shuffle sub-stream.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = SeededRng::with_stream_id(seed, ((Stream::Shuffle as u64) << 32) | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

/// Seed for the negative selection of one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    SeededRng::with_stream_id(seed, ((Stream::Negatives as u64) << 32) | epoch as u64).next_u64()
}

/// Per-sample supervision apart from the label.
#[derive(Clone, Copy, Default)]
struct Targets<'a> {
    teacher_logits: Option<&'a [f64]>,
    aggregated: Option<&'a ProbVector>,
    nicd: Option<(&'a ProbVector, NegativeContext<'a>)>,
}

#[derive(Debug, Default, Clone, Copy)]
struct Sums {
    ce: f64,
    kd: f64,
    picd: f64,
    nicd: f64,
    total: f64,
    n: usize,
    picd_evals: usize,
    nicd_evals: usize,
}

impl Sums {
    fn add(&mut self, o: &Sums) {
        self.ce += o.ce;
        self.kd += o.kd;
        self.picd += o.picd;
        self.nicd += o.nicd;
        self.total += o.total;
        self.n += o.n;
        self.picd_evals += o.picd_evals;
        self.nicd_evals += o.nicd_evals;
    }

    fn mean(&self, x: f64) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            x / self.n as f64
        }
    }

    fn step_record(&self, epoch: usize) -> StepRecord {
        StepRecord {
            epoch,
            ce: self.mean(self.ce),
            kd: self.mean(self.kd),
            picd: self.mean(self.picd),
            nicd: self.mean(self.nicd),
            total: self.mean(self.total),
        }
    }
}

/// Mean parameter gradient over a batch. `targets(position, sample)`
/// supplies each sample's supervision.
fn batch_gradient<'a>(
    model: &MlpModel,
    data: &LabeledDataset,
    batch: &[usize],
    loss: &LossConfig,
    targets: impl Fn(usize, usize) -> Targets<'a>,
) -> Result<(Vec<f64>, Sums)> {
    let mut grad = vec![0.0; model.parameters().len()];
    let mut sums = Sums::default();
    for (pos, &i) in batch.iter().enumerate() {
        let rec = train_forward(model, data.row(i))?;
        let t = targets(pos, i);
        let ctx = SampleContext {
            label: data.label(i),
            student_logits: &rec.logits,
            teacher_logits: t.teacher_logits,
            aggregated: t.aggregated,
            nicd: t.nicd,
        };
        let out = total_loss(&ctx, loss)?;
        backward_accumulate(model, &rec, &out.loss.logit_gradient, &mut grad)?;
        sums.ce += out.ce;
        sums.kd += out.kd;
        sums.total += out.loss.value;
        if let Some(v) = out.picd {
            sums.picd += v;
            sums.picd_evals += 1;
        }
        if let Some(v) = out.nicd {
            sums.nicd += v;
            sums.nicd_evals += 1;
        }
        sums.n += 1;
    }
    let scale = batch.len() as f64;
    for g in &mut grad {
        *g /= scale;
    }
    Ok((grad, sums))
}

struct Student {
    model: MlpModel,
    velocity: MomentumBuffer,
}

impl Student {
    fn new(model: MlpModel) -> Self {
        let velocity = MomentumBuffer::zeros(model.parameters().len());
        Self { model, velocity }
    }

    fn apply(self, grad: &[f64], cfg: &TrainConfig, epoch: usize) -> Result<Self> {
        let params = SgdParams {
            lr: cfg.lr.lr_at(epoch),
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        let (model, velocity) = sgd_step(self.model, grad, params, self.velocity)?;
        if let Some(i) = model.parameters().iter().position(|p| !p.is_finite()) {
            return Err(Error::NumericInstability(format!(
                "parameter {i} became non-finite at epoch {epoch}"
            )));
        }
        Ok(Self { model, velocity })
    }
}

// Inputs and parameters are finite by the time this runs, so a non-finite
// activation can only be overflow.
fn train_forward(model: &MlpModel, x: &[f64]) -> Result<ForwardRecord> {
    forward(model, x).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::NumericInstability(format!("forward pass overflowed: {msg}")),
        other => other,
    })
}

fn logits_of(model: &MlpModel, data: &LabeledDataset) -> Result<Vec<Vec<f64>>> {
    (0..data.len())
        .map(|i| train_forward(model, data.row(i)).map(|r| r.logits.into_inner()))
        .collect()
}

fn soften(logits: &[Vec<f64>], tau: f64) -> Result<Vec<ProbVector>> {
    logits.iter().map(|z| softmax_with_temperature(z, tau)).collect()
}

/// Aggregated positive targets for every bank row.
fn positive_targets(bank: &FeatureBank, predictions: &[ProbVector], cfg: &TrainConfig) -> Result<Vec<ProbVector>> {
    bank.check_positive_feasible()?;
    let retrieval = cfg.retrieval_for_run();
    (0..bank.len())
        .map(|i| {
            let r = retrieve_positive(bank, i, &retrieval)?;
            let r = if cfg.loss.use_a_weights {
                r
            } else {
                r.with_uniform_weights()
            };
            aggregate_from(predictions, &r)
        })
        .collect()
}

/// Negatives of every bank row for one epoch: teacher predictions and weights.
fn negative_targets(
    bank: &FeatureBank,
    checksum: u64,
    cache: &mut NegativeCache,
    predictions: &[ProbVector],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<(Vec<ProbVector>, Vec<f64>)>> {
    let retrieval = cfg.retrieval_for_run();
    let seed = epoch_seed(cfg.seed, epoch);
    (0..bank.len())
        .map(|i| {
            let r = cache.get(bank, checksum, i, &retrieval, seed)?;
            let r = if cfg.loss.use_b_weights {
                r.clone()
            } else {
                r.with_uniform_weights()
            };
            let probs = r.indices.iter().map(|&j| predictions[j].clone()).collect();
            Ok((probs, r.weights))
        })
        .collect()
}

fn epoch_metrics(
    model: &MlpModel,
    train: &LabeledDataset,
    test: &LabeledDataset,
    sums: &Sums,
    epoch: usize,
    bank_checksum: u64,
    started: Instant,
    cfg: &TrainConfig,
) -> Result<EpochMetrics> {
    Ok(EpochMetrics {
        epoch,
        ce: sums.mean(sums.ce),
        kd: sums.mean(sums.kd),
        picd: sums.mean(sums.picd),
        nicd: sums.mean(sums.nicd),
        total: sums.mean(sums.total),
        train_acc: evaluate(model, train)?,
        test_acc: evaluate(model, test)?,
        bank_checksum,
        wall_ms: if cfg.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        },
    })
}

fn with_partial<T>(metrics: &RunMetrics, r: Result<T>) -> TrainResult<T> {
    r.map_err(|source| TrainError {
        source,
        partial: Some(metrics.clone()),
    })
}

/// Plain cross-entropy training of `arch` from `init_model(arch, cfg.seed)`.
pub fn train_teacher(
    arch: &MlpArchitecture,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
) -> TrainResult<(MlpModel, RunMetrics)> {
    train_single(None, arch, train, test, cfg)
}

/// Offline in-context distillation from a frozen teacher.
///
/// The teacher bank and the aggregated positive targets are computed once;
/// negatives are re-selected at the start of every epoch.
pub fn distill_offline(
    teacher: &MlpModel,
    student_arch: &MlpArchitecture,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
) -> TrainResult<(MlpModel, RunMetrics)> {
    train_single(Some(teacher), student_arch, train, test, cfg)
}

fn train_single(
    teacher: Option<&MlpModel>,
    arch: &MlpArchitecture,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
) -> TrainResult<(MlpModel, RunMetrics)> {
    cfg.validate()?;
    check_shapes(arch, train)?;
    check_shapes(arch, test)?;
    if let Some(t) = teacher {
        check_shapes(t.architecture(), train)?;
    }

    let terms = if teacher.is_some() {
        cfg.active_terms()
    } else {
        ActiveTerms {
            picd: false,
            nicd: false,
            all_positives: false,
        }
    };
    let mut metrics = RunMetrics::default();

    let teacher_logits = teacher.map(|t| logits_of(t, train)).transpose()?;
    let bank = match teacher {
        Some(t) if terms.picd || terms.nicd => {
            metrics.bank_builds += 1;
            Some(build_bank(t, train)?)
        }
        _ => None,
    };
    let checksum = bank.as_ref().map_or(0, FeatureBank::checksum);
    let aggregated = match (&bank, &teacher_logits) {
        (Some(bank), Some(logits)) if terms.picd => Some(positive_targets(bank, &soften(logits, cfg.loss.tau1)?, cfg)?),
        _ => None,
    };
    let teacher_nicd = match &teacher_logits {
        Some(logits) if terms.nicd => Some(soften(logits, cfg.loss.tau_nicd)?),
        _ => None,
    };

    let mut student = Student::new(init_model(arch, cfg.seed));
    let mut cache = NegativeCache::new();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let negatives = match (&bank, &teacher_nicd) {
            (Some(bank), Some(preds)) => Some(with_partial(
                &metrics,
                negative_targets(bank, checksum, &mut cache, preds, cfg, epoch),
            )?),
            _ => None,
        };
        metrics.negative_retrievals = cache.computations();

        let mut epoch_sums = Sums::default();
        for batch in epoch_order(cfg.seed, epoch, train.len()).chunks(cfg.batch_size) {
            let step = batch_gradient(&student.model, train, batch, &cfg.loss, |_, i| Targets {
                teacher_logits: teacher_logits.as_ref().map(|l| l[i].as_slice()),
                aggregated: aggregated.as_ref().map(|a| &a[i]),
                nicd: match (&teacher_nicd, &negatives) {
                    (Some(tp), Some(neg)) => Some((
                        &tp[i],
                        NegativeContext {
                            probs: &neg[i].0,
                            weights: &neg[i].1,
                        },
                    )),
                    _ => None,
                },
            });
            let (grad, sums) = with_partial(&metrics, step)?;
            metrics.steps.push(sums.step_record(epoch));
            epoch_sums.add(&sums);
            student = with_partial(&metrics, student.apply(&grad, cfg, epoch))?;
        }
        metrics.picd_evaluations += epoch_sums.picd_evals;
        metrics.nicd_evaluations += epoch_sums.nicd_evals;
        let m = epoch_metrics(&student.model, train, test, &epoch_sums, epoch, checksum, started, cfg);
        let m = with_partial(&metrics, m)?;
        metrics.epochs.push(m);
    }
    metrics.final_test_acc = metrics.epochs.last().map_or(0.0, |e| e.test_acc);
    Ok((student.model, metrics))
}

/// Result of a teacher-free run: the CE baseline that served as teacher and
/// the distilled student.
#[derive(Debug, Clone)]
pub struct TeacherFreeOutcome {
    pub baseline: MlpModel,
    pub baseline_metrics: RunMetrics,
    pub student: MlpModel,
    pub student_metrics: RunMetrics,
}

/// Trains a CE baseline of `arch`, freezes it, then distills a fresh copy of
/// `arch` from it offline.
pub fn distill_teacher_free(
    arch: &MlpArchitecture,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
) -> TrainResult<TeacherFreeOutcome> {
    let (baseline, baseline_metrics) = train_teacher(arch, train, test, cfg)?;
    let (student, student_metrics) = distill_offline(&baseline, arch, train, test, cfg)?;
    Ok(TeacherFreeOutcome {
        baseline,
        baseline_metrics,
        student,
        student_metrics,
    })
}

#[derive(Debug, Clone)]
pub struct OnlineOutcome {
    pub student1: MlpModel,
    pub student2: MlpModel,
    pub metrics1: RunMetrics,
    pub metrics2: RunMetrics,
}

/// Online distillation between two peers.
///
/// At every epoch boundary the bank is rebuilt from student 1's features and
/// both students' predictions are snapshotted. Student 2 receives the
/// in-context terms computed from student 1's snapshot (and student 1 from
/// student 2's when `cfg.online.mirror` is set); both exchange vanilla KD
/// signals on the live logits of every batch.
pub fn distill_online(
    arch1: &MlpArchitecture,
    arch2: &MlpArchitecture,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
) -> TrainResult<OnlineOutcome> {
    cfg.validate()?;
    for arch in [arch1, arch2] {
        check_shapes(arch, train)?;
        check_shapes(arch, test)?;
    }
    let terms = cfg.active_terms();
    let mirror = cfg.online.mirror;

    let mut s1 = Student::new(init_model(arch1, cfg.seed));
    let mut s2 = Student::new(init_model(arch2, cfg.online.peer_seed));
    let mut m1 = RunMetrics::default();
    let mut m2 = RunMetrics::default();
    let mut cache = NegativeCache::new();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let bank = with_partial(&m2, build_bank_at_epoch(&s1.model, train, epoch))?;
        let checksum = bank.checksum();
        m1.bank_builds += 1;
        m2.bank_builds += 1;

        let snap1 = with_partial(&m2, logits_of(&s1.model, train))?;
        let snap2 = with_partial(&m2, logits_of(&s2.model, train))?;
        let mut setup = || -> Result<_> {
            let mut agg = (None, None);
            let mut neg = (None, None);
            if terms.picd {
                agg.1 = Some(positive_targets(&bank, &soften(&snap1, cfg.loss.tau1)?, cfg)?);
                if mirror {
                    agg.0 = Some(positive_targets(&bank, &soften(&snap2, cfg.loss.tau1)?, cfg)?);
                }
            }
            if terms.nicd {
                let p1 = soften(&snap1, cfg.loss.tau_nicd)?;
                neg.1 = Some(negative_targets(&bank, checksum, &mut cache, &p1, cfg, epoch)?);
                if mirror {
                    let p2 = soften(&snap2, cfg.loss.tau_nicd)?;
                    neg.0 = Some(negative_targets(&bank, checksum, &mut cache, &p2, cfg, epoch)?);
                }
            }
            Ok((agg, neg))
        };
        let ((agg1, agg2), (neg1, neg2)) = with_partial(&m2, setup())?;
        m2.negative_retrievals = cache.computations();
        m1.negative_retrievals = cache.computations();

        let mut sums1 = Sums::default();
        let mut sums2 = Sums::default();
        for batch in epoch_order(cfg.seed, epoch, train.len()).chunks(cfg.batch_size) {
            let live = |s: &Student| -> Result<Vec<Vec<f64>>> {
                batch
                    .iter()
                    .map(|&i| train_forward(&s.model, train.row(i)).map(|r| r.logits.into_inner()))
                    .collect()
            };
            let live1 = with_partial(&m2, live(&s1))?;
            let live2 = with_partial(&m2, live(&s2))?;
            let soft = |l: &[Vec<f64>]| -> Result<Option<Vec<ProbVector>>> {
                if terms.nicd {
                    Ok(Some(soften(l, cfg.loss.tau_nicd)?))
                } else {
                    Ok(None)
                }
            };
            let live_p1 = with_partial(&m2, soft(&live1))?;
            let live_p2 = with_partial(&m2, soft(&live2))?;

            let step2 = batch_gradient(&s2.model, train, batch, &cfg.loss, |pos, i| Targets {
                teacher_logits: Some(live1[pos].as_slice()),
                aggregated: agg2.as_ref().map(|a| &a[i]),
                nicd: match (&live_p1, &neg2) {
                    (Some(tp), Some(n)) => Some((
                        &tp[pos],
                        NegativeContext {
                            probs: &n[i].0,
                            weights: &n[i].1,
                        },
                    )),
                    _ => None,
                },
            });
            let step1 = batch_gradient(&s1.model, train, batch, &cfg.loss, |pos, i| Targets {
                teacher_logits: Some(live2[pos].as_slice()),
                aggregated: agg1.as_ref().map(|a| &a[i]),
                nicd: match (&live_p2, &neg1) {
                    (Some(tp), Some(n)) => Some((
                        &tp[pos],
                        NegativeContext {
                            probs: &n[i].0,
                            weights: &n[i].1,
                        },
                    )),
                    _ => None,
                },
            });
            let (g2, st2) = with_partial(&m2, step2)?;
            let (g1, st1) = with_partial(&m1, step1)?;
            m1.steps.push(st1.step_record(epoch));
            m2.steps.push(st2.step_record(epoch));
            sums1.add(&st1);
            sums2.add(&st2);
            s1 = with_partial(&m1, s1.apply(&g1, cfg, epoch))?;
            s2 = with_partial(&m2, s2.apply(&g2, cfg, epoch))?;
        }
        m1.picd_evaluations += sums1.picd_evals;
        m1.nicd_evaluations += sums1.nicd_evals;
        m2.picd_evaluations += sums2.picd_evals;
        m2.nicd_evaluations += sums2.nicd_evals;
        let e1 = epoch_metrics(&s1.model, train, test, &sums1, epoch, checksum, started, cfg);
        let e1 = with_partial(&m1, e1)?;
        let e2 = epoch_metrics(&s2.model, train, test, &sums2, epoch, checksum, started, cfg);
        let e2 = with_partial(&m2, e2)?;
        m1.epochs.push(e1);
        m2.epochs.push(e2);
    }
    m1.final_test_acc = m1.epochs.last().map_or(0.0, |e| e.test_acc);
    m2.final_test_acc = m2.epochs.last().map_or(0.0, |e| e.test_acc);
    Ok(OnlineOutcome {
        student1: s1.model,
        student2: s2.model,
        metrics1: m1,
        metrics2: m2,
    })
}
