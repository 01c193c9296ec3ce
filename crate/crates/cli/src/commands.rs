use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ickd::data::{dataset_bytes, gen_blobs, gen_spirals, load_dataset, LabeledDataset};
use ickd::net::{checkpoint_bytes, checkpoint_from_bytes, MlpArchitecture, MlpModel};
use ickd::numerics::kl_divergence;
use ickd::train::{
    argmax_point, distill_offline, distill_online, distill_teacher_free, mean_std, parse_metrics_csv,
    run_ablation_grid, run_online_comparison, run_sweep, run_teacher_free_comparison, train_teacher, train_teachers,
    Ablation, AblationCell, ExperimentSetup, Mode, RunMetrics, TrainError, METRIC_SERIES,
};
use ickd::verify::{run_battery, BatteryConfig, Hooks};

use crate::config::{apply_overrides, parse_config, DataSource, RunConfig};
use crate::manifest::{sha256_hex, InputChecksum, RunManifest};
use crate::{read_input, write_file, Cli, CliError, Command};

struct Context {
    cfg: RunConfig,
    config_path: Option<PathBuf>,
    overrides: Vec<String>,
    out: PathBuf,
    quiet: bool,
}

impl Context {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn manifest(&self, command: &str, inputs: Vec<InputChecksum>, outputs: &[&str]) -> Result<(), CliError> {
        let mut m = RunManifest::new(command);
        m.config_path = self.config_path.as_ref().map(|p| p.display().to_string());
        m.overrides = self.overrides.clone();
        m.config = self.cfg.entries();
        m.inputs = inputs;
        m.outputs = outputs.iter().map(|o| self.path(o).display().to_string()).collect();
        m.write(&self.path("manifest.json"))
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Verify { inject_fault } = &cli.command {
        return verify(inject_fault.as_deref(), cli.quiet);
    }
    let mut cfg = match &cli.config {
        Some(p) => {
            let bytes = read_input(p)?;
            let text =
                String::from_utf8(bytes).map_err(|_| CliError::Format(format!("{}: not valid UTF-8", p.display())))?;
            parse_config(&text, &p.display().to_string())?
        }
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let ctx = Context {
        cfg,
        config_path: cli.config.clone(),
        overrides: cli.set.clone(),
        out: cli.out.clone().unwrap_or_else(|| PathBuf::from("out")),
        quiet: cli.quiet,
    };
    match cli.command {
        Command::ShowConfig => {
            print!("{}", ctx.cfg.to_text());
            Ok(())
        }
        Command::TrainTeacher => cmd_train_teacher(ctx),
        Command::Distill => cmd_distill(ctx),
        Command::Online { compare } => cmd_online(ctx, compare),
        Command::TeacherFree { compare } => cmd_teacher_free(ctx, compare),
        Command::Ablate => cmd_ablate(ctx),
        Command::Plotdata { metrics, sweep } => {
            if sweep {
                cmd_sweep(ctx)
            } else {
                plotdata(&metrics, cli.out.as_deref())
            }
        }
        Command::Verify { .. } => unreachable!(),
    }
}

fn invalid(e: ickd::Error) -> CliError {
    match e {
        ickd::Error::InvalidArgument(m) => CliError::InvalidConfig(m),
        e => CliError::Core(e),
    }
}

fn dataset_input(name: &str, path: Option<&Path>, ds: &LabeledDataset) -> Result<InputChecksum, CliError> {
    Ok(InputChecksum {
        name: name.into(),
        path: path.map(|p| p.display().to_string()),
        sha256: sha256_hex(&dataset_bytes(ds)?),
    })
}

fn load_data(ctx: &Context) -> Result<(LabeledDataset, LabeledDataset, Vec<InputChecksum>), CliError> {
    let d = &ctx.cfg.data;
    let (train, test, paths) = match d.source {
        DataSource::Blobs => {
            let ds = gen_blobs(d.classes, d.per_class, d.dim, d.spread, d.seed).map_err(invalid)?;
            let (train, test) = ds.split_stratified(d.test_per_class).map_err(invalid)?;
            (train, test, (None, None))
        }
        DataSource::Spirals => {
            // Separate draws: a tail split would hold out the outer ends of the arms.
            let train = gen_spirals(d.classes, d.per_class, d.noise, d.seed).map_err(invalid)?;
            let test = gen_spirals(d.classes, d.test_per_class, d.noise, d.seed.wrapping_add(1)).map_err(invalid)?;
            (train, test, (None, None))
        }
        DataSource::File => {
            let need = |p: &Option<PathBuf>, key: &str| {
                p.clone()
                    .ok_or_else(|| CliError::InvalidConfig(format!("{key} is required when data.source = file")))
            };
            let tp = need(&d.train_file, "data.train_file")?;
            let vp = need(&d.test_file, "data.test_file")?;
            for p in [&tp, &vp] {
                if !p.is_file() {
                    return Err(CliError::Missing(p.display().to_string()));
                }
            }
            let train = load_dataset(&tp).map_err(format_error)?;
            let test = load_dataset(&vp).map_err(format_error)?;
            (train, test, (Some(tp), Some(vp)))
        }
    };
    let inputs = vec![
        dataset_input("train_data", paths.0.as_deref(), &train)?,
        dataset_input("test_data", paths.1.as_deref(), &test)?,
    ];
    Ok((train, test, inputs))
}

fn format_error(e: ickd::Error) -> CliError {
    match e {
        ickd::Error::Format { .. } => CliError::Format(e.to_string()),
        e => CliError::Core(e),
    }
}

fn arch(hidden: &[usize], data: &LabeledDataset) -> Result<MlpArchitecture, CliError> {
    let mut widths = vec![data.dim()];
    widths.extend_from_slice(hidden);
    widths.push(data.class_count());
    MlpArchitecture::new(widths).map_err(invalid)
}

fn prepare(ctx: &mut Context, mode: Mode) -> Result<(), CliError> {
    ctx.cfg.train.mode = mode;
    ctx.cfg.train.validate().map_err(invalid)
}

/// Writes whatever was recorded before a failure, then passes it on.
fn keep_partial(ctx: &Context, name: &str, e: TrainError) -> CliError {
    if let Some(m) = &e.partial {
        let _ = write_file(&ctx.path(name), m.to_csv().as_bytes());
    }
    e.into()
}

fn summary(ctx: &Context, label: &str, m: &RunMetrics) {
    ctx.say(format!(
        "{label}: final test accuracy {:.4} after {} epochs",
        m.final_test_acc,
        m.epochs.len()
    ));
}

fn cmd_train_teacher(mut ctx: Context) -> Result<(), CliError> {
    prepare(&mut ctx, Mode::CeOnly)?;
    let (train, test, inputs) = load_data(&ctx)?;
    let a = arch(&ctx.cfg.model.teacher_hidden, &train)?;
    ctx.manifest("train-teacher", inputs, &["metrics.csv", "model.ckpt"])?;
    let (model, metrics) =
        train_teacher(&a, &train, &test, &ctx.cfg.train).map_err(|e| keep_partial(&ctx, "metrics.csv", e))?;
    write_file(&ctx.path("metrics.csv"), metrics.to_csv().as_bytes())?;
    write_file(&ctx.path("model.ckpt"), &checkpoint_bytes(&model))?;
    summary(&ctx, "teacher", &metrics);
    Ok(())
}

/// Loads `model.teacher_checkpoint`, or trains and saves a teacher.
fn teacher(ctx: &Context, train: &LabeledDataset, test: &LabeledDataset) -> Result<MlpModel, CliError> {
    match &ctx.cfg.model.teacher_checkpoint {
        Some(p) => checkpoint_from_bytes(&read_input(p)?).map_err(format_error),
        None => {
            let a = arch(&ctx.cfg.model.teacher_hidden, train)?;
            let mut cfg = ctx.cfg.train.clone();
            cfg.mode = Mode::CeOnly;
            let (model, metrics) =
                train_teacher(&a, train, test, &cfg).map_err(|e| keep_partial(ctx, "teacher_metrics.csv", e))?;
            write_file(&ctx.path("teacher_metrics.csv"), metrics.to_csv().as_bytes())?;
            write_file(&ctx.path("teacher.ckpt"), &checkpoint_bytes(&model))?;
            summary(ctx, "teacher", &metrics);
            Ok(model)
        }
    }
}

fn cmd_distill(mut ctx: Context) -> Result<(), CliError> {
    prepare(&mut ctx, Mode::Offline)?;
    let (train, test, mut inputs) = load_data(&ctx)?;
    let sa = arch(&ctx.cfg.model.student_hidden, &train)?;
    let trains_teacher = ctx.cfg.model.teacher_checkpoint.is_none();
    if let Some(p) = &ctx.cfg.model.teacher_checkpoint {
        let bytes = read_input(p)?;
        inputs.push(InputChecksum {
            name: "teacher_checkpoint".into(),
            path: Some(p.display().to_string()),
            sha256: sha256_hex(&bytes),
        });
    }
    let mut outputs = vec!["metrics.csv", "student.ckpt"];
    if trains_teacher {
        outputs.extend(["teacher_metrics.csv", "teacher.ckpt"]);
    }
    ctx.manifest("distill", inputs, &outputs)?;
    let t = teacher(&ctx, &train, &test)?;
    let (model, metrics) =
        distill_offline(&t, &sa, &train, &test, &ctx.cfg.train).map_err(|e| keep_partial(&ctx, "metrics.csv", e))?;
    write_file(&ctx.path("metrics.csv"), metrics.to_csv().as_bytes())?;
    write_file(&ctx.path("student.ckpt"), &checkpoint_bytes(&model))?;
    summary(&ctx, &format!("student ({})", ctx.cfg.train.ablation.name()), &metrics);
    Ok(())
}

fn stats_rows(out: &mut String, columns: &[&[f64]]) {
    let stats: Vec<(f64, f64)> = columns.iter().map(|c| mean_std(c)).collect();
    let row = |f: &dyn Fn(&(f64, f64)) -> f64| stats.iter().map(|s| f(s).to_string()).collect::<Vec<_>>().join(",");
    writeln!(out, "mean,{}", row(&|s| s.0)).unwrap();
    writeln!(out, "std,{}", row(&|s| s.1)).unwrap();
}

fn per_seed_table(header: &str, seeds: &[u64], columns: &[&[f64]]) -> String {
    let mut out = format!("{header}\n");
    for (i, seed) in seeds.iter().enumerate() {
        let vals: Vec<String> = columns.iter().map(|c| c[i].to_string()).collect();
        writeln!(out, "{seed},{}", vals.join(",")).unwrap();
    }
    stats_rows(&mut out, columns);
    out
}

fn cmd_online(mut ctx: Context, compare: bool) -> Result<(), CliError> {
    prepare(&mut ctx, Mode::Online)?;
    let (train, test, inputs) = load_data(&ctx)?;
    let a1 = arch(&ctx.cfg.model.student_hidden, &train)?;
    let peer = ctx
        .cfg
        .model
        .peer_hidden
        .clone()
        .unwrap_or_else(|| ctx.cfg.model.student_hidden.clone());
    let a2 = arch(&peer, &train)?;
    if compare {
        ctx.manifest("online --compare", inputs, &["online_summary.csv"])?;
        let seeds = &ctx.cfg.experiment.seeds;
        let c = run_online_comparison(&a1, &a2, &train, &test, &ctx.cfg.train, seeds)?;
        let table = per_seed_table(
            "seed,solo1,solo2,online1,online2",
            seeds,
            &[&c.solo1, &c.solo2, &c.online1, &c.online2],
        );
        write_file(&ctx.path("online_summary.csv"), table.as_bytes())?;
        ctx.say(table.trim_end());
        return Ok(());
    }
    let outputs = [
        "metrics_student1.csv",
        "metrics_student2.csv",
        "student1.ckpt",
        "student2.ckpt",
    ];
    ctx.manifest("online", inputs, &outputs)?;
    let o = distill_online(&a1, &a2, &train, &test, &ctx.cfg.train)
        .map_err(|e| keep_partial(&ctx, "metrics_student2.csv", e))?;
    write_file(&ctx.path(outputs[0]), o.metrics1.to_csv().as_bytes())?;
    write_file(&ctx.path(outputs[1]), o.metrics2.to_csv().as_bytes())?;
    write_file(&ctx.path(outputs[2]), &checkpoint_bytes(&o.student1))?;
    write_file(&ctx.path(outputs[3]), &checkpoint_bytes(&o.student2))?;
    summary(&ctx, "student 1", &o.metrics1);
    summary(&ctx, "student 2", &o.metrics2);
    Ok(())
}

fn cmd_teacher_free(mut ctx: Context, compare: bool) -> Result<(), CliError> {
    prepare(&mut ctx, Mode::TeacherFree)?;
    let (train, test, inputs) = load_data(&ctx)?;
    let a = arch(&ctx.cfg.model.student_hidden, &train)?;
    if compare {
        ctx.manifest("teacher-free --compare", inputs, &["teacher_free_summary.csv"])?;
        let seeds = &ctx.cfg.experiment.seeds;
        let c = run_teacher_free_comparison(&a, &train, &test, &ctx.cfg.train, seeds)?;
        let table = per_seed_table("seed,baseline,student", seeds, &[&c.baseline, &c.student]);
        write_file(&ctx.path("teacher_free_summary.csv"), table.as_bytes())?;
        ctx.say(table.trim_end());
        return Ok(());
    }
    let outputs = ["baseline_metrics.csv", "baseline.ckpt", "metrics.csv", "student.ckpt"];
    ctx.manifest("teacher-free", inputs, &outputs)?;
    let o =
        distill_teacher_free(&a, &train, &test, &ctx.cfg.train).map_err(|e| keep_partial(&ctx, "metrics.csv", e))?;
    write_file(&ctx.path(outputs[0]), o.baseline_metrics.to_csv().as_bytes())?;
    write_file(&ctx.path(outputs[1]), &checkpoint_bytes(&o.baseline))?;
    write_file(&ctx.path(outputs[2]), o.student_metrics.to_csv().as_bytes())?;
    write_file(&ctx.path(outputs[3]), &checkpoint_bytes(&o.student))?;
    summary(&ctx, "baseline", &o.baseline_metrics);
    summary(&ctx, "student", &o.student_metrics);
    Ok(())
}

pub const ABLATION_HEADER: &str =
    "cell,ablation,a_weights,b_weights,seeds,mean_acc,std_acc,delta_vs_kd_only,accuracies";

fn cmd_ablate(mut ctx: Context) -> Result<(), CliError> {
    prepare(&mut ctx, Mode::Offline)?;
    if ctx.cfg.experiment.seeds.is_empty() || ctx.cfg.experiment.rows.is_empty() {
        return Err(CliError::InvalidConfig(
            "experiment.seeds and experiment.rows must be non-empty".into(),
        ));
    }
    let (train, test, inputs) = load_data(&ctx)?;
    let ta = arch(&ctx.cfg.model.teacher_hidden, &train)?;
    let sa = arch(&ctx.cfg.model.student_hidden, &train)?;
    ctx.manifest("ablate", inputs, &["ablation.csv", "baselines.csv"])?;

    let setup = ExperimentSetup {
        teacher_arch: &ta,
        student_arch: &sa,
        train: &train,
        test: &test,
        base: ctx.cfg.train.clone(),
        seeds: ctx.cfg.experiment.seeds.clone(),
    };
    let teachers = train_teachers(&setup)?;
    let teacher_acc: Vec<f64> = teachers
        .iter()
        .map(|t| ickd::train::evaluate(t, &test))
        .collect::<ickd::Result<_>>()?;
    let student_ce = train_teachers(&ExperimentSetup {
        teacher_arch: &sa,
        ..setup.clone()
    })?;
    let student_acc: Vec<f64> = student_ce
        .iter()
        .map(|t| ickd::train::evaluate(t, &test))
        .collect::<ickd::Result<_>>()?;
    let baselines = per_seed_table(
        "seed,teacher_ce,student_ce",
        &setup.seeds,
        &[&teacher_acc, &student_acc],
    );
    write_file(&ctx.path("baselines.csv"), baselines.as_bytes())?;

    let cells: Vec<AblationCell> = ctx
        .cfg
        .experiment
        .rows
        .iter()
        .flat_map(|&a| {
            if ctx.cfg.experiment.weight_variants {
                AblationCell::with_weight_variants(a)
            } else {
                vec![AblationCell::new(a)]
            }
        })
        .collect();
    let results = run_ablation_grid(&setup, &teachers, &cells)?;
    let kd_only = results
        .iter()
        .find(|r| r.cell == AblationCell::new(Ablation::KdOnly))
        .map(|r| r.mean);
    let mut table = format!("{ABLATION_HEADER}\n");
    for r in &results {
        let delta = kd_only.map(|k| format!("{:+}", r.mean - k)).unwrap_or_default();
        let accs: Vec<String> = r.accuracies.iter().map(f64::to_string).collect();
        writeln!(
            table,
            "{},{},{},{},{},{},{},{},{}",
            r.cell.label(),
            r.cell.ablation.name(),
            r.cell.use_a_weights,
            r.cell.use_b_weights,
            r.accuracies.len(),
            r.mean,
            r.std,
            delta,
            accs.join(";")
        )
        .unwrap();
    }
    write_file(&ctx.path("ablation.csv"), table.as_bytes())?;
    let (tm, ts) = mean_std(&teacher_acc);
    let (sm, ss) = mean_std(&student_acc);
    ctx.say(format!("teacher_ce {tm:.4} ± {ts:.4}"));
    ctx.say(format!("student_ce {sm:.4} ± {ss:.4}"));
    for r in &results {
        let delta = kd_only
            .map(|k| format!("  ({:+.4} vs kd_only)", r.mean - k))
            .unwrap_or_default();
        ctx.say(format!("{:<24} {:.4} ± {:.4}{delta}", r.cell.label(), r.mean, r.std));
    }
    Ok(())
}

pub const SWEEP_HEADER: &str = "axis,value,mean_acc,std_acc,accuracies";
pub const ARGMAX_HEADER: &str = "axis,argmax,mean_acc,reference_optimum";

fn cmd_sweep(mut ctx: Context) -> Result<(), CliError> {
    prepare(&mut ctx, Mode::Offline)?;
    if ctx.cfg.experiment.seeds.is_empty() {
        return Err(CliError::InvalidConfig("experiment.seeds must be non-empty".into()));
    }
    let (train, test, inputs) = load_data(&ctx)?;
    let ta = arch(&ctx.cfg.model.teacher_hidden, &train)?;
    let sa = arch(&ctx.cfg.model.student_hidden, &train)?;
    ctx.manifest("plotdata --sweep", inputs, &["sweep.csv", "sweep_argmax.csv"])?;
    let setup = ExperimentSetup {
        teacher_arch: &ta,
        student_arch: &sa,
        train: &train,
        test: &test,
        base: ctx.cfg.train.clone(),
        seeds: ctx.cfg.experiment.seeds.clone(),
    };
    let teachers = train_teachers(&setup)?;
    let mut curves = format!("{SWEEP_HEADER}\n");
    let mut argmax = format!("{ARGMAX_HEADER}\n");
    for &axis in &ctx.cfg.experiment.sweep_axes {
        let points = run_sweep(&setup, &teachers, axis, &axis.grid()).map_err(invalid)?;
        for p in &points {
            let accs: Vec<String> = p.accuracies.iter().map(f64::to_string).collect();
            writeln!(
                curves,
                "{},{},{},{},{}",
                axis.name(),
                p.value,
                p.mean,
                p.std,
                accs.join(";")
            )
            .unwrap();
        }
        let best = argmax_point(&points).expect("non-empty grid");
        writeln!(
            argmax,
            "{},{},{},{}",
            axis.name(),
            best.value,
            best.mean,
            axis.reference_optimum()
        )
        .unwrap();
        ctx.say(format!(
            "{:<10} argmax {:<5} (mean {:.4}); reference optimum {}",
            axis.name(),
            best.value.to_string(),
            best.mean,
            axis.reference_optimum()
        ));
    }
    write_file(&ctx.path("sweep.csv"), curves.as_bytes())?;
    write_file(&ctx.path("sweep_argmax.csv"), argmax.as_bytes())?;
    Ok(())
}

pub const PLOTDATA_HEADER: &str = "run,epoch,series,value";

fn plotdata(paths: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    if paths.is_empty() {
        return Err(CliError::InvalidConfig(
            "plotdata needs at least one metrics file, or --sweep".into(),
        ));
    }
    let mut table = format!("{PLOTDATA_HEADER}\n");
    for p in paths {
        let bytes = read_input(p)?;
        let text =
            String::from_utf8(bytes).map_err(|_| CliError::Format(format!("{}: not valid UTF-8", p.display())))?;
        let rows = parse_metrics_csv(&text).map_err(|e| CliError::Format(format!("{}: {e}", p.display())))?;
        for r in rows {
            for (name, v) in METRIC_SERIES.iter().zip(r.series()) {
                writeln!(table, "{},{},{name},{v}", p.display(), r.epoch).unwrap();
            }
        }
    }
    match out {
        Some(dir) => write_file(&dir.join("plotdata.csv"), table.as_bytes()),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn flipped_kl(p: &[f64], q: &[f64]) -> ickd::Result<f64> {
    kl_divergence(p, q).map(|v| -v)
}

fn verify(fault: Option<&str>, quiet: bool) -> Result<(), CliError> {
    let hooks = match fault {
        None => Hooks::default(),
        Some("kl-sign-flip") => Hooks {
            kl_divergence: flipped_kl,
        },
        Some(other) => return Err(CliError::InvalidConfig(format!("unknown fault {other:?}"))),
    };
    let report = run_battery(&BatteryConfig::default(), &hooks);
    if !quiet {
        for c in &report.checks {
            println!(
                "{:<24} {}  {}",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.detail
            );
        }
        println!(
            "lsr_kd_constant = {:.12}  spread = {:.3e}",
            report.lsr_kd_constant, report.lsr_kd_spread
        );
    }
    let failed: Vec<&str> = report.failures().map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::VerifyFailed(failed.join(", ")))
    }
}
