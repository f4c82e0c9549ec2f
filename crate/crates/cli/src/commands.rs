//! Subcommand implementations. Each returns its artifacts so tests can drive
//! them without spawning the binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mhkd::data::Dataset;
use mhkd::distill::DistillConfig;
use mhkd::nn::{compression_percent, Parameterized, Source, BN_EPS, BN_MOMENTUM};
use mhkd::train::{
    evaluate, format_mean_std, mean_std, train_student, train_supervised, train_teacher, StudentOutcome,
    SupervisedOutcome,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Role, StateMeta};
use crate::config::ExperimentConfig;
use crate::metrics::{write_metrics, write_steps, Table};
use crate::svg::{line_chart, Series};

/// A config plus the command-line overrides.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
}

impl RunContext {
    pub fn new(cfg: ExperimentConfig, seed_override: Option<u64>, output_dir: Option<PathBuf>) -> Self {
        let seeds = seed_override.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
        let out = output_dir.unwrap_or_else(|| cfg.output_dir.clone());
        Self { cfg, out, seeds }
    }

    pub fn teacher_dir(&self) -> PathBuf {
        self.out.join("teacher")
    }

    pub fn distill_dir(&self) -> PathBuf {
        self.out.join("distill")
    }
}

/// Settings fixed by the implementation, recorded so a manifest fully
/// describes a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EngineInfo {
    pub version: String,
    pub precision: String,
    pub rng: String,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub parallel: bool,
    pub tap_point: String,
    pub weight_decay_scope: String,
    pub teacher_heads: String,
    pub reported_checkpoint: String,
    pub single_sample_batches: String,
}

impl EngineInfo {
    pub fn current() -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").into(),
            precision: "f32".into(),
            rng: mhkd::rng::RNG_ALGORITHM.into(),
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
            parallel: mhkd::exec::parallel_enabled(),
            tap_point: "end of unit, after the last activation and the unit's pooling".into(),
            weight_decay_scope: "conv and linear weights; no decay on biases or batchnorm affine".into(),
            teacher_heads: "trained jointly with unweighted cross-entropy; teacher backbone frozen".into(),
            reported_checkpoint: "final epoch (best-test teacher saved separately)".into(),
            single_sample_batches: "dropped (batchnorm needs two samples)".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seeds: Vec<u64>,
    pub engine: EngineInfo,
    pub config: ExperimentConfig,
}

fn write_manifest(dir: &Path, command: &str, ctx: &RunContext) -> Result<()> {
    let manifest = Manifest {
        command: command.into(),
        seeds: ctx.seeds.clone(),
        engine: EngineInfo::current(),
        config: ctx.cfg.resolved()?,
    };
    let text = toml::to_string_pretty(&manifest).context("serializing manifest")?;
    fs::write(dir.join("manifest.toml"), text).context("writing manifest")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub struct TeacherArtifacts {
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub outcome: SupervisedOutcome<f32>,
}

/// Trains the teacher with the first seed and writes `teacher/`.
pub fn cmd_train_teacher(ctx: &RunContext, data: &(Dataset, Dataset)) -> Result<TeacherArtifacts> {
    let cfg = &ctx.cfg;
    let dir = ctx.teacher_dir();
    create_dir(&dir)?;
    write_manifest(&dir, "train-teacher", ctx)?;
    let seed = ctx.seeds[0];
    let outcome = train_teacher::<f32>(
        &cfg.teacher_spec()?,
        &cfg.task(),
        &data.0,
        &data.1,
        &cfg.optim,
        seed,
        &cfg.train_options(),
    )?;
    write_metrics(&dir.join("metrics.csv"), &outcome.history)?;
    let epochs = outcome.history.len();
    let state = StateMeta { seeds: outcome.seeds, epochs_done: epochs, steps_done: 0 };
    let checkpoint = dir.join("teacher.ckpt");
    Checkpoint::from_network(&outcome.network, Role::Teacher, "teacher", epochs, outcome.final_test_acc())
        .with_state(state.clone(), &[("network", &outcome.optimizer)])
        .save(&checkpoint)?;
    let best_acc = outcome.history[outcome.best_epoch].test_acc;
    let best_checkpoint = dir.join("teacher-best.ckpt");
    Checkpoint::from_network(&outcome.best, Role::Teacher, "teacher-best", outcome.best_epoch + 1, best_acc)
        .save(&best_checkpoint)?;
    Ok(TeacherArtifacts { checkpoint, best_checkpoint, outcome })
}

#[derive(Clone, Debug, PartialEq)]
pub enum VariantKind {
    Distill(DistillConfig),
    /// Student trained from scratch with cross-entropy.
    Scratch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub slug: String,
    pub kind: VariantKind,
    pub ablation: bool,
}

pub fn method_label(cfg: &DistillConfig) -> String {
    if cfg.is_plain_kd() {
        "KD".into()
    } else {
        "MHKD".into()
    }
}

/// `Head-1`, `Head-1+2+3`, ...
pub fn head_label(units: &[usize]) -> String {
    let parts: Vec<String> = units.iter().map(usize::to_string).collect();
    format!("Head-{}", parts.join("+"))
}

/// The runs implied by a config: the configured method, the baselines, then
/// the ablation head sets.
pub fn variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    let main = &cfg.distill;
    let label = method_label(main);
    let mut out =
        vec![Variant { slug: label.to_lowercase(), label, kind: VariantKind::Distill(main.clone()), ablation: false }];
    if cfg.baselines.kd && !main.is_plain_kd() {
        out.push(Variant {
            label: "KD".into(),
            slug: "kd".into(),
            kind: VariantKind::Distill(main.plain_kd()),
            ablation: false,
        });
    }
    if cfg.baselines.student_ce {
        out.push(Variant {
            label: "Student (CE)".into(),
            slug: "student-ce".into(),
            kind: VariantKind::Scratch,
            ablation: false,
        });
    }
    for set in cfg.ablation.iter().flat_map(|a| &a.head_sets) {
        let label = head_label(set);
        out.push(Variant {
            slug: label.to_lowercase(),
            label,
            kind: VariantKind::Distill(DistillConfig { head_units: set.clone(), ..main.clone() }),
            ablation: true,
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub slug: String,
    pub ablation: bool,
    pub seeds: Vec<u64>,
    /// Final-epoch test accuracy per seed, as fractions.
    pub accuracies: Vec<f64>,
}

impl SummaryRow {
    pub fn mean(&self) -> f64 {
        mean_std(&self.accuracies).0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub teacher: String,
    pub student: String,
    pub teacher_params: usize,
    pub student_params: usize,
    pub teacher_acc: f64,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn row(&self, label: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_markdown(&self) -> String {
        let seeds = self.rows.first().map_or(Vec::new(), |r| r.seeds.clone());
        let head: Vec<String> = seeds.iter().map(|s| format!("seed {s}")).collect();
        let table = |rows: &[&SummaryRow]| {
            let mut t =
                format!("| Method | {} | mean (std) |\n|---|{}---|\n", head.join(" | "), "---|".repeat(seeds.len()));
            for r in rows {
                let cells: Vec<String> = r.accuracies.iter().map(|a| format!("{:.2}", a * 100.0)).collect();
                t += &format!("| {} | {} | {} |\n", r.label, cells.join(" | "), format_mean_std(&r.accuracies));
            }
            t
        };
        let main: Vec<&SummaryRow> = self.rows.iter().filter(|r| !r.ablation).collect();
        let ablation: Vec<&SummaryRow> = self.rows.iter().filter(|r| r.ablation).collect();
        let mut md = format!(
            "# {}\n\nTeacher `{}` ({} params, test accuracy {:.2}%). Student `{}` ({} params, compression {:.2}%).\n\n\
             Top-1 test accuracy (%) at the final epoch.\n\n",
            self.name,
            self.teacher,
            self.teacher_params,
            self.teacher_acc * 100.0,
            self.student,
            self.student_params,
            compression_percent(self.student_params, self.teacher_params)
        );
        md += &table(&main);
        if !ablation.is_empty() {
            md += "\n## Head placement\n\n";
            md += &table(&ablation);
        }
        md
    }
}

fn save_student(dir: &Path, label: &str, o: &StudentOutcome<f32>, teacher: &Checkpoint) -> Result<()> {
    let epochs = o.history.len();
    let state = StateMeta { seeds: o.seeds, epochs_done: epochs, steps_done: o.steps.len() };
    let mut ckpt = Checkpoint::from_network(&o.student, Role::Student, label, epochs, o.final_test_acc());
    if !o.student_heads.is_empty() {
        let head_spec = ckpt_head_spec(o);
        ckpt = ckpt.with_heads(&head_spec, &teacher.meta.spec, &o.teacher_heads, &o.student_heads);
    }
    ckpt.with_state(
        state,
        &[
            ("student", &o.student_optimizer),
            ("student_heads", &o.student_heads_optimizer),
            ("teacher_heads", &o.teacher_heads_optimizer),
        ],
    )
    .save(&dir.join("student.ckpt"))?;
    Ok(())
}

fn ckpt_head_spec(o: &StudentOutcome<f32>) -> mhkd::distill::AuxHeadSpec {
    o.student_heads.heads[0].spec.clone()
}

/// Runs every variant for every seed against a trained teacher and writes
/// `distill/<variant>/seed-<s>/` plus `summary.md` and `summary.json`.
pub fn cmd_distill(ctx: &RunContext, teacher_ckpt: &Path, data: &(Dataset, Dataset)) -> Result<Summary> {
    let cfg = &ctx.cfg;
    let teacher_ck = Checkpoint::load(teacher_ckpt).with_context(|| format!("loading {}", teacher_ckpt.display()))?;
    ensure!(teacher_ck.meta.role == Role::Teacher, "{} is not a teacher checkpoint", teacher_ckpt.display());
    let teacher = teacher_ck.to_network()?;
    ensure!(
        teacher.task == cfg.task(),
        "teacher was trained for {:?}, config describes {:?}",
        teacher.task,
        cfg.task()
    );
    let student_spec = cfg.student_spec()?;
    let root = ctx.distill_dir();
    create_dir(&root)?;
    write_manifest(&root, "distill", ctx)?;
    let opts = cfg.train_options();
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut done: Vec<(VariantKind, String)> = Vec::new();
    for v in variants(cfg) {
        let vdir = root.join(&v.slug);
        if let Some((_, slug)) = done.iter().find(|(k, _)| *k == v.kind) {
            // Same objective and seeds as an earlier variant: identical runs.
            let prev = rows.iter().find(|r| &r.slug == slug).expect("row recorded").clone();
            copy_dir(&root.join(slug), &vdir)?;
            rows.push(SummaryRow { label: v.label.clone(), slug: v.slug.clone(), ablation: v.ablation, ..prev });
            continue;
        }
        let mut accs = Vec::new();
        for &seed in &ctx.seeds {
            let dir = vdir.join(format!("seed-{seed}"));
            create_dir(&dir)?;
            let acc = match &v.kind {
                VariantKind::Distill(dc) => {
                    let o = train_student::<f32>(
                        &teacher,
                        &student_spec,
                        &cfg.head,
                        dc,
                        &cfg.optim,
                        &data.0,
                        &data.1,
                        seed,
                        &opts,
                    )
                    .with_context(|| format!("{} seed {seed}", v.label))?;
                    write_metrics(&dir.join("metrics.csv"), &o.history)?;
                    write_steps(&dir.join("steps.csv"), &o.steps)?;
                    save_student(&dir, &v.label, &o, &teacher_ck)?;
                    o.final_test_acc()
                }
                VariantKind::Scratch => {
                    let o = train_supervised::<f32>(
                        &student_spec,
                        &cfg.task(),
                        Source::Student,
                        &data.0,
                        &data.1,
                        &cfg.optim,
                        seed,
                        &opts,
                    )
                    .with_context(|| format!("{} seed {seed}", v.label))?;
                    write_metrics(&dir.join("metrics.csv"), &o.history)?;
                    let epochs = o.history.len();
                    Checkpoint::from_network(&o.network, Role::Student, &v.label, epochs, o.final_test_acc())
                        .save(&dir.join("student.ckpt"))?;
                    o.final_test_acc()
                }
            };
            accs.push(acc);
        }
        done.push((v.kind.clone(), v.slug.clone()));
        rows.push(SummaryRow {
            label: v.label,
            slug: v.slug,
            ablation: v.ablation,
            seeds: ctx.seeds.clone(),
            accuracies: accs,
        });
    }
    let student_params =
        mhkd::nn::Network::<f32>::build(&student_spec, &cfg.task(), Source::Student, 0)?.count_params();
    let summary = Summary {
        name: cfg.name.clone(),
        teacher: teacher.spec.name.clone(),
        student: student_spec.name.clone(),
        teacher_params: teacher.count_params(),
        student_params,
        teacher_acc: teacher_ck.meta.test_acc,
        rows,
    };
    fs::write(ctx.out.join("summary.md"), summary.to_markdown())?;
    fs::write(ctx.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    create_dir(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub label: String,
    pub accuracy: f64,
    pub params: usize,
    pub reference_params: Option<usize>,
    pub compression: Option<f64>,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: top-1 {:.2}%, {} params", self.label, self.accuracy * 100.0, self.params)?;
        if let (Some(r), Some(c)) = (self.reference_params, self.compression) {
            write!(f, ", compression {c:.2}% vs {r} reference params")?;
        }
        Ok(())
    }
}

/// Top-1 accuracy of a checkpoint's backbone on `test`.
pub fn cmd_eval(ckpt: &Path, test: &Dataset, reference: Option<&Path>, batch_size: usize) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let net = ck.to_network()?;
    ensure!(
        net.task.num_classes == test.num_classes,
        "checkpoint predicts {} classes, dataset has {}",
        net.task.num_classes,
        test.num_classes
    );
    let accuracy = evaluate(&net, test, batch_size)?;
    let params = net.count_params();
    let reference_params = match reference {
        Some(p) => {
            Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?.to_network()?.count_params())
        }
        None => None,
    };
    Ok(EvalReport {
        label: ck.meta.label.clone(),
        accuracy,
        params,
        reference_params,
        compression: reference_params.map(|r| compression_percent(params, r)),
    })
}

fn find_metrics(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> =
        fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if e.file_type()?.is_dir() {
            find_metrics(&p, out)?;
        } else if e.file_name() == "metrics.csv" {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportOutput {
    pub svgs: Vec<PathBuf>,
    pub markdown: PathBuf,
}

/// Writes per-run SVG curves next to each `metrics.csv` and a `report.md`
/// table in `run_dir`.
pub fn cmd_report(run_dir: &Path) -> Result<ReportOutput> {
    ensure!(run_dir.is_dir(), "{} is not a directory", run_dir.display());
    let mut files = Vec::new();
    find_metrics(run_dir, &mut files)?;
    if files.is_empty() {
        bail!("no metrics.csv found under {}", run_dir.display());
    }
    let mut svgs = Vec::new();
    // (group, seed, final accuracy)
    let mut finals: Vec<(String, Option<u64>, f64)> = Vec::new();
    for f in &files {
        let t = Table::read(f)?;
        let dir = f.parent().expect("file has a parent");
        let rel = dir.strip_prefix(run_dir).unwrap_or(dir).display().to_string();
        let epochs = t.column("epoch").context("metrics.csv lacks an epoch column")?;
        let series = |cols: Vec<(String, Vec<f64>)>| -> Vec<Series> {
            cols.into_iter()
                .map(|(name, ys)| Series { name, points: epochs.iter().copied().zip(ys).collect() })
                .collect()
        };
        let mut charts = vec![("test_acc.svg", "Test accuracy", "top-1", series(t.columns_with_prefix("test_acc")))];
        // Supervised runs log l_kd = 0.
        if t.column("l_kd").is_some_and(|c| c.iter().any(|&v| v != 0.0)) {
            charts.push(("l_kd.svg", "Final-output KD loss", "L_KD", series(t.columns_with_prefix("l_kd"))));
        }
        let heads = t.columns_with_prefix("l_ohkd_head");
        if !heads.is_empty() {
            charts.push(("l_ohkd.svg", "Per-head OHKD loss", "L_OHKD", series(heads)));
        }
        for (file, title, y, s) in charts {
            let path = dir.join(file);
            fs::write(&path, line_chart(&format!("{title} ({rel})"), "epoch", y, &s))?;
            svgs.push(path);
        }
        let acc = *t.column("test_acc").context("metrics.csv lacks test_acc")?.last().expect("non-empty table");
        let name = dir.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
        let (group, seed) = match name.strip_prefix("seed-").and_then(|s| s.parse().ok()) {
            Some(s) => {
                (dir.parent().unwrap_or(dir).strip_prefix(run_dir).unwrap_or(dir).display().to_string(), Some(s))
            }
            None => (rel.clone(), None),
        };
        finals.push((group, seed, acc));
    }
    let (seeded, single): (Vec<_>, Vec<_>) = finals.into_iter().partition(|f| f.1.is_some());
    let mut md = format!("# Report: {}\n\nFinal-epoch top-1 test accuracy (%).\n", run_dir.display());
    if !seeded.is_empty() {
        let mut seeds: Vec<u64> = seeded.iter().filter_map(|f| f.1).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut groups: Vec<String> = seeded.iter().map(|f| f.0.clone()).collect();
        groups.dedup();
        md += &format!(
            "\n| Run | {} | mean (std) |\n|---|{}---|\n",
            seeds.iter().map(|s| format!("seed {s}")).collect::<Vec<_>>().join(" | "),
            "---|".repeat(seeds.len())
        );
        for g in &groups {
            let accs: Vec<f64> = seeded.iter().filter(|f| &f.0 == g).map(|f| f.2).collect();
            let cells: Vec<String> = seeds
                .iter()
                .map(|&s| {
                    seeded
                        .iter()
                        .find(|f| &f.0 == g && f.1 == Some(s))
                        .map_or(String::new(), |f| format!("{:.2}", f.2 * 100.0))
                })
                .collect();
            md += &format!("| {g} | {} | {} |\n", cells.join(" | "), format_mean_std(&accs));
        }
    }
    if !single.is_empty() {
        md += "\n| Run | accuracy |\n|---|---|\n";
        for (g, _, acc) in &single {
            md += &format!("| {g} | {:.2} |\n", acc * 100.0);
        }
    }
    let markdown = run_dir.join("report.md");
    fs::write(&markdown, md)?;
    Ok(ReportOutput { svgs, markdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    #[test]
    fn variants_of_the_synth_preset() {
        let cfg = ExperimentConfig::parse(preset("tiny-pair-synth").unwrap(), "p").unwrap();
        let labels: Vec<String> = variants(&cfg).into_iter().map(|v| v.label).collect();
        assert_eq!(labels, ["MHKD", "KD", "Student (CE)", "Head-1", "Head-2", "Head-3", "Head-1+2+3"]);
    }

    #[test]
    fn plain_kd_config_is_labelled_kd() {
        let mut cfg = ExperimentConfig::parse(preset("tiny-pair-synth").unwrap(), "p").unwrap();
        cfg.distill = cfg.distill.plain_kd();
        let v = variants(&cfg);
        assert_eq!(v[0].label, "KD");
        assert!(v.iter().filter(|v| v.label == "KD").count() == 1);
    }

    #[test]
    fn summary_cells_use_mean_std_format() {
        let row = |label: &str, accs: Vec<f64>| SummaryRow {
            label: label.into(),
            slug: label.to_lowercase(),
            ablation: false,
            seeds: vec![0, 1, 2],
            accuracies: accs,
        };
        let s = Summary {
            name: "x".into(),
            teacher: "tiny-t".into(),
            student: "tiny-s".into(),
            teacher_params: 289_194,
            student_params: 24_458,
            teacher_acc: 0.9,
            rows: vec![row("MHKD", vec![0.75, 0.755, 0.7505])],
        };
        let md = s.to_markdown();
        assert!(md.contains("| seed 0 | seed 1 | seed 2 | mean (std) |"), "{md}");
        assert!(md.contains("| MHKD | 75.00 | 75.50 | 75.05 | 75.18 (0.28) |"), "{md}");
        assert!(md.contains("91.54%"), "{md}");
    }

    #[test]
    fn report_on_empty_dir_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(cmd_report(dir.path()).is_err());
    }
}
