//! Config-driven experiment runner behind the command-line tool.
//!
//! Seeds: with top-level seed `s`, the model is initialised from
//! `derive_seed(s, [1, model.seed])`, training uses
//! `derive_seed(s, [2, train.seed])`, every named attack uses
//! `derive_seed(s, [3, attack.seed])` and synthetic data uses
//! `derive_seed(s, [4, synthetic.seed])`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{
    classwise_accuracy, confusion, homing_experiment, misclassified_from_batch, summary_csv,
    ClasswiseReport,
};
use crate::attacks::{attack_dataset, AttackSpec};
use crate::background_study::{run_background_study, run_inference_adjust};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{
    colorize_background, generate_synthetic, load_mnist_dir, BackgroundPlan, LabeledDataset, Split,
    WHITE,
};
use crate::error::{Error, Result};
use crate::io::write_atomic_str;
use crate::models::{init_model, load_checkpoint, save_checkpoint, ArchitectureSpec, Classifier};
use crate::seed::derive_seed;
use crate::training::{train_with, EpochProbe, TrainSpec};

const MODEL_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const ATTACK_STREAM: u64 = 3;
const DATA_STREAM: u64 = 4;

pub const MODEL_FILE: &str = "model.ckpt";
pub const BACKGROUND_MODEL_FILE: &str = "background_model.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Attack,
    Homing,
    Background,
    InferenceAdjust,
    Report,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Suppress per-epoch progress on stderr.
    pub quiet: bool,
}

/// Failure with the process exit code it maps to: 2 for configuration
/// problems, 1 for everything else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunError {
    pub exit_code: i32,
    pub message: String,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for RunError {}

fn stage<T>(module: &'static str, r: Result<T>) -> std::result::Result<T, RunError> {
    r.map_err(|e| match e {
        Error::Config { path, reason } => RunError {
            exit_code: 2,
            message: format!("invalid config at `{path}`: {reason}"),
        },
        Error::Runtime { module, reason } => RunError {
            exit_code: 1,
            message: format!("{module}: {reason}"),
        },
        other => RunError {
            exit_code: 1,
            message: format!("{module}: {other}"),
        },
    })
}

type RunResult<T> = std::result::Result<T, RunError>;

/// Executes `command` and returns the files it wrote.
pub fn run(command: Command, opts: &RunOptions) -> RunResult<Vec<PathBuf>> {
    if command == Command::Report {
        let out = match (&opts.out, &opts.config) {
            (Some(o), _) => o.clone(),
            (None, Some(_)) => output_dir(&load_config(opts)?, opts)?,
            (None, None) => {
                return Err(RunError {
                    exit_code: 2,
                    message: "report needs --out or --config".into(),
                })
            }
        };
        return stage("analysis", report(&out)).map(|p| vec![p]);
    }
    let cfg = load_config(opts)?;
    let out = output_dir(&cfg, opts)?;
    stage(
        "runner",
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e)),
    )?;
    let mut ctx = Context {
        cfg,
        out,
        quiet: opts.quiet,
        written: Vec::new(),
    };
    let resolved = ctx.cfg.to_json();
    ctx.write("config.json", &resolved)?;
    match command {
        Command::Train => ctx.train()?,
        Command::Attack => ctx.attack()?,
        Command::Homing => ctx.homing()?,
        Command::Background => ctx.background()?,
        Command::InferenceAdjust => ctx.inference_adjust()?,
        Command::Report => unreachable!(),
    }
    Ok(ctx.written)
}

fn load_config(opts: &RunOptions) -> RunResult<ExperimentConfig> {
    let path = opts.config.as_ref().ok_or_else(|| RunError {
        exit_code: 2,
        message: "missing --config".into(),
    })?;
    stage("config", ExperimentConfig::load(path, &opts.overrides))
}

fn output_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> RunResult<PathBuf> {
    opts.out
        .clone()
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .ok_or_else(|| RunError {
            exit_code: 2,
            message: "invalid config at `output`: no output directory (set `output` or pass --out)"
                .into(),
        })
}

/// Combines every `report_*.json` in `dir` into `summary.csv`.
pub fn report(dir: &Path) -> Result<PathBuf> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("report_") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Runtime {
            module: "analysis",
            reason: format!("no report_*.json files in {}", dir.display()),
        });
    }
    let mut reports = Vec::with_capacity(files.len());
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
        reports.push(ClasswiseReport::from_json(&text)?);
    }
    let path = dir.join("summary.csv");
    write_atomic_str(&path, &summary_csv(&reports)?)?;
    Ok(path)
}

#[derive(Serialize)]
struct GridEntry {
    inv_temperature: f64,
    robust_total: f64,
    robust_cv: f64,
    robust_mcd: f64,
}

#[derive(Serialize)]
struct GridSummary {
    base: String,
    entries: Vec<GridEntry>,
    best_inv_temperature: f64,
    best_robust_total: f64,
}

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
    quiet: bool,
    written: Vec<PathBuf>,
}

impl Context {
    fn seed(&self, stream: u64, sub: u64) -> u64 {
        derive_seed(self.cfg.seed, &[stream, sub])
    }

    fn write(&mut self, name: &str, text: &str) -> RunResult<()> {
        let path = self.out.join(name);
        stage("runner", write_atomic_str(&path, text))?;
        self.written.push(path);
        Ok(())
    }

    fn save_model(&mut self, name: &str, model: &Classifier<f32>) -> RunResult<()> {
        let path = self.out.join(name);
        stage("models", save_checkpoint(model, &path))?;
        self.written.push(path);
        Ok(())
    }

    fn data(&self) -> RunResult<(LabeledDataset, LabeledDataset)> {
        let d = &self.cfg.dataset;
        let (train, test) = match d.source {
            DataSource::Synthetic => {
                let mut s = d.synthetic.clone().expect("validated");
                s.seed = self.seed(DATA_STREAM, s.seed);
                (
                    stage("datasets", generate_synthetic(&s, Split::Train))?,
                    stage("datasets", generate_synthetic(&s, Split::Test))?,
                )
            }
            DataSource::Mnist => {
                let dir = self.cfg.mnist_dir();
                (
                    stage("datasets", load_mnist_dir(&dir, Split::Train))?,
                    stage("datasets", load_mnist_dir(&dir, Split::Test))?,
                )
            }
        };
        let train = match d.train_limit {
            Some(n) => train.take(n),
            None => train,
        };
        let test = match d.test_limit {
            Some(n) => test.take(n),
            None => test,
        };
        Ok((train, test))
    }

    fn train_spec(&self, spec: &TrainSpec) -> TrainSpec {
        let mut s = spec.clone();
        s.seed = self.seed(TRAIN_STREAM, spec.seed);
        s
    }

    fn attack_spec(&self, name: &str) -> RunResult<AttackSpec> {
        let mut a = stage("config", self.cfg.named_attack(name).cloned())?;
        a.seed = self.seed(ATTACK_STREAM, a.seed);
        Ok(a)
    }

    fn model_seed(&self) -> u64 {
        self.seed(MODEL_STREAM, self.cfg.model.seed)
    }

    fn defense(&self) -> String {
        self.cfg.model.defense.clone().unwrap_or_else(|| {
            serde_json::to_value(self.cfg.train.objective)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default()
        })
    }

    fn progress(&self, what: &str) -> impl FnMut(&crate::training::EpochRecord) + '_ {
        let quiet = self.quiet;
        let what = what.to_string();
        move |r| {
            if !quiet {
                let rob = r
                    .rob_acc_total
                    .map_or_else(String::new, |v| format!(" rob_acc={v:.4}"));
                eprintln!(
                    "[{what}] epoch {} lr={} loss={:.4}{rob}",
                    r.epoch, r.lr, r.train_loss
                );
            }
        }
    }

    fn train(&mut self) -> RunResult<()> {
        let (train, test) = self.data()?;
        let arch = &self.cfg.model.architecture;
        let model = stage("models", init_model(arch, self.model_seed()))?;
        let spec = self.train_spec(&self.cfg.train);
        let probe_attack = match &self.cfg.probe {
            Some(p) => Some((self.attack_spec(&p.attack)?, p.examples)),
            None => None,
        };
        let probe = probe_attack.as_ref().map(|(a, n)| EpochProbe {
            test: &test,
            attack: a,
            examples: *n,
        });
        let (model, log) = {
            let mut progress = self.progress("train");
            stage(
                "training",
                train_with(model, &train, &spec, probe, &mut progress),
            )?
        };
        self.save_model(MODEL_FILE, &model)?;
        self.write("train_log.csv", &log.to_csv())
    }

    fn checkpoint_path(&self, configured: &Option<String>, default: &str) -> PathBuf {
        configured
            .as_ref()
            .map_or_else(|| self.out.join(default), PathBuf::from)
    }

    fn load_model(&self, path: &Path, arch: &ArchitectureSpec) -> RunResult<Classifier<f32>> {
        stage("models", load_checkpoint(path, arch))
    }

    fn attack(&mut self) -> RunResult<()> {
        let ex = self
            .cfg
            .experiments
            .attack
            .clone()
            .ok_or_else(|| RunError {
                exit_code: 2,
                message: "invalid config at `experiments.attack`: section missing".into(),
            })?;
        let (_, test) = self.data()?;
        let arch = self.cfg.model.architecture.clone();
        let model = self.load_model(
            &self.checkpoint_path(&self.cfg.model.checkpoint, MODEL_FILE),
            &arch,
        )?;
        let substitute = match &ex.substitute {
            Some(p) => Some(self.load_model(Path::new(p), &arch)?),
            None => None,
        };
        let defense = self.defense();
        let mut natural_written = false;
        for name in &ex.attacks {
            let spec = self.attack_spec(name)?;
            let batch = stage(
                "attacks",
                attack_dataset(&model, &test, &spec, substitute.as_ref()),
            )?;
            if !natural_written {
                let nat = stage(
                    "analysis",
                    confusion(&batch.natural_predictions, &batch.labels, test.classes),
                )?;
                self.write("confusion_natural.csv", &nat.to_csv())?;
                natural_written = true;
            }
            self.write_report(&model, &test, &batch, &defense, name, &spec)?;
        }
        if let Some(grid) = &ex.tpgd_grid {
            let base = ex.grid_base.clone().expect("validated");
            let base_spec = self.attack_spec(&base)?;
            let mut entries = Vec::new();
            for &t in grid {
                let spec = base_spec.clone().with_inv_temperature(t);
                let name = format!("{base}_tpgd_T{t}");
                let batch = stage("attacks", attack_dataset(&model, &test, &spec, None))?;
                let r = self.write_report(&model, &test, &batch, &defense, &name, &spec)?;
                entries.push(GridEntry {
                    inv_temperature: t,
                    robust_total: r.robust_total,
                    robust_cv: r.robust_cv,
                    robust_mcd: r.robust_mcd,
                });
            }
            let best = entries
                .iter()
                .fold(None::<&GridEntry>, |b, e| match b {
                    Some(b) if b.robust_total <= e.robust_total => Some(b),
                    _ => Some(e),
                })
                .expect("grid is non-empty");
            let summary = GridSummary {
                base,
                best_inv_temperature: best.inv_temperature,
                best_robust_total: best.robust_total,
                entries,
            };
            let text = serde_json::to_string_pretty(&summary).expect("grid summary serialises");
            self.write("tpgd_grid.json", &text)?;
        }
        Ok(())
    }

    fn write_report(
        &mut self,
        model: &Classifier<f32>,
        test: &LabeledDataset,
        batch: &crate::attacks::AdversarialBatch<f32>,
        defense: &str,
        name: &str,
        spec: &AttackSpec,
    ) -> RunResult<ClasswiseReport> {
        let r = stage(
            "analysis",
            ClasswiseReport::from_attack(model, test, batch, defense, name, spec),
        )?;
        self.write(&format!("report_{name}.json"), &r.to_json())?;
        let adv = stage(
            "analysis",
            confusion(&batch.predictions, &batch.labels, test.classes),
        )?;
        self.write(&format!("confusion_{name}.csv"), &adv.to_csv())?;
        Ok(r)
    }

    fn homing(&mut self) -> RunResult<()> {
        let ex = self
            .cfg
            .experiments
            .homing
            .clone()
            .ok_or_else(|| RunError {
                exit_code: 2,
                message: "invalid config at `experiments.homing`: section missing".into(),
            })?;
        let (train, test) = self.data()?;
        let arch = self.cfg.model.architecture.clone();
        let model = self.load_model(
            &self.checkpoint_path(&self.cfg.model.checkpoint, MODEL_FILE),
            &arch,
        )?;
        let spec = self.attack_spec(&ex.attack)?;
        let batch = stage("attacks", attack_dataset(&model, &test, &spec, None))?;
        let mut m = stage("analysis", misclassified_from_batch(&batch, test.classes))?;
        let train_spec = self.train_spec(&self.cfg.train);
        let quiet = self.quiet;
        stage(
            "analysis",
            homing_experiment(
                &arch,
                self.model_seed(),
                &train,
                &test,
                &spec,
                &train_spec,
                &mut m,
                &mut |j| {
                    if !quiet {
                        eprintln!("[homing] retraining without class {j}");
                    }
                },
            ),
        )?;
        self.write(
            "homing.json",
            &serde_json::to_string_pretty(&m).expect("serialises"),
        )?;
        self.write("misclassified.csv", &count_csv(&m.misclassified))?;
        self.write("homing.csv", &count_csv(&m.homing))
    }

    fn plans(&self) -> (BackgroundPlan, BackgroundPlan) {
        let classes = self.cfg.model.architecture.classes();
        match &self.cfg.dataset.background {
            Some(b) => (
                b.train.clone(),
                b.test.clone().unwrap_or_else(|| b.train.clone()),
            ),
            None => (
                BackgroundPlan::paired(classes),
                BackgroundPlan::paired(classes),
            ),
        }
    }

    fn background(&mut self) -> RunResult<()> {
        let ex = self
            .cfg
            .experiments
            .background
            .clone()
            .ok_or_else(|| RunError {
                exit_code: 2,
                message: "invalid config at `experiments.background`: section missing".into(),
            })?;
        let (train, test) = self.data()?;
        let (plan, test_plan) = self.plans();
        let arch = self.cfg.model.architecture.with_channels(3);
        let spec = self.train_spec(ex.train.as_ref().unwrap_or(&self.cfg.train));
        let attack = self.attack_spec(&ex.attack)?;
        let (result, model, log) = stage(
            "experiments_background",
            run_background_study(
                &train,
                &test,
                &plan,
                Some(&test_plan),
                &arch,
                self.model_seed(),
                &spec,
                &attack,
            ),
        )?;
        self.save_model(BACKGROUND_MODEL_FILE, &model)?;
        self.write("background_train_log.csv", &log.to_csv())?;
        self.write(
            "background_study.json",
            &serde_json::to_string_pretty(&result).expect("serialises"),
        )?;
        self.write("background_confusion_natural.csv", &result.natural.to_csv())?;
        self.write(
            "background_confusion_adversarial.csv",
            &result.adversarial.to_csv(),
        )
    }

    fn inference_adjust(&mut self) -> RunResult<()> {
        let ex = self
            .cfg
            .experiments
            .inference_adjust
            .clone()
            .ok_or_else(|| RunError {
                exit_code: 2,
                message: "invalid config at `experiments.inference_adjust`: section missing".into(),
            })?;
        let (_, test) = self.data()?;
        let (_, test_plan) = self.plans();
        let colored = stage("datasets", colorize_background(&test, &test_plan))?;
        let arch = self.cfg.model.architecture.with_channels(3);
        let model = self.load_model(
            &self.checkpoint_path(&ex.checkpoint, BACKGROUND_MODEL_FILE),
            &arch,
        )?;
        let attack = self.attack_spec(&ex.attack)?;
        let target = match ex.target_class {
            Some(c) => c,
            None => {
                let batch = stage("attacks", attack_dataset(&model, &colored, &attack, None))?;
                let acc = stage(
                    "analysis",
                    classwise_accuracy(&batch.predictions, &batch.labels, colored.classes),
                )?;
                most_vulnerable(&acc)
            }
        };
        let result = stage(
            "experiments_background",
            run_inference_adjust(
                &model,
                &colored,
                target,
                &attack,
                ex.threshold.unwrap_or(test_plan.threshold),
                ex.color.unwrap_or(WHITE),
            ),
        )?;
        self.write(
            "inference_adjust.json",
            &serde_json::to_string_pretty(&result).expect("serialises"),
        )?;
        self.write("table3_natural.csv", &result.natural.to_csv())?;
        self.write("table3_adversarial.csv", &result.adversarial.to_csv())
    }
}

/// Class with the lowest defined accuracy; ties go to the lower id.
pub fn most_vulnerable(acc: &[Option<f64>]) -> usize {
    acc.iter()
        .enumerate()
        .filter_map(|(c, a)| a.map(|a| (c, a)))
        .fold(None::<(usize, f64)>, |best, (c, a)| match best {
            Some((_, b)) if b <= a => best,
            _ => Some((c, a)),
        })
        .map_or(0, |(c, _)| c)
}

fn count_csv(m: &[Vec<usize>]) -> String {
    let mut out = (0..m.len())
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for row in m {
        out.push_str(
            &row.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        out.push('\n');
    }
    out
}
