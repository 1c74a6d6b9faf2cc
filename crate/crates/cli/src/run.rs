//! Execution of resolved run configs: single training runs, meta-training,
//! benchmarks, prediction.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use condgrad::baselines::{self, AdamParams};
use condgrad::datasets::{self, Dataset};
use condgrad::domains::SimplexVector;
use condgrad::error::{Error, Result};
use condgrad::fw::{self, FwTrace, SimplexLmo, StepSchedule, Timing};
use condgrad::l2lc::{self, LstmController, MetaEpochLoss, MetaTrainConfig, TaskFamily, Variant};
use condgrad::linalg::{self, Matrix};
use condgrad::softmax::{self, SoftmaxModel};
use condgrad::svm::{self, KernelMatrix, SvmModel};

use crate::config::{ConfigMap, Experiment, Method, RunConfig};

pub enum ModelArtifact {
    Svm(SvmModel),
    Softmax(SoftmaxModel),
    /// QP runs have no model proper; the final simplex point is the artifact.
    Alpha(Vec<f64>),
}

pub struct RunOutcome {
    pub final_obj: f64,
    pub acc: Option<f64>,
    pub iters: usize,
    pub trace: FwTrace,
    pub model: ModelArtifact,
}

impl RunOutcome {
    pub fn summary_line(&self, method: Method) -> String {
        let acc = match self.acc {
            Some(a) => a.to_string(),
            None => "na".to_string(),
        };
        format!(
            "method={} final_obj={} acc={} iters={}",
            method.name(),
            self.final_obj,
            acc,
            self.iters
        )
    }
}

fn load_controller(cfg: &RunConfig, want: Variant) -> Result<Arc<LstmController>> {
    let path = cfg.controller.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "method {} needs --controller <file>",
            cfg.method.name()
        ))
    })?;
    let file = File::open(path)?;
    let ctrl = LstmController::load(BufReader::new(file))?;
    if ctrl.variant != want {
        return Err(Error::Config(format!(
            "controller variant {:?} does not match method {}",
            ctrl.variant,
            cfg.method.name()
        )));
    }
    Ok(Arc::new(ctrl))
}

fn simplex_strategy(cfg: &RunConfig) -> Result<(SimplexLmo, StepSchedule)> {
    Ok(match cfg.method {
        Method::Fw => (SimplexLmo::Exact, cfg.schedule.clone()),
        Method::FwSoftmin => (SimplexLmo::Softmin { beta: cfg.beta }, cfg.schedule.clone()),
        Method::L2lcGamma => (
            SimplexLmo::Softmin { beta: cfg.beta },
            StepSchedule::Learned(load_controller(cfg, Variant::Gamma)?),
        ),
        Method::L2lcDirection => (
            SimplexLmo::LearnedDirection {
                controller: load_controller(cfg, Variant::Direction)?,
                beta: cfg.beta,
            },
            cfg.schedule.clone(),
        ),
        other => {
            return Err(Error::Config(format!(
                "method {} is not a Frank-Wolfe strategy",
                other.name()
            )))
        }
    })
}

fn load_binary_data(cfg: &RunConfig) -> Result<condgrad::svm::LabeledDataset> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("svm experiment needs --data <csv>".into()))?;
    match datasets::load_csv(path, &cfg.label_column)? {
        Dataset::Binary(d) => Ok(d),
        Dataset::Multiclass(_) => Err(Error::Config(
            "svm experiment needs binary -1/+1 labels".into(),
        )),
    }
}

fn pgd_step(k: &KernelMatrix, cfg: &RunConfig) -> Result<f64> {
    match cfg.step {
        Some(s) => Ok(s),
        None => {
            let sigma = linalg::power_iteration(k.matrix(), 100, cfg.seed)?.sigma_est;
            Ok(1.0 / sigma.max(1e-12))
        }
    }
}

fn dual_value(k: &KernelMatrix, alpha: &[f64]) -> f64 {
    0.5 * linalg::dot(alpha, &k.matvec(alpha))
}

/// A simplex QP solved by the configured method: the shared core of the qp
/// experiment and the baseline SVM paths.
fn solve_simplex_qp(
    cfg: &RunConfig,
    kernel: &KernelMatrix,
) -> Result<(Vec<f64>, FwTrace)> {
    match cfg.method {
        Method::Fw | Method::FwSoftmin | Method::L2lcGamma | Method::L2lcDirection => {
            let (lmo, schedule) = simplex_strategy(cfg)?;
            let problem = fw::simplex_qp_problem(kernel.matrix().clone(), lmo);
            let run = fw::run_fw(&problem, &schedule, cfg.iters, None)?;
            Ok((run.final_point.into_vec(), run.trace))
        }
        Method::AdamReparam => {
            let (alpha, trace) = baselines::reparam_simplex_train(
                kernel,
                cfg.iters,
                AdamParams::with_step(cfg.adam_step),
            )?;
            Ok((alpha.into_vec(), trace))
        }
        Method::AdamLagrangian => {
            let lambda = cfg.lambda.unwrap_or(1.0 / kernel.n() as f64);
            let (alpha, trace) = baselines::lagrangian_adam_train(
                kernel,
                lambda,
                cfg.iters,
                AdamParams::with_step(cfg.adam_step),
            )?;
            Ok((alpha, trace))
        }
        Method::ProjectedGd => {
            let step = pgd_step(kernel, cfg)?;
            let (alpha, trace) = baselines::projected_gd_qp(kernel, step, cfg.iters)?;
            Ok((alpha.into_vec(), trace))
        }
    }
}

pub fn execute_run(cfg: &RunConfig) -> Result<RunOutcome> {
    match cfg.experiment {
        Experiment::Qp => {
            let kernel = l2lc::random_qp_kernel(cfg.qp_n, cfg.seed);
            let (alpha, trace) = solve_simplex_qp(cfg, &kernel)?;
            Ok(RunOutcome {
                final_obj: dual_value(&kernel, &alpha),
                acc: None,
                iters: trace.len(),
                trace,
                model: ModelArtifact::Alpha(alpha),
            })
        }
        Experiment::Svm => {
            let data = load_binary_data(cfg)?;
            let kernel = svm::build_kernel(&data, cfg.kernel, cfg.c)?;
            let (alpha, trace) = solve_simplex_qp(cfg, &kernel)?;
            // the Lagrangian iterate is off-simplex; normalizing maps its KKT
            // point onto the dual optimum and leaves prediction signs intact
            let alpha = if matches!(cfg.method, Method::AdamLagrangian) {
                let total: f64 = alpha.iter().sum();
                if total.is_nan() || total <= 0.0 {
                    return Err(Error::Numeric(
                        "lagrangian run collapsed to the zero vector".into(),
                    ));
                }
                alpha.iter().map(|a| a / total).collect()
            } else {
                alpha
            };
            let final_obj = dual_value(&kernel, &alpha);
            let model = SvmModel {
                alpha: SimplexVector::new(alpha)?,
                data: data.clone(),
                kernel: cfg.kernel,
                beta: cfg.beta,
                c: cfg.c,
            };
            let acc = svm::accuracy(&model, &data)?;
            Ok(RunOutcome {
                final_obj,
                acc: Some(acc),
                iters: trace.len(),
                trace,
                model: ModelArtifact::Svm(model),
            })
        }
        Experiment::Softmax => {
            if cfg.method != Method::Fw {
                return Err(Error::Config(
                    "softmax experiment supports only method fw (power-iteration LMO)".into(),
                ));
            }
            let path = cfg
                .data
                .as_ref()
                .ok_or_else(|| Error::Config("softmax experiment needs --data <csv>".into()))?;
            let data = match datasets::load_csv(path, &cfg.label_column)? {
                Dataset::Multiclass(d) => d,
                Dataset::Binary(_) => {
                    return Err(Error::Config(
                        "softmax experiment needs integer class labels".into(),
                    ))
                }
            };
            let (model, trace) = softmax::train_softmax_fw_scheduled(
                &data,
                cfg.tau,
                cfg.power_budget,
                &cfg.schedule,
                cfg.iters,
                cfg.seed,
            )?;
            let final_obj = softmax::softmax_objective(model.weights.dense(), &data)?;
            let acc = softmax::accuracy(&model, &data)?;
            Ok(RunOutcome {
                final_obj,
                acc: Some(acc),
                iters: trace.len(),
                trace,
                model: ModelArtifact::Softmax(model),
            })
        }
    }
}

/// Writes trace.csv (config hash in a leading comment) and the model file.
pub fn write_run_artifacts(
    outcome: &RunOutcome,
    out_dir: &Path,
    config_hash: &str,
    config_text: &str,
    timing: Timing,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let trace_path = out_dir.join("trace.csv");
    let mut trace_file = File::create(&trace_path)?;
    writeln!(trace_file, "# config {config_hash}")?;
    outcome.trace.write_csv(&mut trace_file, timing)?;

    fs::write(out_dir.join("config.txt"), config_text)?;

    match &outcome.model {
        ModelArtifact::Svm(model) => {
            let mut f = File::create(out_dir.join("model.cgm"))?;
            model.save(&mut f, Some(config_hash))?;
        }
        ModelArtifact::Softmax(model) => {
            let mut f = File::create(out_dir.join("model.cgm"))?;
            model.save(&mut f, Some(config_hash))?;
        }
        ModelArtifact::Alpha(alpha) => {
            let mut f = File::create(out_dir.join("alpha.csv"))?;
            writeln!(f, "# config {config_hash}")?;
            let row: Vec<String> = alpha.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{}", row.join(","))?;
        }
    }
    Ok(trace_path)
}

// ---------------------------------------------------------------------------
// meta-train
// ---------------------------------------------------------------------------

pub struct MetaOutcome {
    pub controller: LstmController,
    pub losses: Vec<MetaEpochLoss>,
}

pub fn execute_meta_train(map: &ConfigMap) -> Result<MetaOutcome> {
    let cfg = RunConfig::from_map(map)?;
    let variant = match map.get("variant") {
        Some("gamma") => Variant::Gamma,
        Some("direction") => Variant::Direction,
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown variant '{other}' (valid: gamma, direction)"
            )))
        }
        None => return Err(Error::Config("missing 'variant'".into())),
    };
    let family = match map.get("tasks") {
        Some("qp") => TaskFamily::RandomQp { n: cfg.qp_n },
        Some("svm-circles") => {
            let data = match &cfg.data {
                Some(path) => match datasets::load_csv(path, &cfg.label_column)? {
                    Dataset::Binary(d) => d,
                    Dataset::Multiclass(_) => {
                        return Err(Error::Config("svm-circles tasks need binary labels".into()))
                    }
                },
                None => datasets::generate_circles(
                    map.parsed_or("n", 200)?,
                    map.parsed_or("inner", 1.0)?,
                    map.parsed_or("outer", 2.0)?,
                    map.parsed_or("noise", 0.1)?,
                    cfg.seed,
                )?,
            };
            let kernel = svm::build_kernel(&data, cfg.kernel, cfg.c)?;
            let subset = map.parsed_or("subset", 40)?;
            TaskFamily::KernelSubsets { kernel, subset }
        }
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown task family '{other}' (valid: qp, svm-circles)"
            )))
        }
        None => return Err(Error::Config("missing 'tasks'".into())),
    };
    let meta = MetaTrainConfig {
        variant,
        unroll: map.parsed_or("unroll", 100)?,
        segment_len: map.parsed_or("segment_len", 20)?,
        meta_epochs: map.parsed_or("meta_epochs", 100)?,
        meta_step: map.parsed_or("meta_step", 1e-3)?,
        train_tasks: map.parsed_or("train_tasks", 32)?,
        val_tasks: map.parsed_or("val_tasks", 8)?,
        patience: map.parsed_or("patience", 10)?,
        beta: cfg.beta,
        direction_gamma: cfg.schedule.clone(),
        seed: cfg.seed,
    };
    let result = l2lc::meta_train(&family, &meta)?;
    Ok(MetaOutcome {
        controller: result.controller,
        losses: result.epoch_losses,
    })
}

pub fn write_meta_artifacts(
    outcome: &MetaOutcome,
    out: &Path,
    loss_out: &Path,
    config_hash: &str,
) -> Result<()> {
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = File::create(out)?;
    outcome.controller.save(&mut f, Some(config_hash))?;
    let mut lf = File::create(loss_out)?;
    writeln!(lf, "# config {config_hash}")?;
    writeln!(lf, "epoch,train_loss,val_loss")?;
    for e in &outcome.losses {
        writeln!(lf, "{},{},{}", e.epoch, e.train_loss, e.val_loss)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn split_list(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

struct BenchRun {
    method: String,
    seed: u64,
    outcome: Result<RunOutcome>,
    dir: PathBuf,
}

/// Runs every (method, seed) pair on the same config, each into its own
/// directory; the manifest is written last. Returns the process exit code.
pub fn execute_bench(map: &ConfigMap, out_dir: &Path) -> Result<i32> {
    let methods = split_list(
        map.get("methods")
            .ok_or_else(|| Error::Config("bench config needs 'methods'".into()))?,
    );
    if methods.len() < 2 {
        return Err(Error::Config("bench needs at least two methods".into()));
    }
    let seeds: Vec<u64> = split_list(
        map.get("seeds")
            .ok_or_else(|| Error::Config("bench config needs 'seeds'".into()))?,
    )
    .iter()
    .map(|s| {
        s.parse::<u64>()
            .map_err(|_| Error::Config(format!("bad seed '{s}'")))
    })
    .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("bench needs at least one seed".into()));
    }
    for m in &methods {
        Method::parse(m)?; // validate up front
    }

    fs::create_dir_all(out_dir)?;
    let hash = map.hash();

    let mut runs: Vec<BenchRun> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for method in &methods {
            for &seed in &seeds {
                let mut run_map = map.clone();
                run_map.set("method", method);
                run_map.set("seed", seed);
                let dir = out_dir.join(format!("{method}-seed{seed}"));
                let hash = hash.clone();
                handles.push(scope.spawn(move || {
                    let outcome = RunConfig::from_map(&run_map).and_then(|cfg| {
                        let outcome = execute_run(&cfg)?;
                        write_run_artifacts(
                            &outcome,
                            &dir,
                            &hash,
                            &run_map.canonical(),
                            cfg.timing,
                        )?;
                        Ok(outcome)
                    });
                    BenchRun {
                        method: method.clone(),
                        seed,
                        outcome,
                        dir,
                    }
                }));
            }
        }
        for h in handles {
            runs.push(h.join().expect("bench worker panicked"));
        }
    });
    // fixed ordering regardless of thread completion order
    runs.sort_by(|a, b| (&a.method, a.seed).cmp(&(&b.method, b.seed)));

    let mut summary = String::from("method,runs,final_obj_mean,final_obj_std,acc_mean,acc_std\n");
    for method in &methods {
        let ok: Vec<&RunOutcome> = runs
            .iter()
            .filter(|r| &r.method == method)
            .filter_map(|r| r.outcome.as_ref().ok())
            .collect();
        if ok.is_empty() {
            summary.push_str(&format!("{method},0,na,na,na,na\n"));
            continue;
        }
        let objs: Vec<f64> = ok.iter().map(|o| o.final_obj).collect();
        let (obj_mean, obj_std) = mean_std(&objs);
        let accs: Vec<f64> = ok.iter().filter_map(|o| o.acc).collect();
        let acc_part = if accs.is_empty() {
            "na,na".to_string()
        } else {
            let (m, s) = mean_std(&accs);
            format!("{m},{s}")
        };
        summary.push_str(&format!(
            "{method},{},{obj_mean},{obj_std},{acc_part}\n",
            ok.len()
        ));
    }
    fs::write(out_dir.join("summary.csv"), summary)?;

    let mut manifest = format!("# config {hash}\n");
    let mut any_ok = false;
    for r in &runs {
        let status = match &r.outcome {
            Ok(_) => {
                any_ok = true;
                "ok".to_string()
            }
            Err(e) => format!("failed: {}", e.to_string().replace('\n', " ")),
        };
        manifest.push_str(&format!(
            "{},{},{},{}\n",
            r.method,
            r.seed,
            r.dir.join("trace.csv").display(),
            status
        ));
    }
    fs::write(out_dir.join("bundle.manifest"), manifest)?;

    Ok(if any_ok { 0 } else { 4 })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

/// Feature rows from a CSV; a `label` column (by the configured name) is
/// dropped when present so labeled files predict cleanly.
fn read_feature_rows(path: &Path, label_column: &str) -> Result<Matrix> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(line))) => line,
        Some((i, Err(e))) => {
            return Err(Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 0,
                msg: "empty file".into(),
            })
        }
    };
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_idx = columns.iter().position(|c| *c == label_column);
    let width = columns.len();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {width} cells, got {}", cells.len()),
            });
        }
        let mut feats = Vec::with_capacity(width);
        for (ci, cell) in cells.iter().enumerate() {
            if Some(ci) == label_idx {
                continue;
            }
            feats.push(cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("non-numeric cell '{}'", cell.trim()),
            })?);
        }
        rows.push(feats);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no data rows".into(),
        });
    }
    Matrix::from_rows(&rows)
}

pub fn execute_predict(
    model_path: &Path,
    data_path: &Path,
    out_path: &Path,
    label_column: &str,
) -> Result<()> {
    let mut header = String::new();
    BufReader::new(File::open(model_path)?).read_line(&mut header)?;
    let features = read_feature_rows(data_path, label_column)?;
    let mut out = File::create(out_path)?;
    writeln!(out, "index,pred,score")?;
    match header.trim() {
        "CGM1 svm" => {
            let model = SvmModel::load(BufReader::new(File::open(model_path)?))?;
            for i in 0..features.rows() {
                let (label, score) = svm::svm_predict(&model, features.row(i))?;
                writeln!(out, "{i},{label},{score}")?;
            }
        }
        "CGM1 softmax" => {
            let model = SoftmaxModel::load(BufReader::new(File::open(model_path)?))?;
            for i in 0..features.rows() {
                let probs = softmax::softmax_probs(model.weights.dense(), features.row(i))?;
                let class = softmax::classify(&model, features.row(i))?;
                writeln!(out, "{i},{class},{}", probs[class])?;
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unrecognized model header '{other}'"
            )))
        }
    }
    Ok(())
}
