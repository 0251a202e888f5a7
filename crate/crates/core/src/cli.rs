//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 validation or I/O error, 3 fit did not converge.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{load_cohort, read_subjects_file, Cohort, OBSERVATIONS_FILE, SUBJECTS_FILE};
use crate::deformation::{
    image_to_pgm, labels_to_pgm, read_field_csv, read_image_pgm, read_labels_pgm,
    synthesize_followup, warp_labels, Atlas, DeformationModel,
};
use crate::error::{Error, Result};
use crate::kernels::{estimate_kernel_params, gram_set};
use crate::metrics::{compare_methods, dice, mean, relative_error, DiceSummary, EvalReport};
use crate::mixedmodel::{fit, FitOptions, FittedModel};
use crate::predictor::{predict_with, predictions_csv, Method, PredictOptions, PredictionRequest};
use crate::simulator::{simulate, SimScenario, SimTruth};

pub const THREADS_ENV: &str = "LONGIPRED_THREADS";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.json";
pub const ANATOMY_DIR: &str = "anatomy";
const DEFORMATION_FILE: &str = "deformation.json";

#[derive(Debug, Parser)]
#[command(name = "longipred", version, about = "Longitudinal phenotype prediction from baseline data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a synthetic cohort with ground truth.
    Simulate(Opts),
    /// Fit the model on a training cohort and write model.json.
    Fit(Opts),
    /// Predict follow-up phenotypes for new subjects.
    Predict(Opts),
    /// Compare methods on a held-out cohort; writes report.json and plotdata.csv.
    Evaluate(Opts),
    /// Write the kernel parameters and Gram matrices of a cohort.
    KernelDump(Opts),
    /// simulate, split, fit, predict and evaluate in one run.
    Pipeline(Opts),
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct Opts {
    /// Training cohort directory (subjects.csv + observations.csv).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Test cohort directory, or a subjects.csv file.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Model JSON to read.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Score tolerance per observation.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Comma-separated subset of full,pop,carry.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    stratum_train: Option<String>,
    #[arg(long)]
    stratum_test: Option<String>,
    #[arg(long)]
    #[serde(default)]
    allow_unconverged: bool,
    /// Restricted maximum likelihood.
    #[arg(long)]
    #[serde(default)]
    reml: bool,
    /// Scenario JSON for simulate/pipeline.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Built-in scenario: strong_h, null_h or anatomy.
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated absolute target ages.
    #[arg(long)]
    ages: Option<String>,
    /// Comma-separated intervals after each subject's baseline.
    #[arg(long)]
    horizons: Option<String>,
    /// Anatomy directory (atlas, PCA model, baseline fields).
    #[arg(long)]
    anatomy: Option<PathBuf>,
    /// JSON file with defaults for any of these options; flags win.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

impl Opts {
    fn merged(self) -> Result<Opts> {
        let Some(path) = &self.config else {
            return Ok(self);
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Opts = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(Opts {
            train: self.train.or(file.train),
            test: self.test.or(file.test),
            model: self.model.or(file.model),
            out: self.out.or(file.out),
            seed: self.seed.or(file.seed),
            tol: self.tol.or(file.tol),
            max_iter: self.max_iter.or(file.max_iter),
            methods: self.methods.or(file.methods),
            stratum_train: self.stratum_train.or(file.stratum_train),
            stratum_test: self.stratum_test.or(file.stratum_test),
            allow_unconverged: self.allow_unconverged || file.allow_unconverged,
            reml: self.reml || file.reml,
            scenario: self.scenario.or(file.scenario),
            preset: self.preset.or(file.preset),
            ages: self.ages.or(file.ages),
            horizons: self.horizons.or(file.horizons),
            anatomy: self.anatomy.or(file.anatomy),
            config: self.config,
        })
    }

    fn need<'a>(&self, v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
        v.as_ref()
            .ok_or_else(|| Error::Config(format!("--{flag} is required")))
    }

    fn fit_options(&self) -> Result<FitOptions> {
        let mut o = FitOptions::default();
        if let Some(t) = self.tol {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("--tol must be positive, got {t}")));
            }
            o.score_tol = t;
        }
        if let Some(m) = self.max_iter {
            o.max_iter = m;
        }
        o.reml = self.reml;
        Ok(o)
    }

    fn methods(&self) -> Result<Vec<Method>> {
        Method::parse_list(self.methods.as_deref().unwrap_or("full,pop,carry"))
    }

    fn predict_options(&self) -> PredictOptions {
        PredictOptions {
            allow_unconverged: self.allow_unconverged,
        }
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NotConverged(_) => 3,
        _ => 2,
    }
}

fn configure_threads() {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                // a second call in the same process keeps the first pool
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => log::warn!("ignoring {THREADS_ENV}={v:?}; expected a positive integer"),
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(o) => cmd_simulate(o.merged()?),
        Command::Fit(o) => cmd_fit(o.merged()?),
        Command::Predict(o) => cmd_predict(o.merged()?),
        Command::Evaluate(o) => cmd_evaluate(o.merged()?),
        Command::KernelDump(o) => cmd_kernel_dump(o.merged()?),
        Command::Pipeline(o) => cmd_pipeline(o.merged()?),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes).as_slice())
}

#[derive(Debug, Serialize)]
struct FileHash {
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: Option<u64>,
    options: BTreeMap<&'static str, String>,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

/// Collects written files so the manifest can hash them.
struct Output {
    dir: PathBuf,
    command: &'static str,
    seed: Option<u64>,
    options: BTreeMap<&'static str, String>,
    inputs: Vec<FileHash>,
    outputs: BTreeMap<String, String>,
}

impl Output {
    fn new(dir: &Path, command: &'static str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            seed: None,
            options: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let parent = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| format!("{}/", n.to_string_lossy()))
            .unwrap_or_default();
        self.inputs.push(FileHash {
            file: format!("{parent}{name}"),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    fn option(&mut self, key: &'static str, value: impl ToString) {
        self.options.insert(key, value.to_string());
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    fn write_cohort(&mut self, rel: &str, cohort: &Cohort) -> Result<()> {
        self.write(&format!("{rel}/{SUBJECTS_FILE}"), cohort.subjects_csv().as_bytes())?;
        self.write(&format!("{rel}/{OBSERVATIONS_FILE}"), cohort.observations_csv().as_bytes())?;
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let manifest = Manifest {
            tool: "longipred",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            seed: self.seed,
            options: self.options,
            inputs: self.inputs,
            outputs: self
                .outputs
                .into_iter()
                .map(|(file, sha256)| FileHash { file, sha256 })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn load_scenario(o: &Opts) -> Result<(SimScenario, Option<PathBuf>)> {
    let mut sc = match (&o.scenario, &o.preset) {
        (Some(_), Some(_)) => {
            return Err(Error::Config("give either --scenario or --preset, not both".into()))
        }
        (Some(path), None) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let sc = SimScenario::from_json(&text).map_err(|e| match e {
                Error::InvalidScenario(m) => Error::InvalidScenario(format!("{}: {m}", path.display())),
                other => other,
            })?;
            (sc, Some(path.clone()))
        }
        (None, Some(name)) => {
            let seed = o
                .seed
                .ok_or_else(|| Error::Config("--seed is required with --preset".into()))?;
            (SimScenario::preset(name, seed)?, None)
        }
        (None, None) => return Err(Error::Config("--scenario or --preset is required".into())),
    };
    if let Some(seed) = o.seed {
        sc.0.seed = seed;
    }
    Ok(sc)
}

/// Writes cohort CSVs, truth.json and (anatomy mode) the anatomy directory.
fn write_simulation(out: &mut Output, cohort: &Cohort, truth: &SimTruth, cohort_dir: &str) -> Result<()> {
    out.write_cohort(cohort_dir, cohort)?;
    out.write("truth.json", truth.to_json().as_bytes())?;
    if let Some(an) = &truth.anatomy {
        out.write(&format!("{ANATOMY_DIR}/atlas_image.pgm"), &image_to_pgm(&an.atlas.image))?;
        out.write(&format!("{ANATOMY_DIR}/atlas_labels.pgm"), &labels_to_pgm(&an.atlas.labels))?;
        let mut model = serde_json::to_string_pretty(&an.deformation).expect("serializes");
        model.push('\n');
        out.write(&format!("{ANATOMY_DIR}/{DEFORMATION_FILE}"), model.as_bytes())?;
        let by_subject = cohort.observations_by_subject();
        for (i, s) in cohort.subjects().iter().enumerate() {
            out.write(
                &format!("{ANATOMY_DIR}/fields/{}_baseline.csv", s.id),
                an.baseline_fields[i].to_csv().as_bytes(),
            )?;
            out.write(
                &format!("{ANATOMY_DIR}/images/{}_baseline.pgm", s.id),
                &image_to_pgm(&an.baseline_image(i)?),
            )?;
            for (k, &obs) in by_subject[i].iter().enumerate() {
                out.write(
                    &format!("{ANATOMY_DIR}/labels/{}_t{}.pgm", s.id, k + 1),
                    &labels_to_pgm(&an.followup_labels(obs)?),
                )?;
            }
        }
    }
    Ok(())
}

fn cmd_simulate(o: Opts) -> Result<()> {
    let out_dir = o.need(&o.out, "out")?.clone();
    let (sc, scenario_path) = load_scenario(&o)?;
    let (cohort, truth) = simulate(&sc)?;
    let mut out = Output::new(&out_dir, "simulate")?;
    if let Some(p) = &scenario_path {
        out.input(p)?;
    }
    if let Some(p) = &o.preset {
        out.option("preset", p);
    }
    out.seed = Some(sc.seed);
    write_simulation(&mut out, &cohort, &truth, ".")?;
    out.finish()
}

/// Cohort directory or a `subjects.csv` path; observations are optional.
fn load_cohort_arg(path: &Path, need_observations: bool) -> Result<(Cohort, Vec<PathBuf>)> {
    let dir = if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let subjects = if path.is_dir() {
        dir.join(SUBJECTS_FILE)
    } else {
        path.to_path_buf()
    };
    let observations = dir.join(OBSERVATIONS_FILE);
    if observations.exists() {
        let c = load_cohort(&subjects, &observations)?;
        return Ok((c, vec![subjects, observations]));
    }
    if need_observations {
        return Err(Error::io(
            &observations,
            std::io::Error::new(std::io::ErrorKind::NotFound, "observations file not found"),
        ));
    }
    let c = Cohort::new(read_subjects_file(&subjects)?, Vec::new())?;
    Ok((c, vec![subjects]))
}

fn restrict(cohort: Cohort, stratum: &Option<String>) -> Result<Cohort> {
    match stratum {
        Some(s) => cohort.stratum(s),
        None => Ok(cohort),
    }
}

fn load_deformation(dir: &Path) -> Result<DeformationModel> {
    let path = dir.join(DEFORMATION_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

fn fit_cohort(train: &Cohort, opts: &FitOptions, anatomy: Option<&Path>) -> Result<FittedModel> {
    let params = estimate_kernel_params(train)?;
    let gram = gram_set(train, &params)?;
    let mut model = fit(train, &gram, opts)?;
    if let Some(dir) = anatomy {
        model.deformation = Some(load_deformation(dir)?);
    }
    Ok(model)
}

fn cmd_fit(o: Opts) -> Result<()> {
    let train_path = o.need(&o.train, "train")?;
    let out_dir = o.need(&o.out, "out")?.clone();
    let (train, inputs) = load_cohort_arg(train_path, true)?;
    let train = restrict(train, &o.stratum_train)?;
    let opts = o.fit_options()?;
    let model = fit_cohort(&train, &opts, o.anatomy.as_deref())?;
    let mut out = Output::new(&out_dir, "fit")?;
    for p in &inputs {
        out.input(p)?;
    }
    record_fit_options(&mut out, &o, &opts);
    out.write(MODEL_FILE, model.to_json().as_bytes())?;
    out.finish()?;
    if !o.allow_unconverged {
        model.ensure_converged()?;
    }
    Ok(())
}

fn record_fit_options(out: &mut Output, o: &Opts, opts: &FitOptions) {
    out.option("score_tol", opts.score_tol);
    out.option("max_iter", opts.max_iter);
    out.option("reml", opts.reml);
    out.option("allow_unconverged", o.allow_unconverged);
    if let Some(s) = &o.stratum_train {
        out.option("stratum_train", s);
    }
    if let Some(s) = &o.stratum_test {
        out.option("stratum_test", s);
    }
}

fn parse_list(s: &str, flag: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| Error::Config(format!("--{flag}: {p:?} is not a number")))
        })
        .collect()
}

fn requests(cohort: &Cohort, o: &Opts) -> Result<Vec<PredictionRequest>> {
    let fixed = match (&o.ages, &o.horizons) {
        (Some(_), Some(_)) => {
            return Err(Error::Config("give either --ages or --horizons, not both".into()))
        }
        (Some(a), None) => Some((parse_list(a, "ages")?, false)),
        (None, Some(h)) => Some((parse_list(h, "horizons")?, true)),
        (None, None) => None,
    };
    let by_subject = cohort.observations_by_subject();
    Ok(cohort
        .subjects()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let target_ages = match &fixed {
                Some((v, true)) => v.iter().map(|h| s.baseline_age + h).collect(),
                Some((v, false)) => v.clone(),
                None => by_subject[i]
                    .iter()
                    .map(|&k| cohort.observations()[k].age)
                    .collect(),
            };
            PredictionRequest {
                subject: s.clone(),
                target_ages,
            }
        })
        .collect())
}

/// Writes `predictions.csv` for the first method and `predictions_<m>.csv` for the rest.
fn write_predictions(
    out: &mut Output,
    model: &FittedModel,
    reqs: &[PredictionRequest],
    methods: &[Method],
    opts: &PredictOptions,
) -> Result<()> {
    for (k, &m) in methods.iter().enumerate() {
        let preds = reqs
            .iter()
            .map(|r| predict_with(m, model, r, opts))
            .collect::<Result<Vec<_>>>()?;
        for p in &preds {
            for w in &p.warnings {
                log::warn!("{}: {w}", p.subject_id);
            }
        }
        let name = if k == 0 {
            "predictions.csv".to_string()
        } else {
            format!("predictions_{}.csv", m.name())
        };
        out.write(&name, predictions_csv(&preds).as_bytes())?;
    }
    Ok(())
}

fn cmd_predict(o: Opts) -> Result<()> {
    let model_path = o.need(&o.model, "model")?;
    let test_path = o.need(&o.test, "test")?;
    let out_dir = o.need(&o.out, "out")?.clone();
    let model = FittedModel::load(model_path)?;
    let (test, inputs) = load_cohort_arg(test_path, false)?;
    let test = restrict(test, &o.stratum_test)?;
    let reqs = requests(&test, &o)?;
    if reqs.iter().all(|r| r.target_ages.is_empty()) {
        return Err(Error::Config(
            "no target ages: pass --ages or --horizons, or provide observations.csv".into(),
        ));
    }
    let mut out = Output::new(&out_dir, "predict")?;
    out.input(model_path)?;
    for p in &inputs {
        out.input(p)?;
    }
    let methods = o.methods()?;
    out.option("methods", methods.iter().map(Method::name).collect::<Vec<_>>().join(","));
    write_predictions(&mut out, &model, &reqs, &methods, &o.predict_options())?;
    out.finish()
}

/// Dice and label-count error of propagated labels, per method and label.
fn anatomy_scores(
    model: &FittedModel,
    test: &Cohort,
    anatomy: &Path,
    methods: &[Method],
    opts: &PredictOptions,
) -> Result<Vec<DiceSummary>> {
    let deformation = model.deformation.clone().map_or_else(|| load_deformation(anatomy), Ok)?;
    let atlas = Atlas::new(
        read_image_pgm(&anatomy.join("atlas_image.pgm"))?,
        read_labels_pgm(&anatomy.join("atlas_labels.pgm"))?,
    )?;
    let grid = atlas.grid();
    let labels = atlas.labels.labels();
    let mut acc: BTreeMap<(Method, u8), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let by_subject = test.observations_by_subject();
    for (i, s) in test.subjects().iter().enumerate() {
        let field = read_field_csv(&anatomy.join(format!("fields/{}_baseline.csv", s.id)), grid)?;
        let image = read_image_pgm(&anatomy.join(format!("images/{}_baseline.pgm", s.id)))?;
        let baseline_labels = warp_labels(&atlas.labels, &field)?;
        let req = PredictionRequest {
            subject: s.clone(),
            target_ages: by_subject[i].iter().map(|&k| test.observations()[k].age).collect(),
        };
        for &m in methods {
            let pred = predict_with(m, model, &req, opts)?;
            for (k, pt) in pred.points.iter().enumerate() {
                let truth = read_labels_pgm(&anatomy.join(format!("labels/{}_t{}.pgm", s.id, k + 1)))?;
                let syn = synthesize_followup(&image, &field, &pt.y_hat, &deformation)?;
                let propagated = warp_labels(&baseline_labels, &syn.baseline_to_followup)?;
                for &l in &labels {
                    let entry = acc.entry((m, l)).or_default();
                    entry.0.push(dice(&propagated, &truth, l)?);
                    let want = truth.count(l) as f64;
                    if want > 0.0 {
                        entry.1.push(relative_error(propagated.count(l) as f64, want)?);
                    }
                }
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|((method, label), (d, c))| DiceSummary {
            method,
            label,
            n: d.len(),
            mean_dice: mean(&d),
            mean_count_rel_error: mean(&c),
        })
        .collect())
}

fn evaluate_into(
    out: &mut Output,
    model: &FittedModel,
    test: &Cohort,
    methods: &[Method],
    opts: &PredictOptions,
    anatomy: Option<&Path>,
) -> Result<EvalReport> {
    let mut report = if model.deformation.is_some() || anatomy.is_some() {
        // PCA coefficients can sit near zero, so relative errors are not reported
        EvalReport {
            methods: methods.to_vec(),
            ..EvalReport::default()
        }
    } else {
        compare_methods(model, test, methods, opts)?
    };
    if let Some(dir) = anatomy {
        report.dice = anatomy_scores(model, test, dir, methods, opts)?;
    }
    out.write("report.json", report.to_json().as_bytes())?;
    out.write("plotdata.csv", report.plotdata_csv().as_bytes())?;
    Ok(report)
}

fn cmd_evaluate(o: Opts) -> Result<()> {
    let model_path = o.need(&o.model, "model")?;
    let test_path = o.need(&o.test, "test")?;
    let out_dir = o.need(&o.out, "out")?.clone();
    let model = FittedModel::load(model_path)?;
    let (test, inputs) = load_cohort_arg(test_path, true)?;
    let test = restrict(test, &o.stratum_test)?;
    let methods = o.methods()?;
    let mut out = Output::new(&out_dir, "evaluate")?;
    out.input(model_path)?;
    for p in &inputs {
        out.input(p)?;
    }
    out.option("methods", methods.iter().map(Method::name).collect::<Vec<_>>().join(","));
    evaluate_into(&mut out, &model, &test, &methods, &o.predict_options(), o.anatomy.as_deref())?;
    out.finish()
}

fn matrix_csv(m: &nalgebra::DMatrix<f64>, ids: &[String]) -> String {
    let mut s = String::from("id");
    for id in ids {
        s.push(',');
        s.push_str(id);
    }
    s.push('\n');
    for (i, id) in ids.iter().enumerate() {
        s.push_str(id);
        for j in 0..m.ncols() {
            s.push_str(&format!(",{:?}", m[(i, j)]));
        }
        s.push('\n');
    }
    s
}

fn cmd_kernel_dump(o: Opts) -> Result<()> {
    let train_path = o.need(&o.train, "train")?;
    let out_dir = o.need(&o.out, "out")?.clone();
    let (cohort, inputs) = load_cohort_arg(train_path, true)?;
    let cohort = restrict(cohort, &o.stratum_train)?;
    let params = estimate_kernel_params(&cohort)?;
    let gram = gram_set(&cohort, &params)?;
    let ids: Vec<String> = cohort.subjects().iter().map(|s| s.id.clone()).collect();
    let mut out = Output::new(&out_dir, "kernel-dump")?;
    for p in &inputs {
        out.input(p)?;
    }
    let mut pj = serde_json::to_string_pretty(&params).expect("serializes");
    pj.push('\n');
    out.write("kernel_params.json", pj.as_bytes())?;
    for (name, m) in ["K_G", "K_C", "K_I"].iter().zip(gram.matrices()) {
        out.write(&format!("{name}.csv"), matrix_csv(m, &ids).as_bytes())?;
    }
    out.finish()
}

fn cmd_pipeline(o: Opts) -> Result<()> {
    let out_dir = o.need(&o.out, "out")?.clone();
    let (sc, scenario_path) = load_scenario(&o)?;
    let (cohort, truth) = simulate(&sc)?;
    let mut out = Output::new(&out_dir, "pipeline")?;
    if let Some(p) = &scenario_path {
        out.input(p)?;
    }
    if let Some(p) = &o.preset {
        out.option("preset", p);
    }
    out.seed = Some(sc.seed);
    write_simulation(&mut out, &cohort, &truth, "cohort")?;

    let (train, test) = match (&o.stratum_train, &o.stratum_test) {
        (None, None) => {
            if sc.n_test == 0 {
                return Err(Error::Config(
                    "scenario has n_test = 0; set it or pass --stratum-train/--stratum-test".into(),
                ));
            }
            cohort.split_holdout(sc.n_test)?
        }
        (Some(a), Some(b)) => (cohort.stratum(a)?, cohort.stratum(b)?),
        _ => {
            return Err(Error::Config(
                "--stratum-train and --stratum-test go together".into(),
            ))
        }
    };
    out.write_cohort("train", &train)?;
    out.write_cohort("test", &test)?;

    let opts = o.fit_options()?;
    record_fit_options(&mut out, &o, &opts);
    let mut model = fit_cohort(&train, &opts, None)?;
    model.deformation = truth.anatomy.as_ref().map(|a| a.deformation.clone());
    out.write(MODEL_FILE, model.to_json().as_bytes())?;
    if !o.allow_unconverged && !model.converged {
        out.finish()?;
        return model.ensure_converged();
    }

    let methods = o.methods()?;
    out.option("methods", methods.iter().map(Method::name).collect::<Vec<_>>().join(","));
    let popts = o.predict_options();
    let reqs = requests(&test, &o)?;
    write_predictions(&mut out, &model, &reqs, &methods, &popts)?;
    let anatomy = truth.anatomy.as_ref().map(|_| out_dir.join(ANATOMY_DIR));
    evaluate_into(&mut out, &model, &test, &methods, &popts, anatomy.as_deref())?;
    out.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(args: &[&str]) -> Vec<String> {
        std::iter::once("longipred")
            .chain(args.iter().copied())
            .map(String::from)
            .collect()
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(&argv(&["bogus"])), 2);
        assert_eq!(run(&argv(&["fit"])), 2);
        assert_eq!(run(&argv(&["simulate", "--preset", "strong_h"])), 2);
    }

    #[test]
    fn not_converged_maps_to_3() {
        assert_eq!(exit_code(&Error::NotConverged("x".into())), 3);
        assert_eq!(exit_code(&Error::DegenerateDesign("x".into())), 2);
    }

    #[test]
    fn config_file_fills_missing_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("cfg.json");
        fs::write(&cfg, r#"{"seed": 5, "tol": 1e-4, "methods": "pop"}"#).unwrap();
        let o = Opts {
            config: Some(cfg),
            tol: Some(1e-3),
            ..Opts::default()
        }
        .merged()
        .unwrap();
        assert_eq!(o.seed, Some(5));
        assert_eq!(o.tol, Some(1e-3));
        assert_eq!(o.methods().unwrap(), vec![Method::Population]);
    }
}
