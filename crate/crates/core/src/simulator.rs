//! Synthetic cohorts drawn from the generative model, with ground truth.
//!
//! Per subject `i` and phenotype dimension `d`:
//! `Δy = Δx (β̄_d + shift_{stratum,d} + h_G,i + h_C,i + h_I,i) + ε`, with each `h_D`
//! an exact multivariate-normal draw of covariance `τ²_D K_D` over the sampled
//! subjects.


use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Observation, Subject};
use crate::deformation::{
    encode, fit_pca, invert_with_residual, warp_image, warp_labels, Atlas, DeformationModel,
    DisplacementField, Grid2D, Image, LabelMap, INVERT_FAIL,
};
use crate::error::{Error, Result};
use crate::kernels::{gram_set_for_subjects, kernel_params_with_weights, KernelParams};
use crate::mixedmodel::VarianceComponents;

pub const SAMPLING_JITTER: f64 = 1e-12;
pub const DEFAULT_STRATUM: &str = "cohort";
pub const N_MODES: usize = 4;

/// Atlas labels.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_VENTRICLE: u8 = 1;
pub const LABEL_HIPPOCAMPUS: u8 = 2;
pub const LABEL_CORTEX: u8 = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    #[default]
    Scalar,
    Anatomy2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratumSpec {
    pub name: String,
    pub count: usize,
    /// Added to β̄ for this stratum (scalar mode, length M).
    #[serde(default)]
    pub beta_shift: Vec<f64>,
    /// Added to the expansion rate for this stratum (anatomy mode).
    #[serde(default)]
    pub expansion_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnatomySpec {
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Standard deviation of each baseline shape mode.
    #[serde(default = "default_mode_sd")]
    pub mode_sd: Vec<f64>,
    /// Population trend along the ventricle-expansion mode, mode units per year.
    pub expansion_rate: f64,
    /// Variance components shared by every PCA coefficient.
    pub theta: VarianceComponents,
}

fn default_grid() -> usize {
    96
}

fn default_mode_sd() -> Vec<f64> {
    vec![1.0; N_MODES]
}

fn default_age_mean() -> f64 {
    70.0
}

fn default_age_sd() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub n_subjects: usize,
    pub loci: usize,
    pub clinical: usize,
    /// Baseline feature count P (scalar mode; anatomy mode derives it).
    #[serde(default)]
    pub features: usize,
    /// Phenotype count M (scalar mode; anatomy mode derives it).
    #[serde(default)]
    pub phenotypes: usize,
    #[serde(default)]
    pub beta_bar: Vec<f64>,
    /// One entry per phenotype dimension, or a single entry broadcast to all.
    #[serde(default)]
    pub theta: Vec<VarianceComponents>,
    pub maf: Vec<f64>,
    /// Follow-up intervals Δx in years, applied to every subject.
    pub followups: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub mode: SimMode,
    #[serde(default = "default_age_mean")]
    pub baseline_age_mean: f64,
    #[serde(default = "default_age_sd")]
    pub baseline_age_sd: f64,
    /// Scalar mode: mean of y_b per dimension.
    #[serde(default)]
    pub baseline_mean: Vec<f64>,
    #[serde(default)]
    pub baseline_sd: f64,
    /// Subject counts per stratum; empty means one stratum of `n_subjects`.
    #[serde(default)]
    pub strata: Vec<StratumSpec>,
    /// Clinical kernel weights used for sampling (default all ones).
    #[serde(default)]
    pub clinical_weights: Option<Vec<f64>>,
    /// Held-out subjects (last ids) for pipeline evaluation.
    #[serde(default)]
    pub n_test: usize,
    #[serde(default)]
    pub anatomy: Option<AnatomySpec>,
}

impl SimScenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: SimScenario = serde_json::from_str(text)
            .map_err(|e| Error::InvalidScenario(format!("scenario JSON: {e}")))?;
        Ok(s)
    }

    pub fn strata(&self) -> Vec<StratumSpec> {
        if self.strata.is_empty() {
            vec![StratumSpec {
                name: DEFAULT_STRATUM.into(),
                count: self.n_subjects,
                beta_shift: Vec::new(),
                expansion_shift: 0.0,
            }]
        } else {
            self.strata.clone()
        }
    }

    pub fn theta_for(&self, dim: usize) -> VarianceComponents {
        let theta = match (self.mode, &self.anatomy) {
            (SimMode::Anatomy2d, Some(a)) => return a.theta,
            _ => &self.theta,
        };
        if theta.len() == 1 {
            theta[0]
        } else {
            theta[dim]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        if self.n_subjects < 2 || self.loci == 0 || self.clinical == 0 {
            return bad("n_subjects >= 2, loci >= 1 and clinical >= 1 are required".into());
        }
        if self.maf.len() != self.loci {
            return bad(format!("maf has {} entries, loci = {}", self.maf.len(), self.loci));
        }
        if let Some(p) = self.maf.iter().find(|&&p| !(p > 0.0 && p <= 0.5)) {
            return bad(format!("minor-allele frequency {p} outside (0, 0.5]"));
        }
        if self.followups.is_empty() {
            return bad("at least one follow-up interval is required".into());
        }
        if self.followups.iter().any(|&t| !(t.is_finite() && t >= 0.0)) {
            return bad("follow-up intervals must be finite and >= 0".into());
        }
        if !(self.baseline_age_mean.is_finite() && self.baseline_age_sd >= 0.0) {
            return bad("baseline age distribution invalid".into());
        }
        let total: usize = self.strata().iter().map(|s| s.count).sum();
        if total != self.n_subjects {
            return bad(format!(
                "strata counts sum to {total}, n_subjects = {}",
                self.n_subjects
            ));
        }
        for s in self.strata() {
            if s.name.is_empty() || s.name.contains('-') || s.name.contains(',') {
                return bad(format!("stratum name {:?} must be nonempty without '-' or ','", s.name));
            }
        }
        if let Some(w) = &self.clinical_weights {
            if w.len() != self.clinical {
                return bad(format!("clinical_weights has {} entries, Q = {}", w.len(), self.clinical));
            }
        }
        if self.n_test >= self.n_subjects {
            return bad("n_test must leave at least one training subject".into());
        }
        match self.mode {
            SimMode::Scalar => {
                let m = self.phenotypes;
                if m == 0 || self.features == 0 {
                    return bad("scalar mode needs features >= 1 and phenotypes >= 1".into());
                }
                if self.beta_bar.len() != m || self.baseline_mean.len() != m {
                    return bad(format!("beta_bar and baseline_mean need {m} entries"));
                }
                if !(self.theta.len() == 1 || self.theta.len() == m) {
                    return bad(format!("theta needs 1 or {m} entries"));
                }
                if !(self.baseline_sd >= 0.0) {
                    return bad("baseline_sd must be >= 0".into());
                }
                for s in self.strata() {
                    if !(s.beta_shift.is_empty() || s.beta_shift.len() == m) {
                        return bad(format!("stratum {} beta_shift needs {m} entries", s.name));
                    }
                }
            }
            SimMode::Anatomy2d => {
                let Some(a) = &self.anatomy else {
                    return bad("anatomy2d mode needs an anatomy block".into());
                };
                if a.grid < 32 {
                    return bad("anatomy grid must be at least 32".into());
                }
                if a.mode_sd.len() != N_MODES || a.mode_sd.iter().any(|&s| !(s >= 0.0)) {
                    return bad(format!("mode_sd needs {N_MODES} nonnegative entries"));
                }
            }
        }
        for d in 0..self.phenotypes.max(1) {
            let t = self.theta_for(d);
            t.validate()
                .map_err(|e| Error::InvalidScenario(format!("theta[{d}]: {e}")))?;
        }
        Ok(())
    }

    /// τ² components each at least σ²; 3 follow-ups per subject. The slope is
    /// large against √τ² because the kernels share a constant component that
    /// is confounded with β̄.
    pub fn strong_h(n_subjects: usize, n_test: usize, seed: u64) -> Self {
        let loci = 100;
        Self {
            n_subjects,
            loci,
            clinical: 5,
            features: 5,
            phenotypes: 1,
            beta_bar: vec![1.0],
            theta: vec![VarianceComponents::new(1e-3, 1e-3, 1e-3, 2e-4)],
            maf: (0..loci)
                .map(|s| 0.1 + 0.35 * (s as f64 / (loci - 1) as f64))
                .collect(),
            followups: vec![1.0, 2.0, 3.0],
            seed,
            mode: SimMode::Scalar,
            baseline_age_mean: 70.0,
            baseline_age_sd: 5.0,
            baseline_mean: vec![10.0],
            baseline_sd: 0.2,
            strata: Vec::new(),
            clinical_weights: None,
            n_test,
            anatomy: None,
        }
    }

    /// Same layout as `strong_h` with every τ² set to zero.
    pub fn null_h(n_subjects: usize, n_test: usize, seed: u64) -> Self {
        Self {
            theta: vec![VarianceComponents::new(0.0, 0.0, 0.0, 2e-4)],
            ..Self::strong_h(n_subjects, n_test, seed)
        }
    }

    /// Healthy and disease strata on the 2D anatomy; disease subjects expand
    /// the ventricle faster.
    pub fn anatomy(n_healthy: usize, n_disease: usize, seed: u64) -> Self {
        Self {
            n_subjects: n_healthy + n_disease,
            loci: 20,
            clinical: 2,
            features: 0,
            phenotypes: 0,
            beta_bar: Vec::new(),
            theta: Vec::new(),
            maf: vec![0.3; 20],
            followups: vec![1.0, 2.0],
            seed,
            mode: SimMode::Anatomy2d,
            baseline_age_mean: 70.0,
            baseline_age_sd: 5.0,
            baseline_mean: Vec::new(),
            baseline_sd: 0.0,
            strata: vec![
                StratumSpec {
                    name: "healthy".into(),
                    count: n_healthy,
                    beta_shift: Vec::new(),
                    expansion_shift: 0.0,
                },
                StratumSpec {
                    name: "disease".into(),
                    count: n_disease,
                    beta_shift: Vec::new(),
                    expansion_shift: 1.0,
                },
            ],
            clinical_weights: None,
            n_test: 0,
            anatomy: Some(AnatomySpec {
                grid: default_grid(),
                mode_sd: default_mode_sd(),
                expansion_rate: 0.5,
                theta: VarianceComponents::new(0.02, 0.02, 0.02, 0.01),
            }),
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "strong_h" | "strongH" => Ok(Self::strong_h(400, 100, seed)),
            "null_h" | "nullH" => Ok(Self::null_h(400, 100, seed)),
            "anatomy" => Ok(Self::anatomy(60, 20, seed)),
            other => Err(Error::InvalidScenario(format!(
                "unknown preset {other:?}; expected strong_h, null_h or anatomy"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: String,
    pub stratum: String,
    /// Population slope plus the stratum shift, per dimension.
    pub beta_bar: Vec<f64>,
    pub h_g: Vec<f64>,
    pub h_c: Vec<f64>,
    pub h_i: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationTruth {
    pub subject_id: String,
    pub age: f64,
    pub delta_x: f64,
    /// Realized residual per dimension.
    pub epsilon: Vec<f64>,
}

/// Ground truth of an anatomy-mode simulation.
#[derive(Debug, Clone)]
pub struct AnatomyTruth {
    pub atlas: Atlas,
    pub deformation: DeformationModel,
    /// Atlas-to-subject baseline fields, subject order.
    pub baseline_fields: Vec<DisplacementField>,
    /// Atlas-to-subject follow-up fields, observation order.
    pub followup_fields: Vec<DisplacementField>,
    /// PCA coefficients of one unit of ventricle expansion.
    pub expansion_direction: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimTruth {
    pub seed: u64,
    pub kernel_params: KernelParams,
    pub beta_bar: Vec<f64>,
    pub theta: Vec<VarianceComponents>,
    /// Canonical (id) order, matching the cohort.
    pub subjects: Vec<SubjectTruth>,
    /// Canonical (id, age) order, matching the cohort.
    pub observations: Vec<ObservationTruth>,
    pub test_ids: Vec<String>,
    #[serde(skip)]
    pub anatomy: Option<AnatomyTruth>,
}

impl SimTruth {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("truth serializes");
        s.push('\n');
        s
    }
}

/// Residual `Δy − Δx β̄ − Δx (h_G + h_C + h_I)`, evaluated in a fixed order.
pub fn residual(dy: f64, dx: f64, beta: f64, h: [f64; 3]) -> f64 {
    dy - dx * beta - dx * (h[0] + h[1] + h[2])
}

/// Draw of N(0, τ² K) via the Cholesky factor of `τ² K + jitter I`.
pub fn sample_gp(rng: &mut ChaCha8Rng, k: &DMatrix<f64>, tau2: f64) -> Result<Vec<f64>> {
    let n = k.nrows();
    if tau2 == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let cov = k * tau2 + DMatrix::identity(n, n) * SAMPLING_JITTER;
    let chol = Cholesky::new(cov).ok_or_else(|| {
        Error::InvalidScenario("kernel covariance is not positive definite".into())
    })?;
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((chol.l() * z).iter().copied().collect())
}

struct Draft {
    id: String,
    stratum: usize,
    baseline_age: f64,
    genotype: Vec<u8>,
    clinical: Vec<f64>,
}

fn draft_subjects(sc: &SimScenario, rng: &mut ChaCha8Rng) -> Result<Vec<Draft>> {
    let mut ids: Vec<(String, usize)> = Vec::new();
    for (k, s) in sc.strata().iter().enumerate() {
        for i in 0..s.count {
            ids.push((format!("{}-{i:04}", s.name), k));
        }
    }
    ids.sort();
    let binomials = sc
        .maf
        .iter()
        .map(|&p| Binomial::new(2, p).map_err(|e| Error::InvalidScenario(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    Ok(ids
        .into_iter()
        .map(|(id, stratum)| {
            let age_noise: f64 = rng.sample(StandardNormal);
            let baseline_age = (sc.baseline_age_mean + sc.baseline_age_sd * age_noise).max(1.0);
            let genotype = binomials.iter().map(|b| b.sample(rng) as u8).collect();
            let clinical = (0..sc.clinical).map(|_| rng.sample(StandardNormal)).collect();
            Draft {
                id,
                stratum,
                baseline_age,
                genotype,
                clinical,
            }
        })
        .collect())
}

pub fn simulate(sc: &SimScenario) -> Result<(Cohort, SimTruth)> {
    sc.validate()?;
    match sc.mode {
        SimMode::Scalar => simulate_scalar(sc),
        SimMode::Anatomy2d => simulate_anatomy(sc),
    }
}

struct Layer<'a> {
    features: Vec<Vec<f64>>,
    baseline: Vec<Vec<f64>>,
    beta_bar: Vec<f64>,
    /// Per stratum, per dimension.
    shifts: Vec<Vec<f64>>,
    theta: Vec<VarianceComponents>,
    drafts: &'a [Draft],
}

/// Samples h and the follow-up observations shared by both modes.
fn generate(
    sc: &SimScenario,
    rng: &mut ChaCha8Rng,
    layer: Layer<'_>,
) -> Result<(Cohort, SimTruth, Vec<Vec<f64>>)> {
    let m = layer.beta_bar.len();
    let subjects: Vec<Subject> = layer
        .drafts
        .iter()
        .zip(layer.features.iter().zip(&layer.baseline))
        .map(|(d, (f, y))| Subject {
            id: d.id.clone(),
            baseline_age: d.baseline_age,
            genotype: d.genotype.clone(),
            clinical: d.clinical.clone(),
            features: f.clone(),
            baseline_phenotype: y.clone(),
        })
        .collect();
    let weights = sc
        .clinical_weights
        .clone()
        .unwrap_or_else(|| vec![1.0; sc.clinical]);
    let params = kernel_params_with_weights(&subjects, &weights)
        .map_err(|e| Error::InvalidScenario(format!("kernel setup: {e}")))?;
    let gram = gram_set_for_subjects(&subjects, &params)?;
    let mats = gram.matrices();

    let n = subjects.len();
    let mut h = vec![[vec![0.0; m], vec![0.0; m], vec![0.0; m]]; n];
    for d in 0..m {
        let taus = layer.theta[d].taus();
        for k in 0..3 {
            let draw = sample_gp(rng, mats[k], taus[k])?;
            for (hi, v) in h.iter_mut().zip(draw) {
                hi[k][d] = v;
            }
        }
    }

    let strata = sc.strata();
    let mut observations = Vec::new();
    let mut obs_truth = Vec::new();
    let mut subject_truth = Vec::new();
    let mut followups = sc.followups.clone();
    followups.sort_by(f64::total_cmp);
    let mut targets = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        let shift = &layer.shifts[layer.drafts[i].stratum];
        let beta: Vec<f64> = (0..m).map(|d| layer.beta_bar[d] + shift[d]).collect();
        for &t in &followups {
            let age = s.baseline_age + t;
            let dx = age - s.baseline_age;
            let mut phen = Vec::with_capacity(m);
            let mut eps = Vec::with_capacity(m);
            let mut target = Vec::with_capacity(m);
            for d in 0..m {
                let noise: f64 = rng.sample(StandardNormal);
                let hd = [h[i][0][d], h[i][1][d], h[i][2][d]];
                let signal = dx * beta[d] + dx * (hd[0] + hd[1] + hd[2]);
                let y = s.baseline_phenotype[d] + signal + layer.theta[d].sigma2.sqrt() * noise;
                let dy = y - s.baseline_phenotype[d];
                eps.push(residual(dy, dx, beta[d], hd));
                phen.push(y);
                target.push(y);
            }
            targets.push(target);
            observations.push(Observation {
                subject_id: s.id.clone(),
                age,
                phenotype: phen,
            });
            obs_truth.push(ObservationTruth {
                subject_id: s.id.clone(),
                age,
                delta_x: dx,
                epsilon: eps,
            });
        }
        subject_truth.push(SubjectTruth {
            id: s.id.clone(),
            stratum: strata[layer.drafts[i].stratum].name.clone(),
            beta_bar: beta,
            h_g: h[i][0].clone(),
            h_c: h[i][1].clone(),
            h_i: h[i][2].clone(),
        });
    }
    let cohort = Cohort::new(subjects, observations)?;
    let test_ids = cohort.subjects()[n - sc.n_test..]
        .iter()
        .map(|s| s.id.clone())
        .collect();
    let truth = SimTruth {
        seed: sc.seed,
        kernel_params: params,
        beta_bar: layer.beta_bar,
        theta: layer.theta,
        subjects: subject_truth,
        observations: obs_truth,
        test_ids,
        anatomy: None,
    };
    Ok((cohort, truth, targets))
}

fn simulate_scalar(sc: &SimScenario) -> Result<(Cohort, SimTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let drafts = draft_subjects(sc, &mut rng)?;
    let m = sc.phenotypes;
    let features = drafts
        .iter()
        .map(|_| (0..sc.features).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let baseline = drafts
        .iter()
        .map(|_| {
            (0..m)
                .map(|d| sc.baseline_mean[d] + sc.baseline_sd * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let shifts = sc
        .strata()
        .iter()
        .map(|s| {
            if s.beta_shift.is_empty() {
                vec![0.0; m]
            } else {
                s.beta_shift.clone()
            }
        })
        .collect();
    let layer = Layer {
        features,
        baseline,
        beta_bar: sc.beta_bar.clone(),
        shifts,
        theta: (0..m).map(|d| sc.theta_for(d)).collect(),
        drafts: &drafts,
    };
    let (cohort, truth, _) = generate(sc, &mut rng, layer)?;
    Ok((cohort, truth))
}

/// Smooth radial profile of the synthetic atlas: three concentric structures.
fn atlas_radii(grid: usize) -> [f64; 3] {
    let s = grid as f64 / 64.0;
    [9.0 * s, 16.0 * s, 24.0 * s]
}

fn center(grid: usize) -> f64 {
    (grid as f64 - 1.0) / 2.0
}

/// Concentric atlas: ventricle, hippocampus ring, cortex ring, background.
pub fn make_atlas(grid: usize) -> Result<Atlas> {
    let g = Grid2D::new(grid, grid)?;
    let c = center(grid);
    let [r1, r2, r3] = atlas_radii(grid);
    let logistic = |x: f64| 1.0 / (1.0 + (-x / 1.5).exp());
    let mut labels = Vec::with_capacity(g.len());
    let mut intensity = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        let (x, y) = g.coords(i);
        let r = (x - c).hypot(y - c);
        labels.push(if r < r1 {
            LABEL_VENTRICLE
        } else if r < r2 {
            LABEL_HIPPOCAMPUS
        } else if r < r3 {
            LABEL_CORTEX
        } else {
            LABEL_BACKGROUND
        });
        // dark ventricle, bright ring, mid cortex, dark background
        let v = 0.15 + 0.55 * logistic(r - r1) - 0.2 * logistic(r - r2) - 0.35 * logistic(r - r3);
        intensity.push(v);
    }
    Atlas::new(
        Image {
            grid: g,
            data: intensity,
        },
        LabelMap { grid: g, data: labels },
    )
}

/// Smooth shape modes, each vanishing well inside the grid border:
/// ventricle expansion, anisotropic stretch, rotation, lateral shift.
/// The patterns are mutually orthogonal on every ring-shaped label and each
/// carries a sizeable share of every label's energy, so per-label PCA keeps
/// all of them.
pub fn shape_modes(grid: usize) -> Result<[DisplacementField; N_MODES]> {
    let g = Grid2D::new(grid, grid)?;
    let c = center(grid);
    let s = grid as f64 / 64.0;
    let bump = |r: f64, width: f64| (-(r / (width * s)).powi(2)).exp();
    let ventricle = DisplacementField::from_fn(g, |x, y| {
        let (dx, dy) = (x - c, y - c);
        let w = 0.12 * bump(dx.hypot(dy), 16.0);
        [-dx * w, -dy * w]
    });
    let stretch = DisplacementField::from_fn(g, |x, y| {
        let (dx, dy) = (x - c, y - c);
        let w = 0.06 * bump(dx.hypot(dy), 20.0);
        [dx * w, -dy * w]
    });
    let rotation = DisplacementField::from_fn(g, |x, y| {
        let (dx, dy) = (x - c, y - c);
        let w = 0.06 * bump(dx.hypot(dy), 20.0);
        [-dy * w, dx * w]
    });
    let shift = DisplacementField::from_fn(g, |x, y| {
        let (dx, dy) = (x - c, y - c);
        [0.6 * s * bump(dx.hypot(dy), 22.0), 0.0]
    });
    Ok([ventricle, stretch, rotation, shift])
}

fn combine(modes: &[DisplacementField], z: &[f64]) -> DisplacementField {
    let g = modes[0].grid;
    let mut out = DisplacementField::zeros(g);
    for (mode, &zk) in modes.iter().zip(z) {
        for (o, v) in out.data.iter_mut().zip(&mode.data) {
            o[0] += zk * v[0];
            o[1] += zk * v[1];
        }
    }
    out
}

/// Atlas plus per-subject baseline fields `Σ_k z_k B_k`, z_k ~ N(0, sd_k²).
pub fn make_anatomy_atlas(
    spec: &AnatomySpec,
    n_subjects: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Atlas, Vec<DisplacementField>)> {
    let atlas = make_atlas(spec.grid)?;
    let modes = shape_modes(spec.grid)?;
    let fields = (0..n_subjects)
        .map(|_| {
            let z: Vec<f64> = spec
                .mode_sd
                .iter()
                .map(|sd| sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            combine(&modes, &z)
        })
        .collect();
    Ok((atlas, fields))
}

fn simulate_anatomy(sc: &SimScenario) -> Result<(Cohort, SimTruth)> {
    let spec = sc.anatomy.as_ref().expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let drafts = draft_subjects(sc, &mut rng)?;
    let (atlas, baseline_fields) = make_anatomy_atlas(spec, drafts.len(), &mut rng)?;
    let deformation = fit_pca(&baseline_fields, &atlas)?;
    let m = deformation.n_components();
    if m == 0 {
        return Err(Error::InvalidScenario(
            "baseline fields have no variance; raise mode_sd".into(),
        ));
    }
    let baseline: Vec<Vec<f64>> = baseline_fields
        .iter()
        .map(|f| encode(f, &deformation))
        .collect::<Result<_>>()?;
    let modes = shape_modes(spec.grid)?;
    let origin = encode(&DisplacementField::zeros(atlas.grid()), &deformation)?;
    let expansion_direction: Vec<f64> = encode(&modes[0], &deformation)?
        .iter()
        .zip(&origin)
        .map(|(a, b)| a - b)
        .collect();
    let beta_bar: Vec<f64> = expansion_direction
        .iter()
        .map(|d| spec.expansion_rate * d)
        .collect();
    let shifts = sc
        .strata()
        .iter()
        .map(|s| expansion_direction.iter().map(|d| s.expansion_shift * d).collect())
        .collect();
    let layer = Layer {
        features: baseline.clone(),
        baseline,
        beta_bar,
        shifts,
        theta: vec![spec.theta; m],
        drafts: &drafts,
    };
    let (cohort, mut truth, targets) = generate(sc, &mut rng, layer)?;
    let followup_fields = targets
        .iter()
        .map(|y| crate::deformation::decode(y, &deformation))
        .collect::<Result<Vec<_>>>()?;
    for (k, f) in followup_fields.iter().enumerate() {
        let (_, residual) = invert_with_residual(f);
        if residual > INVERT_FAIL {
            return Err(Error::InvalidScenario(format!(
                "follow-up field {k} is not invertible (residual {residual:.3}); reduce the rates"
            )));
        }
    }
    truth.anatomy = Some(AnatomyTruth {
        atlas,
        deformation,
        baseline_fields,
        followup_fields,
        expansion_direction,
    });
    Ok((cohort, truth))
}

impl AnatomyTruth {
    pub fn baseline_labels(&self, subject: usize) -> Result<LabelMap> {
        warp_labels(&self.atlas.labels, &self.baseline_fields[subject])
    }

    pub fn baseline_image(&self, subject: usize) -> Result<Image> {
        warp_image(&self.atlas.image, &self.baseline_fields[subject])
    }

    pub fn followup_labels(&self, observation: usize) -> Result<LabelMap> {
        warp_labels(&self.atlas.labels, &self.followup_fields[observation])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SimScenario {
        let mut s = SimScenario::strong_h(30, 5, seed);
        s.loci = 8;
        s.maf = vec![0.3; 8];
        s
    }

    #[test]
    fn scenario_json_round_trip_and_presets() {
        let s = small(3);
        let back = SimScenario::from_json(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(s, back);
        for p in ["strong_h", "null_h", "anatomy"] {
            SimScenario::preset(p, 1).unwrap().validate().unwrap();
        }
        let strong = SimScenario::strong_h(10, 0, 1);
        let t = strong.theta_for(0);
        assert!(t.taus().iter().all(|&tau| tau >= t.sigma2));
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut s = small(1);
        s.maf[0] = 0.7;
        assert!(matches!(simulate(&s), Err(Error::InvalidScenario(_))));
        let mut s = small(1);
        s.n_test = 30;
        assert!(matches!(simulate(&s), Err(Error::InvalidScenario(_))));
        let mut s = small(1);
        s.theta = vec![VarianceComponents::new(0.0, 0.0, 0.0, 0.0)];
        assert!(matches!(simulate(&s), Err(Error::InvalidScenario(_))));
    }

    #[test]
    fn residual_identity_is_exact() {
        let (c, truth) = simulate(&small(5)).unwrap();
        let d = c.deltas();
        for (k, &i) in c.incidence().iter().enumerate() {
            let st = &truth.subjects[i];
            assert_eq!(st.id, c.subjects()[i].id);
            let ot = &truth.observations[k];
            assert_eq!(ot.delta_x, d.dx[k]);
            let h = [st.h_g[0], st.h_c[0], st.h_i[0]];
            let e = residual(d.dy[(k, 0)], d.dx[k], st.beta_bar[0], h);
            assert_eq!(e.to_bits(), ot.epsilon[0].to_bits());
        }
    }

    #[test]
    fn noiseless_population_model() {
        let mut s = small(6);
        s.theta = vec![VarianceComponents::new(0.0, 0.0, 0.0, 1e-12)];
        let (c, _) = simulate(&s).unwrap();
        let d = c.deltas();
        for k in 0..d.dx.len() {
            assert!((d.dy[(k, 0)] - d.dx[k] * s.beta_bar[0]).abs() < 1e-5);
        }
    }

    #[test]
    fn same_seed_same_files() {
        let (a, ta) = simulate(&small(9)).unwrap();
        let (b, tb) = simulate(&small(9)).unwrap();
        assert_eq!(a.subjects_csv(), b.subjects_csv());
        assert_eq!(a.observations_csv(), b.observations_csv());
        assert_eq!(ta.to_json(), tb.to_json());
        let (c, _) = simulate(&small(10)).unwrap();
        assert_ne!(a.observations_csv(), c.observations_csv());
    }

    #[test]
    fn gp_draw_covariance_matches_kernel() {
        let (c, truth) = simulate(&small(11)).unwrap();
        let subjects = &c.subjects()[..5];
        let k = gram_set_for_subjects(subjects, &truth.kernel_params).unwrap().genetic;
        let tau2 = 0.7;
        let reps = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut acc = DMatrix::<f64>::zeros(5, 5);
        for _ in 0..reps {
            let h = DVector::from_vec(sample_gp(&mut rng, &k, tau2).unwrap());
            acc += &h * h.transpose();
        }
        acc /= reps as f64;
        for i in 0..5 {
            for j in 0..5 {
                let want = tau2 * k[(i, j)];
                assert!((acc[(i, j)] - want).abs() <= 0.1 * want, "{i},{j}: {} vs {want}", acc[(i, j)]);
            }
        }
    }

    #[test]
    fn atlas_labels_cover_grid() {
        let a = make_atlas(64).unwrap();
        assert_eq!(a.labels.data.len(), 64 * 64);
        assert_eq!(a.labels.labels(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn ventricle_grows_with_expansion_mode() {
        let a = make_atlas(64).unwrap();
        let modes = shape_modes(64).unwrap();
        let mut last = 0;
        for z in [-2.0, -1.0, 0.0, 1.0, 2.0, 3.0] {
            let f = combine(&modes[..1], &[z]);
            assert!(invert_with_residual(&f).1 < 0.1);
            let count = warp_labels(&a.labels, &f).unwrap().count(LABEL_VENTRICLE);
            assert!(count > last, "z = {z}: {count} <= {last}");
            last = count;
        }
    }

    #[test]
    fn anatomy_simulation_is_consistent() {
        let mut s = SimScenario::anatomy(12, 6, 4);
        s.anatomy.as_mut().unwrap().grid = 32;
        let (c, truth) = simulate(&s).unwrap();
        let an = truth.anatomy.as_ref().unwrap();
        let m = an.deformation.n_components();
        assert_eq!(c.dims().phenotypes, m);
        assert_eq!(c.dims().features, m);
        for (i, subj) in c.subjects().iter().enumerate() {
            assert_eq!(subj.features, subj.baseline_phenotype);
            let y = encode(&an.baseline_fields[i], &an.deformation).unwrap();
            assert_eq!(y, subj.baseline_phenotype);
        }
        assert_eq!(an.followup_fields.len(), c.n_observations());
        for ex in &an.deformation.labels {
            assert!(ex.explained_variance_ratio >= 0.95);
        }
    }
}
