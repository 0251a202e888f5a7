//! Maximum-likelihood fitting of the population slope and the variance
//! components of the stacked longitudinal model
//!
//! ```text
//! Δy = Δx β̄ + Δx ⊙ Z (h_G + h_C + h_I) + ε,   h_D ~ N(0, τ²_D K_D),   ε ~ N(0, σ² I)
//! ```
//!
//! so that `Δy ~ N(Δx β̄, V)` with `V = Σ_D τ²_D U K_D Uᵀ + σ² I` and
//! `U = diag(Δx) Z` (n observations × N subjects).
//!
//! The columns of `U` have disjoint support, so `U = Ũ S^{1/2}` with `Ũ`
//! orthonormal and `S = UᵀU` diagonal. Writing `A = σ² I + Σ_D τ²_D S^{1/2} K_D S^{1/2}`,
//!
//! ```text
//! V⁻¹   = Ũ A⁻¹ Ũᵀ + σ⁻² (I − Ũ Ũᵀ)
//! ln|V| = ln|A| + (n − N) ln σ²
//! ```
//!
//! which lets every likelihood, score and information evaluation run on
//! subject-sized (N × N) matrices instead of observation-sized ones.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::cohort::{Cohort, Dims, Subject};
use crate::deformation::DeformationModel;
use crate::error::{Error, Result};
use crate::kernels::{GramSet, KernelParams};

pub const MODEL_SCHEMA: &str = "longipred-model/1";

/// θ = (τ²_G, τ²_C, τ²_I, σ²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub tau2_g: f64,
    pub tau2_c: f64,
    pub tau2_i: f64,
    pub sigma2: f64,
}

impl VarianceComponents {
    pub fn new(tau2_g: f64, tau2_c: f64, tau2_i: f64, sigma2: f64) -> Self {
        Self {
            tau2_g,
            tau2_c,
            tau2_i,
            sigma2,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.tau2_g, self.tau2_c, self.tau2_i, self.sigma2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn taus(&self) -> [f64; 3] {
        [self.tau2_g, self.tau2_c, self.tau2_i]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("variance components {a:?}")));
        }
        if self.taus().iter().any(|&t| t < 0.0) {
            return Err(Error::NonPositiveVariance(format!(
                "kernel variances must be >= 0, got {a:?}"
            )));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::NonPositiveVariance(format!(
                "sigma2 must be > 0, got {}",
                self.sigma2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Converged when the projected score's max-norm falls below `score_tol * n`.
    pub score_tol: f64,
    /// Converged when a full Fisher step changes ℓ by less than this, relatively.
    pub rel_loglik_tol: f64,
    pub max_iter: usize,
    /// Restricted likelihood instead of plain ML (extension; off by default).
    pub reml: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            score_tol: 1e-6,
            rel_loglik_tol: 1e-10,
            max_iter: 200,
            reml: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ScoreTolerance,
    LikelihoodTolerance,
    /// No step length increased the likelihood any further.
    StepStalled,
    MaxIterations,
}

/// Fit of one phenotype dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionFit {
    pub beta_bar: f64,
    /// Slope of the population-only model (τ² pinned to 0, i.e. OLS).
    pub beta_bar_population: f64,
    pub theta: VarianceComponents,
    pub alpha_g: Vec<f64>,
    pub alpha_c: Vec<f64>,
    pub alpha_i: Vec<f64>,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub score_max_abs: f64,
}

impl DimensionFit {
    pub fn alphas(&self) -> [&[f64]; 3] {
        [&self.alpha_g, &self.alpha_c, &self.alpha_i]
    }
}

/// Kernel inputs of one training subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSubject {
    pub id: String,
    pub genotype: Vec<u8>,
    pub clinical: Vec<f64>,
    pub features: Vec<f64>,
}

impl From<&Subject> for BankSubject {
    fn from(s: &Subject) -> Self {
        Self {
            id: s.id.clone(),
            genotype: s.genotype.clone(),
            clinical: s.clinical.clone(),
            features: s.features.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub schema: String,
    pub dims: Dims,
    pub kernel_params: KernelParams,
    pub bank: Vec<BankSubject>,
    pub fits: Vec<DimensionFit>,
    pub max_training_delta_x: f64,
    pub options: FitOptions,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deformation: Option<DeformationModel>,
}

impl FittedModel {
    pub fn ensure_converged(&self) -> Result<()> {
        if self.converged {
            return Ok(());
        }
        let dims: Vec<usize> = self
            .fits
            .iter()
            .enumerate()
            .filter(|(_, f)| !f.converged)
            .map(|(d, _)| d)
            .collect();
        Err(Error::NotConverged(format!(
            "phenotype dimensions {dims:?} hit the iteration limit"
        )))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: FittedModel =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if model.schema != MODEL_SCHEMA {
            return Err(Error::Config(format!(
                "{}: unsupported model schema {:?}, expected {MODEL_SCHEMA:?}",
                path.display(),
                model.schema
            )));
        }
        Ok(model)
    }
}

/// Observation layout and kernels projected onto the subject space.
struct Design {
    n: usize,
    n_subjects: usize,
    /// Subjects with at least one nonzero Δx, in subject order.
    active: Vec<usize>,
    /// Per observation: index into `active`, or None when the subject is inactive.
    obs_active: Vec<Option<usize>>,
    dx: Vec<f64>,
    sqrt_s: DVector<f64>,
    /// S^{1/2} K_D S^{1/2} restricted to active subjects.
    kernels: [DMatrix<f64>; 3],
}

impl Design {
    fn new(cohort: &Cohort, gram: &GramSet) -> Result<Self> {
        let n_subjects = cohort.n_subjects();
        if gram.n() != n_subjects {
            return Err(Error::DimensionMismatch(format!(
                "Gram matrices are {}x{} but the cohort has {} subjects",
                gram.n(),
                gram.n(),
                n_subjects
            )));
        }
        let deltas = cohort.deltas();
        let dx: Vec<f64> = deltas.dx.iter().copied().collect();
        let mut s = vec![0.0; n_subjects];
        for (k, &i) in cohort.incidence().iter().enumerate() {
            s[i] += dx[k] * dx[k];
        }
        let active: Vec<usize> = (0..n_subjects).filter(|&i| s[i] > 0.0).collect();
        if active.is_empty() {
            return Err(Error::DegenerateDesign(
                "every observation has Δx = 0; no trend is identifiable".into(),
            ));
        }
        let mut pos = vec![None; n_subjects];
        for (a, &i) in active.iter().enumerate() {
            pos[i] = Some(a);
        }
        let obs_active = cohort.incidence().iter().map(|&i| pos[i]).collect();
        let sqrt_s = DVector::from_iterator(active.len(), active.iter().map(|&i| s[i].sqrt()));
        let na = active.len();
        let kernels = gram.matrices().map(|k| {
            DMatrix::from_fn(na, na, |a, b| {
                sqrt_s[a] * k[(active[a], active[b])] * sqrt_s[b]
            })
        });
        Ok(Self {
            n: dx.len(),
            n_subjects,
            active,
            obs_active,
            dx,
            sqrt_s,
            kernels,
        })
    }

    fn na(&self) -> usize {
        self.active.len()
    }

    /// Returns (Ũᵀ v, ‖v − Ũ Ũᵀ v‖²).
    fn split(&self, v: &DVector<f64>) -> (DVector<f64>, f64) {
        let mut reduced = DVector::zeros(self.na());
        for k in 0..self.n {
            if let Some(a) = self.obs_active[k] {
                reduced[a] += self.dx[k] * v[k] / self.sqrt_s[a];
            }
        }
        let mut perp = 0.0;
        for k in 0..self.n {
            let along = match self.obs_active[k] {
                Some(a) => self.dx[k] * reduced[a] / self.sqrt_s[a],
                None => 0.0,
            };
            perp += (v[k] - along).powi(2);
        }
        (reduced, perp)
    }

    fn dx_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.dx)
    }
}

/// Likelihood state at one θ.
struct Evaluation {
    loglik: f64,
    beta: f64,
    sigma2: f64,
    /// A⁻¹ r̃
    u: DVector<f64>,
    /// ‖r − Ũ r̃‖²
    perp_sq: f64,
    /// Trace operator: A⁻¹ for ML, the projected A⁻¹ − w wᵀ / c for REML.
    trace_op: DMatrix<f64>,
}

enum Slope {
    Fixed(f64),
    Gls,
}

fn evaluate(
    design: &Design,
    y: &DVector<f64>,
    theta: &VarianceComponents,
    slope: Slope,
    reml: bool,
) -> Result<Evaluation> {
    let na = design.na();
    let sigma2 = theta.sigma2;
    let mut a = DMatrix::from_diagonal_element(na, na, sigma2);
    for (tau, k) in theta.taus().iter().zip(&design.kernels) {
        if *tau != 0.0 {
            a += k * *tau;
        }
    }
    let chol = Cholesky::new(a).ok_or_else(|| {
        Error::SingularV(format!("marginal covariance not positive definite at {theta:?}"))
    })?;
    let logdet_a: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let a_inv = chol.inverse();

    let x_tilde = &design.sqrt_s;
    let w = &a_inv * x_tilde;
    let xvx = x_tilde.dot(&w);
    let (y_tilde, _) = design.split(y);
    let beta = match slope {
        Slope::Fixed(b) => b,
        Slope::Gls => {
            if !(xvx > 0.0) || !xvx.is_finite() {
                return Err(Error::DegenerateDesign("ΔxᵀV⁻¹Δx is not positive".into()));
            }
            w.dot(&y_tilde) / xvx
        }
    };
    let r = y - design.dx_vector() * beta;
    let (r_tilde, perp_sq) = design.split(&r);
    let u = &a_inv * &r_tilde;
    let n = design.n as f64;
    let complement = (design.n - na) as f64;
    let quad = r_tilde.dot(&u) + perp_sq / sigma2;
    let logdet_v = logdet_a + complement * sigma2.ln();

    let (loglik, trace_op) = if reml {
        let ll = -0.5 * ((n - 1.0) * (2.0 * PI).ln() + logdet_v + xvx.ln() + quad);
        let p = &a_inv - (&w * w.transpose()) / xvx;
        (ll, p)
    } else {
        (-0.5 * (n * (2.0 * PI).ln() + logdet_v + quad), a_inv)
    };
    if !loglik.is_finite() {
        return Err(Error::SingularV(format!("non-finite log-likelihood at {theta:?}")));
    }
    Ok(Evaluation {
        loglik,
        beta,
        sigma2,
        u,
        perp_sq,
        trace_op,
    })
}

/// tr(X Y) for square matrices without forming the product.
fn trace_of_product(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let mut t = 0.0;
    for i in 0..n {
        for j in 0..n {
            t += x[(i, j)] * y[(j, i)];
        }
    }
    t
}

fn score_and_information(design: &Design, ev: &Evaluation) -> (Vector4<f64>, Matrix4<f64>) {
    let complement = (design.n - design.na()) as f64;
    let s2 = ev.sigma2;
    let r = &ev.trace_op;
    let rk: Vec<DMatrix<f64>> = design.kernels.iter().map(|k| r * k).collect();

    let mut score = Vector4::zeros();
    let mut info = Matrix4::zeros();
    for d in 0..3 {
        let quad = ev.u.dot(&(&design.kernels[d] * &ev.u));
        score[d] = 0.5 * (quad - rk[d].trace());
        for e in d..3 {
            let v = 0.5 * trace_of_product(&rk[d], &rk[e]);
            info[(d, e)] = v;
            info[(e, d)] = v;
        }
        let v = 0.5 * trace_of_product(r, &rk[d]);
        info[(d, 3)] = v;
        info[(3, d)] = v;
    }
    score[3] = 0.5
        * (ev.u.norm_squared() + ev.perp_sq / (s2 * s2) - r.trace() - complement / s2);
    info[(3, 3)] = 0.5 * (r.norm_squared() + complement / (s2 * s2));
    (score, info)
}

fn dimension_column(cohort: &Cohort, dim: usize) -> Result<DVector<f64>> {
    let m = cohort.dims().phenotypes;
    if dim >= m {
        return Err(Error::DimensionMismatch(format!(
            "phenotype dimension {dim} out of range (M = {m})"
        )));
    }
    Ok(cohort.deltas().dy.column(dim).into_owned())
}

/// Gaussian log-density of Δy[:, dim] under N(Δx β̄, V(θ)).
pub fn log_likelihood(
    cohort: &Cohort,
    gram: &GramSet,
    beta_bar: f64,
    theta: &VarianceComponents,
    dim: usize,
) -> Result<f64> {
    theta.validate()?;
    let design = Design::new(cohort, gram)?;
    let y = dimension_column(cohort, dim)?;
    Ok(evaluate(&design, &y, theta, Slope::Fixed(beta_bar), false)?.loglik)
}

/// Score ∂ℓ/∂θ and expected information ½ tr(V⁻¹V_kV⁻¹V_l), θ ordered (τ²_G, τ²_C, τ²_I, σ²).
pub fn score_and_fisher(
    cohort: &Cohort,
    gram: &GramSet,
    beta_bar: f64,
    theta: &VarianceComponents,
    dim: usize,
) -> Result<(Vector4<f64>, Matrix4<f64>)> {
    theta.validate()?;
    let design = Design::new(cohort, gram)?;
    let y = dimension_column(cohort, dim)?;
    let ev = evaluate(&design, &y, theta, Slope::Fixed(beta_bar), false)?;
    Ok(score_and_information(&design, &ev))
}

/// Generalized least-squares slope (ΔxᵀV⁻¹Δx)⁻¹ΔxᵀV⁻¹Δy at θ.
pub fn gls_slope(
    cohort: &Cohort,
    gram: &GramSet,
    theta: &VarianceComponents,
    dim: usize,
) -> Result<f64> {
    theta.validate()?;
    let design = Design::new(cohort, gram)?;
    let y = dimension_column(cohort, dim)?;
    Ok(evaluate(&design, &y, theta, Slope::Gls, false)?.beta)
}

/// Dense marginal covariance V (n × n). Only sensible for small cohorts.
pub fn marginal_covariance(
    cohort: &Cohort,
    gram: &GramSet,
    theta: &VarianceComponents,
) -> DMatrix<f64> {
    let dx = cohort.deltas().dx;
    let inc = cohort.incidence();
    let n = dx.len();
    let mats = gram.matrices();
    let taus = theta.taus();
    DMatrix::from_fn(n, n, |a, b| {
        let k: f64 = (0..3)
            .map(|d| taus[d] * mats[d][(inc[a], inc[b])])
            .sum();
        dx[a] * dx[b] * k + if a == b { theta.sigma2 } else { 0.0 }
    })
}

fn solve_free(info: &Matrix4<f64>, score: &Vector4<f64>, free: &[usize]) -> Vector4<f64> {
    let f = free.len();
    let mut step = Vector4::zeros();
    if f == 0 {
        return step;
    }
    let sub = DMatrix::from_fn(f, f, |i, j| info[(free[i], free[j])]);
    let rhs = DVector::from_fn(f, |i, _| score[free[i]]);
    let scale = (0..f).map(|i| sub[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut ridge = 0.0;
    for _ in 0..20 {
        let m = &sub + DMatrix::identity(f, f) * ridge;
        if let Some(ch) = Cholesky::new(m) {
            let x = ch.solve(&rhs);
            if x.iter().all(|v| v.is_finite()) {
                for (i, &k) in free.iter().enumerate() {
                    step[k] = x[i];
                }
                return step;
            }
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 10.0 };
    }
    // information numerically useless; fall back to a scaled gradient step
    for &k in free {
        step[k] = score[k] / scale;
    }
    step
}

fn population_slope(dx: &[f64], y: &DVector<f64>) -> f64 {
    let sxx: f64 = dx.iter().map(|x| x * x).sum();
    let sxy: f64 = dx.iter().zip(y.iter()).map(|(x, y)| x * y).sum();
    sxy / sxx
}

fn fit_dimension(design: &Design, y: &DVector<f64>, opts: &FitOptions) -> Result<DimensionFit> {
    let n = design.n;
    let mean_y = y.mean();
    let var_y = y.iter().map(|v| (v - mean_y).powi(2)).sum::<f64>() / n as f64;
    let sigma2_floor = if var_y > 0.0 { 1e-8 * var_y } else { 1e-12 };

    let beta_pop = population_slope(&design.dx, y);
    let resid: Vec<f64> = design
        .dx
        .iter()
        .zip(y.iter())
        .map(|(x, y)| y - x * beta_pop)
        .collect();
    let rm = resid.iter().sum::<f64>() / n as f64;
    let mut rvar = resid.iter().map(|r| (r - rm).powi(2)).sum::<f64>() / n as f64;
    if !(rvar > 0.0) {
        rvar = 1.0;
    }
    let lower = [0.0, 0.0, 0.0, sigma2_floor];
    let project = |t: Vector4<f64>| -> Vector4<f64> {
        Vector4::from_fn(|k, _| if t[k] < lower[k] { lower[k] } else { t[k] })
    };

    let mut theta = project(Vector4::new(
        0.5 / 3.0 * rvar,
        0.5 / 3.0 * rvar,
        0.5 / 3.0 * rvar,
        0.5 * rvar,
    ));
    let vc = |t: &Vector4<f64>| VarianceComponents::new(t[0], t[1], t[2], t[3]);
    let mut ev = evaluate(design, y, &vc(&theta), Slope::Gls, opts.reml)?;
    let mut trace = vec![ev.loglik];
    let score_tol = opts.score_tol * n as f64;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    let mut projected_max;

    loop {
        let (score, info) = score_and_information(design, &ev);
        let blocked: Vec<bool> = (0..4)
            .map(|k| theta[k] <= lower[k] && score[k] <= 0.0)
            .collect();
        projected_max = (0..4)
            .filter(|&k| !blocked[k])
            .map(|k| score[k].abs())
            .fold(0.0, f64::max);
        if projected_max < score_tol {
            termination = Termination::ScoreTolerance;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        let free: Vec<usize> = (0..4).filter(|&k| !blocked[k]).collect();
        let delta = solve_free(&info, &score, &free);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let cand = project(theta + delta * step);
            if cand == theta {
                break;
            }
            if let Ok(cev) = evaluate(design, y, &vc(&cand), Slope::Gls, opts.reml) {
                if cev.loglik >= ev.loglik {
                    accepted = Some((cand, cev));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, cev)) = accepted else {
            termination = Termination::StepStalled;
            break;
        };
        let rel = (cev.loglik - ev.loglik) / ev.loglik.abs().max(1.0);
        debug_assert!(cev.loglik >= ev.loglik);
        theta = cand;
        ev = cev;
        trace.push(ev.loglik);
        if step == 1.0 && rel < opts.rel_loglik_tol {
            termination = Termination::LikelihoodTolerance;
            break;
        }
    }

    let theta_vc = vc(&theta);
    let mut alphas = [
        vec![0.0; design.n_subjects],
        vec![0.0; design.n_subjects],
        vec![0.0; design.n_subjects],
    ];
    for (d, tau) in theta_vc.taus().iter().enumerate() {
        for (a, &i) in design.active.iter().enumerate() {
            alphas[d][i] = tau * design.sqrt_s[a] * ev.u[a];
        }
    }
    let [alpha_g, alpha_c, alpha_i] = alphas;
    Ok(DimensionFit {
        beta_bar: ev.beta,
        beta_bar_population: beta_pop,
        theta: theta_vc,
        alpha_g,
        alpha_c,
        alpha_i,
        loglik_trace: trace,
        iterations,
        converged: termination != Termination::MaxIterations,
        termination,
        score_max_abs: projected_max,
    })
}

/// Fits every phenotype dimension independently. A model that hits the
/// iteration limit is still returned, with `converged = false`.
pub fn fit(cohort: &Cohort, gram: &GramSet, opts: &FitOptions) -> Result<FittedModel> {
    let design = Design::new(cohort, gram)?;
    let informative = design.dx.iter().filter(|&&x| x != 0.0).count();
    if informative < 5 {
        return Err(Error::InsufficientData(format!(
            "need at least 5 observations with Δx != 0, found {informative}"
        )));
    }
    let deltas = cohort.deltas();
    let fits = (0..cohort.dims().phenotypes)
        .into_par_iter()
        .map(|d| fit_dimension(&design, &deltas.dy.column(d).into_owned(), opts))
        .collect::<Result<Vec<_>>>()?;
    let converged = fits.iter().all(|f| f.converged);
    Ok(FittedModel {
        schema: MODEL_SCHEMA.to_string(),
        dims: cohort.dims(),
        kernel_params: gram.params.clone(),
        bank: cohort.subjects().iter().map(BankSubject::from).collect(),
        fits,
        max_training_delta_x: deltas.dx.iter().copied().fold(0.0, f64::max),
        options: *opts,
        converged,
        deformation: None,
    })
}
