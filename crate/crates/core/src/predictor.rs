//! Follow-up prediction for new subjects from their baseline record.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohort::Subject;
use crate::error::{Error, Result};
use crate::mixedmodel::{BankSubject, FittedModel};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRequest {
    pub subject: Subject,
    pub target_ages: Vec<f64>,
}

/// Additive pieces of one predicted phenotype dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermBreakdown {
    pub population: f64,
    pub genetic: f64,
    pub clinical: f64,
    pub image: f64,
}

impl TermBreakdown {
    const ZERO: TermBreakdown = TermBreakdown {
        population: 0.0,
        genetic: 0.0,
        clinical: 0.0,
        image: 0.0,
    };

    /// `y_b + population + genetic + clinical + image`, always in this order.
    pub fn apply(&self, baseline: f64) -> f64 {
        baseline + self.population + self.genetic + self.clinical + self.image
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedPoint {
    pub age: f64,
    pub delta_x: f64,
    pub y_hat: Vec<f64>,
    pub terms: Vec<TermBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub baseline: Vec<f64>,
    pub points: Vec<PredictedPoint>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PredictOptions {
    pub allow_unconverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    Population,
    Carry,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Full, Method::Population, Method::Carry];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Population => "pop",
            Method::Carry => "carry",
        }
    }

    /// Parses a comma-separated list such as `full,pop,carry`, keeping the
    /// first occurrence of each method.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m: Method = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("empty method list".into()));
        }
        Ok(out)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Method::Full),
            "pop" | "population" => Ok(Method::Population),
            "carry" | "baseline" => Ok(Method::Carry),
            other => Err(Error::Config(format!(
                "unknown method {other:?}; expected full, pop or carry"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn check_request(model: &FittedModel, req: &PredictionRequest) -> Result<Vec<f64>> {
    let want = model.dims;
    let got = req.subject.dims();
    if got != want {
        return Err(Error::DimensionMismatch(format!(
            "subject {:?} has (S, Q, P, M) = ({}, {}, {}, {}) but the model expects ({}, {}, {}, {})",
            req.subject.id,
            got.loci,
            got.clinical,
            got.features,
            got.phenotypes,
            want.loci,
            want.clinical,
            want.features,
            want.phenotypes
        )));
    }
    req.target_ages
        .iter()
        .map(|&age| {
            let dx = age - req.subject.baseline_age;
            if !dx.is_finite() {
                return Err(Error::NonFiniteValue(format!(
                    "target age {age} for subject {:?}",
                    req.subject.id
                )));
            }
            if dx < 0.0 {
                return Err(Error::InvalidRequest(format!(
                    "target age {age} precedes the baseline age {} of subject {:?}",
                    req.subject.baseline_age, req.subject.id
                )));
            }
            Ok(dx)
        })
        .collect()
}

fn extrapolation_warnings(model: &FittedModel, req: &PredictionRequest, dxs: &[f64]) -> Vec<String> {
    dxs.iter()
        .zip(&req.target_ages)
        .filter(|(&dx, _)| dx > model.max_training_delta_x)
        .map(|(dx, age)| {
            format!(
                "extrapolation: target age {age} is {dx} years after baseline, beyond the largest training interval {}",
                model.max_training_delta_x
            )
        })
        .collect()
}

fn assemble(
    req: &PredictionRequest,
    dxs: &[f64],
    warnings: Vec<String>,
    terms_at: impl Fn(f64) -> Vec<TermBreakdown>,
) -> Prediction {
    let baseline = req.subject.baseline_phenotype.clone();
    let points = dxs
        .iter()
        .zip(&req.target_ages)
        .map(|(&dx, &age)| {
            let terms = terms_at(dx);
            let y_hat = terms
                .iter()
                .zip(&baseline)
                .map(|(t, &yb)| t.apply(yb))
                .collect();
            PredictedPoint {
                age,
                delta_x: dx,
                y_hat,
                terms,
            }
        })
        .collect();
    Prediction {
        subject_id: req.subject.id.clone(),
        baseline,
        points,
        warnings,
    }
}

fn bank_as_subject(b: &BankSubject) -> Subject {
    Subject {
        id: b.id.clone(),
        baseline_age: 0.0,
        genotype: b.genotype.clone(),
        clinical: b.clinical.clone(),
        features: b.features.clone(),
        baseline_phenotype: Vec::new(),
    }
}

/// Kernel values between `subject` and every bank subject, per kernel.
pub fn kernel_row(model: &FittedModel, subject: &Subject) -> Result<[Vec<f64>; 3]> {
    let mut rows = [
        Vec::with_capacity(model.bank.len()),
        Vec::with_capacity(model.bank.len()),
        Vec::with_capacity(model.bank.len()),
    ];
    for b in &model.bank {
        let k = model.kernel_params.kernels(subject, &bank_as_subject(b))?;
        for d in 0..3 {
            rows[d].push(k[d]);
        }
    }
    Ok(rows)
}

/// Full model: `y_t = y_b + Δx (β̄ + Σ_D Σ_j α_{D,j} K_D(new, j))`.
pub fn predict(model: &FittedModel, req: &PredictionRequest, opts: &PredictOptions) -> Result<Prediction> {
    if !opts.allow_unconverged && !model.converged {
        return Err(Error::UnconvergedModel);
    }
    let dxs = check_request(model, req)?;
    let rows = kernel_row(model, &req.subject)?;
    let sums: Vec<[f64; 3]> = model
        .fits
        .iter()
        .map(|f| {
            let alphas = f.alphas();
            std::array::from_fn(|d| {
                rows[d].iter().zip(alphas[d]).map(|(k, a)| k * a).sum()
            })
        })
        .collect();
    let warnings = extrapolation_warnings(model, req, &dxs);
    Ok(assemble(req, &dxs, warnings, |dx| {
        model
            .fits
            .iter()
            .zip(&sums)
            .map(|(f, s)| TermBreakdown {
                population: dx * f.beta_bar,
                genetic: dx * s[0],
                clinical: dx * s[1],
                image: dx * s[2],
            })
            .collect()
    }))
}

/// Population trend only (H = 0), using the OLS slope.
pub fn predict_population_only(
    model: &FittedModel,
    req: &PredictionRequest,
    opts: &PredictOptions,
) -> Result<Prediction> {
    if !opts.allow_unconverged && !model.converged {
        return Err(Error::UnconvergedModel);
    }
    let dxs = check_request(model, req)?;
    let warnings = extrapolation_warnings(model, req, &dxs);
    Ok(assemble(req, &dxs, warnings, |dx| {
        model
            .fits
            .iter()
            .map(|f| TermBreakdown {
                population: dx * f.beta_bar_population,
                ..TermBreakdown::ZERO
            })
            .collect()
    }))
}

/// No change from baseline.
pub fn predict_baseline_carry(req: &PredictionRequest) -> Result<Prediction> {
    let dxs: Vec<f64> = req
        .target_ages
        .iter()
        .map(|&a| {
            let dx = a - req.subject.baseline_age;
            if dx < 0.0 {
                Err(Error::InvalidRequest(format!(
                    "target age {a} precedes the baseline age {} of subject {:?}",
                    req.subject.baseline_age, req.subject.id
                )))
            } else {
                Ok(dx)
            }
        })
        .collect::<Result<_>>()?;
    let m = req.subject.baseline_phenotype.len();
    Ok(assemble(req, &dxs, Vec::new(), |_| vec![TermBreakdown::ZERO; m]))
}

pub fn predict_with(
    method: Method,
    model: &FittedModel,
    req: &PredictionRequest,
    opts: &PredictOptions,
) -> Result<Prediction> {
    match method {
        Method::Full => predict(model, req, opts),
        Method::Population => predict_population_only(model, req, opts),
        Method::Carry => {
            check_request(model, req)?;
            predict_baseline_carry(req)
        }
    }
}

pub const PREDICTIONS_HEADER: &str = "id,x_t,dim,y_hat,term_pop,term_G,term_C,term_I";

/// Long-format CSV, one row per (subject, target age, dimension).
pub fn predictions_csv(predictions: &[Prediction]) -> String {
    let mut out = String::from(PREDICTIONS_HEADER);
    out.push('\n');
    for p in predictions {
        for pt in &p.points {
            for (d, (y, t)) in pt.y_hat.iter().zip(&pt.terms).enumerate() {
                let _ = writeln!(
                    out,
                    "{},{:?},{},{:?},{:?},{:?},{:?},{:?}",
                    p.subject_id, pt.age, d, y, t.population, t.genetic, t.clinical, t.image
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Cohort, Observation};
    use crate::kernels::{gram_set, kernel_params_with_weights};
    use crate::mixedmodel::{fit, FitOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cohort(seed: u64, n: usize, per: usize) -> Cohort {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subjects: Vec<Subject> = (0..n)
            .map(|i| Subject {
                id: format!("s{i:02}"),
                baseline_age: 70.0,
                genotype: (0..5).map(|_| rng.random_range(0..3u8)).collect(),
                clinical: (0..2).map(|_| rng.sample(StandardNormal)).collect(),
                features: (0..2).map(|_| rng.sample(StandardNormal)).collect(),
                baseline_phenotype: vec![3.0, -2.0],
            })
            .collect();
        let mut obs = Vec::new();
        for s in &subjects {
            let slope = 0.5 + 0.4 * s.features[0];
            for t in 1..=per {
                let dx = t as f64 + 0.3 * rng.random::<f64>();
                obs.push(Observation {
                    subject_id: s.id.clone(),
                    age: 70.0 + dx,
                    phenotype: vec![
                        3.0 + slope * dx + 0.1 * rng.sample::<f64, _>(StandardNormal),
                        -2.0 - 0.2 * dx + 0.1 * rng.sample::<f64, _>(StandardNormal),
                    ],
                });
            }
        }
        Cohort::new(subjects, obs).unwrap()
    }

    fn model(c: &Cohort) -> FittedModel {
        let p = kernel_params_with_weights(c.subjects(), &[1.0, 1.0]).unwrap();
        let g = gram_set(c, &p).unwrap();
        fit(c, &g, &FitOptions::default()).unwrap()
    }

    fn request(s: &Subject, ages: &[f64]) -> PredictionRequest {
        PredictionRequest {
            subject: s.clone(),
            target_ages: ages.to_vec(),
        }
    }

    #[test]
    fn zero_interval_returns_baseline() {
        let c = cohort(1, 12, 2);
        let m = model(&c);
        let s = &c.subjects()[3];
        for method in Method::ALL {
            let p = predict_with(method, &m, &request(s, &[s.baseline_age]), &PredictOptions::default())
                .unwrap();
            assert_eq!(p.points[0].y_hat, s.baseline_phenotype);
        }
    }

    #[test]
    fn decomposition_identity_is_exact() {
        let c = cohort(2, 12, 2);
        let m = model(&c);
        let p = predict(&m, &request(&c.subjects()[0], &[71.5, 73.0]), &PredictOptions::default())
            .unwrap();
        for pt in &p.points {
            for (d, t) in pt.terms.iter().enumerate() {
                let sum = p.baseline[d] + t.population + t.genetic + t.clinical + t.image;
                assert_eq!(pt.y_hat[d].to_bits(), sum.to_bits());
            }
        }
    }

    #[test]
    fn prediction_is_linear_in_time() {
        let c = cohort(3, 12, 2);
        let m = model(&c);
        let s = &c.subjects()[5];
        let p = predict(&m, &request(s, &[71.0, 74.0]), &PredictOptions::default()).unwrap();
        for d in 0..2 {
            let a = p.points[0].y_hat[d] - s.baseline_phenotype[d];
            let b = p.points[1].y_hat[d] - s.baseline_phenotype[d];
            assert!((b - 4.0 * a).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn training_subject_uses_gram_columns() {
        let c = cohort(4, 10, 2);
        let p = kernel_params_with_weights(c.subjects(), &[1.0, 1.0]).unwrap();
        let g = gram_set(&c, &p).unwrap();
        let m = fit(&c, &g, &FitOptions::default()).unwrap();
        let j = 6;
        let rows = kernel_row(&m, &c.subjects()[j]).unwrap();
        for (d, k) in g.matrices().iter().enumerate() {
            for i in 0..c.n_subjects() {
                assert!((rows[d][i] - k[(i, j)]).abs() < 1e-15);
            }
        }
        let pred = predict(&m, &request(&c.subjects()[j], &[72.0]), &PredictOptions::default())
            .unwrap();
        let f = &m.fits[0];
        let expected: f64 = (0..3)
            .map(|d| {
                let col = g.matrices()[d].column(j);
                2.0 * col.iter().zip(f.alphas()[d]).map(|(k, a)| k * a).sum::<f64>()
            })
            .sum();
        let t = pred.points[0].terms[0];
        assert!((t.genetic + t.clinical + t.image - expected).abs() < 1e-12);
    }

    #[test]
    fn population_and_carry_definitions() {
        let c = cohort(5, 12, 2);
        let m = model(&c);
        let s = &c.subjects()[1];
        let p = predict_population_only(&m, &request(s, &[72.0]), &PredictOptions::default())
            .unwrap();
        for (d, t) in p.points[0].terms.iter().enumerate() {
            assert_eq!((t.genetic, t.clinical, t.image), (0.0, 0.0, 0.0));
            assert_eq!(t.population, 2.0 * m.fits[d].beta_bar_population);
        }
        let carry = predict_baseline_carry(&request(s, &[72.0, 80.0])).unwrap();
        assert!(carry.points.iter().all(|pt| pt.y_hat == s.baseline_phenotype));
    }

    #[test]
    fn request_validation() {
        let c = cohort(6, 12, 2);
        let mut m = model(&c);
        let s = &c.subjects()[0];
        let opts = PredictOptions::default();
        assert!(matches!(
            predict(&m, &request(s, &[60.0]), &opts),
            Err(Error::InvalidRequest(_))
        ));
        let mut short = s.clone();
        short.genotype.pop();
        assert!(matches!(
            predict(&m, &request(&short, &[72.0]), &opts),
            Err(Error::DimensionMismatch(_))
        ));
        let far = predict(&m, &request(s, &[95.0]), &opts).unwrap();
        assert_eq!(far.warnings.len(), 1);
        m.converged = false;
        assert!(matches!(
            predict(&m, &request(s, &[72.0]), &opts),
            Err(Error::UnconvergedModel)
        ));
        assert!(predict(&m, &request(s, &[72.0]), &PredictOptions { allow_unconverged: true }).is_ok());
    }

    #[test]
    fn method_list_parsing() {
        assert_eq!(Method::parse_list("full,pop,carry").unwrap(), Method::ALL.to_vec());
        assert_eq!(Method::parse_list("pop, full ,pop").unwrap(), vec![Method::Population, Method::Full]);
        assert!(Method::parse_list("full,psychic").is_err());
    }

    #[test]
    fn csv_has_one_row_per_dimension() {
        let c = cohort(7, 12, 2);
        let m = model(&c);
        let p = predict(&m, &request(&c.subjects()[2], &[71.0, 72.0]), &PredictOptions::default())
            .unwrap();
        let csv = predictions_csv(&[p]);
        assert!(csv.starts_with(PREDICTIONS_HEADER));
        assert_eq!(csv.lines().count(), 1 + 2 * 2);
    }
}
