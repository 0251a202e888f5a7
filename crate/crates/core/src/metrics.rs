//! Evaluation: relative error, Dice overlap, top-decile stratification and
//! method comparison reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::deformation::LabelMap;
use crate::error::{Error, Result};
use crate::mixedmodel::FittedModel;
use crate::predictor::{predict_with, Method, PredictOptions, Prediction, PredictionRequest};

pub fn relative_error(pred: f64, truth: f64) -> Result<f64> {
    if truth == 0.0 {
        return Err(Error::ZeroTruth);
    }
    Ok((pred - truth).abs() / truth.abs())
}

/// `2|A∩B| / (|A|+|B|)` for one label; 1 when the label is absent from both.
pub fn dice(a: &LabelMap, b: &LabelMap, label: u8) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::DimensionMismatch("label maps live on different grids".into()));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Relative change `|y_last − y_b| / |y_b|` of dimension `dim` at each
/// subject's last follow-up; subjects without follow-ups are skipped.
pub fn relative_changes(cohort: &Cohort, dim: usize) -> Result<Vec<(String, f64)>> {
    if dim >= cohort.dims().phenotypes {
        return Err(Error::DimensionMismatch(format!("no phenotype dimension {dim}")));
    }
    let by_subject = cohort.observations_by_subject();
    let mut out = Vec::new();
    for (s, obs) in cohort.subjects().iter().zip(&by_subject) {
        // observations are sorted by age within a subject
        let Some(&last) = obs.last() else { continue };
        let yb = s.baseline_phenotype[dim];
        let yt = cohort.observations()[last].phenotype[dim];
        out.push((s.id.clone(), relative_error(yt, yb)?));
    }
    Ok(out)
}

/// Ids of the top 10% (rounded up) by relative change; ties go to the smaller id.
pub fn top_decile(cohort: &Cohort, dim: usize) -> Result<Vec<String>> {
    let mut changes = relative_changes(cohort, dim)?;
    changes.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let k = changes.len().div_ceil(10);
    Ok(changes.into_iter().take(k).map(|(id, _)| id).collect())
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sample standard deviation (n − 1); 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// One-sided exact binomial sign test: P(X ≥ successes) for X ~ Bin(n, 1/2).
pub fn sign_test_p(successes: usize, n: usize) -> f64 {
    let mut log_c = 0.0f64; // ln C(n, k)
    let mut total = 0.0;
    for k in 0..=n {
        if k > 0 {
            log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= successes {
            total += (log_c - n as f64 * std::f64::consts::LN_2).exp();
        }
    }
    total.min(1.0)
}

/// Mean relative error per subject for one method and dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectError {
    pub method: Method,
    pub id: String,
    pub stratum: String,
    pub dim: usize,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub dim: usize,
    pub n_subjects: usize,
    pub mean_rel_error: f64,
    pub median_rel_error: f64,
    pub top_decile_size: usize,
    pub top_decile_mean_rel_error: f64,
    pub top_decile_median_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceSummary {
    pub method: Method,
    pub label: u8,
    pub n: usize,
    pub mean_dice: f64,
    pub mean_count_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub method: Method,
    pub dim: usize,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<Method>,
    pub summaries: Vec<MethodSummary>,
    pub subject_errors: Vec<SubjectError>,
    #[serde(default)]
    pub dice: Vec<DiceSummary>,
    #[serde(default)]
    pub replicates: Vec<ReplicateSummary>,
}

impl EvalReport {
    pub fn summary(&self, method: Method, dim: usize) -> Option<&MethodSummary> {
        self.summaries
            .iter()
            .find(|s| s.method == method && s.dim == dim)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Long-format rows `method,stratum,dim,metric,value`.
    pub fn plotdata_csv(&self) -> String {
        let mut out = String::from("method,stratum,dim,metric,value\n");
        for s in &self.summaries {
            let m = s.method.name();
            for (stratum, metric, value) in [
                ("all", "mean_rel_error", s.mean_rel_error),
                ("all", "median_rel_error", s.median_rel_error),
                ("top_decile", "mean_rel_error", s.top_decile_mean_rel_error),
                ("top_decile", "median_rel_error", s.top_decile_median_rel_error),
            ] {
                let _ = writeln!(out, "{m},{stratum},{},{metric},{value:?}", s.dim);
            }
        }
        let mut by_stratum: BTreeMap<(Method, usize, &str), Vec<f64>> = BTreeMap::new();
        for e in &self.subject_errors {
            by_stratum
                .entry((e.method, e.dim, e.stratum.as_str()))
                .or_default()
                .push(e.rel_error);
        }
        for ((method, dim, stratum), errs) in &by_stratum {
            let _ = writeln!(
                out,
                "{},{},{dim},mean_rel_error,{:?}",
                method.name(),
                stratum_label(stratum),
                mean(errs)
            );
        }
        for d in &self.dice {
            let _ = writeln!(out, "{},label_{},all,dice,{:?}", d.method.name(), d.label, d.mean_dice);
            let _ = writeln!(
                out,
                "{},label_{},all,count_rel_error,{:?}",
                d.method.name(),
                d.label,
                d.mean_count_rel_error
            );
        }
        for r in &self.replicates {
            let _ = writeln!(out, "{},replicates,{},{}_mean,{:?}", r.method.name(), r.dim, r.metric, r.mean);
            let _ = writeln!(out, "{},replicates,{},{}_std,{:?}", r.method.name(), r.dim, r.metric, r.std);
        }
        out
    }
}

fn stratum_label(s: &str) -> String {
    format!("stratum_{s}")
}

/// Predictions of every requested method for one subject at its observed ages.
pub fn predict_subject(
    model: &FittedModel,
    cohort: &Cohort,
    subject: usize,
    methods: &[Method],
    opts: &PredictOptions,
) -> Result<Vec<Prediction>> {
    let obs = &cohort.observations_by_subject()[subject];
    let req = PredictionRequest {
        subject: cohort.subjects()[subject].clone(),
        target_ages: obs.iter().map(|&k| cohort.observations()[k].age).collect(),
    };
    methods
        .iter()
        .map(|&m| predict_with(m, model, &req, opts))
        .collect()
}

/// Runs each method on the held-out subjects and aggregates relative errors
/// against their observed follow-ups.
pub fn compare_methods(
    model: &FittedModel,
    test: &Cohort,
    methods: &[Method],
    opts: &PredictOptions,
) -> Result<EvalReport> {
    let m = test.dims().phenotypes;
    let by_subject = test.observations_by_subject();
    let mut subject_errors = Vec::new();
    for (i, s) in test.subjects().iter().enumerate() {
        if by_subject[i].is_empty() {
            continue;
        }
        let preds = predict_subject(model, test, i, methods, opts)?;
        for (method, pred) in methods.iter().zip(&preds) {
            for d in 0..m {
                let errs = pred
                    .points
                    .iter()
                    .zip(&by_subject[i])
                    .map(|(pt, &k)| relative_error(pt.y_hat[d], test.observations()[k].phenotype[d]))
                    .collect::<Result<Vec<_>>>()?;
                subject_errors.push(SubjectError {
                    method: *method,
                    id: s.id.clone(),
                    stratum: s.stratum().to_string(),
                    dim: d,
                    rel_error: mean(&errs),
                });
            }
        }
    }
    let mut summaries = Vec::new();
    for d in 0..m {
        let top = top_decile(test, d)?;
        for &method in methods {
            let errs: Vec<&SubjectError> = subject_errors
                .iter()
                .filter(|e| e.method == method && e.dim == d)
                .collect();
            let all: Vec<f64> = errs.iter().map(|e| e.rel_error).collect();
            let top_errs: Vec<f64> = errs
                .iter()
                .filter(|e| top.contains(&e.id))
                .map(|e| e.rel_error)
                .collect();
            summaries.push(MethodSummary {
                method,
                dim: d,
                n_subjects: all.len(),
                mean_rel_error: mean(&all),
                median_rel_error: median(&all),
                top_decile_size: top_errs.len(),
                top_decile_mean_rel_error: mean(&top_errs),
                top_decile_median_rel_error: median(&top_errs),
            });
        }
    }
    Ok(EvalReport {
        methods: methods.to_vec(),
        summaries,
        subject_errors,
        dice: Vec::new(),
        replicates: Vec::new(),
    })
}

/// Mean and spread of the summary metrics across replicate reports.
pub fn summarize_replicates(reports: &[EvalReport]) -> Vec<ReplicateSummary> {
    let mut acc: BTreeMap<(Method, usize, &'static str), Vec<f64>> = BTreeMap::new();
    for r in reports {
        for s in &r.summaries {
            for (metric, v) in [
                ("mean_rel_error", s.mean_rel_error),
                ("top_decile_mean_rel_error", s.top_decile_mean_rel_error),
            ] {
                acc.entry((s.method, s.dim, metric)).or_default().push(v);
            }
        }
    }
    acc.into_iter()
        .map(|((method, dim, metric), v)| ReplicateSummary {
            method,
            dim,
            metric: metric.to_string(),
            n: v.len(),
            mean: mean(&v),
            std: std_dev(&v),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Observation, Subject};
    use crate::deformation::Grid2D;
    use proptest::prelude::*;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(10.0, 10.0).unwrap(), 0.0);
        assert!((relative_error(9.0, 10.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 10.0).unwrap(), 1.0);
        assert!(matches!(relative_error(1.0, 0.0), Err(Error::ZeroTruth)));
    }

    fn map(data: Vec<u8>) -> LabelMap {
        LabelMap {
            grid: Grid2D::new(20, 20).unwrap(),
            data,
        }
    }

    #[test]
    fn dice_examples() {
        let a = map((0..400).map(|i| (i < 100) as u8).collect());
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        let b = map((0..400).map(|i| (i >= 300) as u8).collect());
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        let c = map((0..400).map(|i| (50..150).contains(&i) as u8).collect());
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.5);
        assert_eq!(dice(&a, &c, 7).unwrap(), 1.0);
    }

    fn cohort_with_changes(changes: &[(&str, f64)]) -> Cohort {
        let subjects = changes
            .iter()
            .map(|(id, _)| Subject {
                id: id.to_string(),
                baseline_age: 70.0,
                genotype: vec![0],
                clinical: vec![0.0],
                features: vec![0.0],
                baseline_phenotype: vec![10.0],
            })
            .collect();
        let obs = changes
            .iter()
            .flat_map(|(id, ch)| {
                [
                    Observation {
                        subject_id: id.to_string(),
                        age: 71.0,
                        phenotype: vec![10.0],
                    },
                    Observation {
                        subject_id: id.to_string(),
                        age: 72.0,
                        phenotype: vec![10.0 * (1.0 + ch)],
                    },
                ]
            })
            .collect();
        Cohort::new(subjects, obs).unwrap()
    }

    #[test]
    fn top_decile_examples() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let equal: Vec<(&str, f64)> = ids.iter().map(|s| (s.as_str(), 0.1)).collect();
        assert_eq!(top_decile(&cohort_with_changes(&equal), 0).unwrap(), vec!["s0"]);
        let mut outlier = equal.clone();
        outlier[6].1 = -0.9;
        assert_eq!(top_decile(&cohort_with_changes(&outlier), 0).unwrap(), vec!["s6"]);
        let eleven: Vec<(&str, f64)> = (0..11).map(|i| (["a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k"][i], i as f64 * 0.01)).collect();
        assert_eq!(top_decile(&cohort_with_changes(&eleven), 0).unwrap().len(), 2);
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_p(20, 20) - 0.5f64.powi(20)).abs() < 1e-18);
        assert!((sign_test_p(0, 20) - 1.0).abs() < 1e-12);
        assert!(sign_test_p(15, 20) < 0.05);
        assert!(sign_test_p(14, 20) > 0.05);
    }

    #[test]
    fn plotdata_has_long_format_header() {
        let r = EvalReport::default();
        assert_eq!(r.plotdata_csv(), "method,stratum,dim,metric,value\n");
    }

    proptest! {
        #[test]
        fn relative_error_is_scale_invariant(p in -1e3f64..1e3, t in 0.1f64..1e3, s in 0.01f64..100.0) {
            let a = relative_error(p, t).unwrap();
            let b = relative_error(s * p, s * t).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn dice_is_symmetric_and_bounded(a in prop::collection::vec(0u8..3, 400), b in prop::collection::vec(0u8..3, 400), l in 0u8..4) {
            let (a, b) = (map(a), map(b));
            let ab = dice(&a, &b, l).unwrap();
            prop_assert_eq!(ab, dice(&b, &a, l).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
