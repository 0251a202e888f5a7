//! Subject similarity kernels: identity-by-state over genotypes, weighted RBF
//! over clinical indicators, and RBF over baseline image features.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Subject};
use crate::error::{Error, Result};

pub const DEFAULT_JITTER: f64 = 1e-10;

/// Identity-by-state similarity: mean allele sharing over loci, in [0, 1].
pub fn ibs_kernel(gi: &[u8], gj: &[u8]) -> Result<f64> {
    if gi.len() != gj.len() {
        return Err(Error::LengthMismatch {
            expected: gi.len(),
            found: gj.len(),
        });
    }
    if gi.is_empty() {
        return Err(Error::LengthMismatch {
            expected: 1,
            found: 0,
        });
    }
    let mut shared = 0u32;
    for (&a, &b) in gi.iter().zip(gj) {
        if a > 2 || b > 2 {
            return Err(Error::BadGenotype {
                context: "ibs_kernel".into(),
                value: a.max(b).to_string(),
            });
        }
        shared += 2 - u32::from(a.abs_diff(b));
    }
    Ok(f64::from(shared) / (2.0 * gi.len() as f64))
}

/// `exp(-(ci - cj)^T W (ci - cj) / sigma2_c)` with diagonal `W`.
pub fn clinical_kernel(ci: &[f64], cj: &[f64], weights: &[f64], sigma2_c: f64) -> Result<f64> {
    if ci.len() != cj.len() || weights.len() != ci.len() {
        return Err(Error::LengthMismatch {
            expected: ci.len(),
            found: if cj.len() != ci.len() {
                cj.len()
            } else {
                weights.len()
            },
        });
    }
    if !(sigma2_c > 0.0) {
        return Err(Error::NonPositiveVariance(format!("sigma2_C = {sigma2_c}")));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::NonPositiveVariance(
            "clinical weights must be nonnegative".into(),
        ));
    }
    Ok((-weighted_sq_dist(ci, cj, weights) / sigma2_c).exp())
}

/// `exp(-||fi - fj||^2 / sigma2_i)`.
pub fn image_kernel(fi: &[f64], fj: &[f64], sigma2_i: f64) -> Result<f64> {
    if fi.len() != fj.len() {
        return Err(Error::LengthMismatch {
            expected: fi.len(),
            found: fj.len(),
        });
    }
    if !(sigma2_i > 0.0) {
        return Err(Error::NonPositiveVariance(format!("sigma2_I = {sigma2_i}")));
    }
    Ok((-sq_dist(fi, fj) / sigma2_i).exp())
}

fn weighted_sq_dist(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(w)
        .map(|((x, y), w)| w * (x - y) * (x - y))
        .sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Kernel hyperparameters frozen at fit time and reused for new subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Diagonal of W, one entry per clinical indicator.
    pub clinical_weights: Vec<f64>,
    pub sigma2_c: f64,
    pub sigma2_i: f64,
    pub jitter: f64,
    /// Training mean of each clinical indicator.
    pub clinical_mean: Vec<f64>,
    /// Training standard deviation of each indicator (1 for constant columns).
    pub clinical_scale: Vec<f64>,
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        let q = self.clinical_weights.len();
        if self.clinical_mean.len() != q || self.clinical_scale.len() != q {
            return Err(Error::LengthMismatch {
                expected: q,
                found: self.clinical_mean.len().min(self.clinical_scale.len()),
            });
        }
        if self.clinical_weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::NonPositiveVariance(
                "clinical weights must be finite and nonnegative".into(),
            ));
        }
        if !(self.sigma2_c > 0.0 && self.sigma2_c.is_finite()) {
            return Err(Error::NonPositiveVariance(format!(
                "sigma2_C = {}",
                self.sigma2_c
            )));
        }
        if !(self.sigma2_i > 0.0 && self.sigma2_i.is_finite()) {
            return Err(Error::NonPositiveVariance(format!(
                "sigma2_I = {}",
                self.sigma2_i
            )));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::NonPositiveVariance("jitter must be >= 0".into()));
        }
        Ok(())
    }

    pub fn standardize(&self, clinical: &[f64]) -> Vec<f64> {
        clinical
            .iter()
            .zip(&self.clinical_mean)
            .zip(&self.clinical_scale)
            .map(|((c, m), s)| (c - m) / s)
            .collect()
    }

    /// The three kernel values between two subjects, in (G, C, I) order.
    pub fn kernels(&self, a: &Subject, b: &Subject) -> Result<[f64; 3]> {
        self.kernels_standardized(a, &self.standardize(&a.clinical), b, &self.standardize(&b.clinical))
    }

    fn kernels_standardized(
        &self,
        a: &Subject,
        ca: &[f64],
        b: &Subject,
        cb: &[f64],
    ) -> Result<[f64; 3]> {
        Ok([
            ibs_kernel(&a.genotype, &b.genotype)?,
            clinical_kernel(ca, cb, &self.clinical_weights, self.sigma2_c)?,
            image_kernel(&a.features, &b.features, self.sigma2_i)?,
        ])
    }
}

fn clinical_standardization(subjects: &[Subject]) -> (Vec<f64>, Vec<f64>, bool) {
    let q = subjects[0].clinical.len();
    let n = subjects.len() as f64;
    let mut mean = vec![0.0; q];
    let mut scale = vec![1.0; q];
    let mut any_varies = false;
    for k in 0..q {
        let m = subjects.iter().map(|s| s.clinical[k]).sum::<f64>() / n;
        let var = subjects
            .iter()
            .map(|s| (s.clinical[k] - m).powi(2))
            .sum::<f64>()
            / n;
        mean[k] = m;
        if var > 0.0 {
            scale[k] = var.sqrt();
            any_varies = true;
        }
    }
    (mean, scale, any_varies)
}

fn mean_pairwise(values: &[Vec<f64>], dist: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let n = values.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += dist(&values[i], &values[j]);
        }
    }
    total / (n * (n - 1) / 2) as f64
}

fn median_pairwise(values: &[Vec<f64>], dist: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let n = values.len();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(dist(&values[i], &values[j]));
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

/// Kernel parameters with caller-supplied clinical weights (normalized to
/// trace Q). sigma2_C is the mean pairwise weighted distance and sigma2_I the
/// median pairwise squared feature distance over `subjects`.
pub fn kernel_params_with_weights(subjects: &[Subject], weights: &[f64]) -> Result<KernelParams> {
    if subjects.len() < 2 {
        return Err(Error::DegenerateCohort(
            "need at least two subjects to set kernel bandwidths".into(),
        ));
    }
    let q = subjects[0].clinical.len();
    if weights.len() != q {
        return Err(Error::LengthMismatch {
            expected: q,
            found: weights.len(),
        });
    }
    let (clinical_mean, clinical_scale, any_varies) = clinical_standardization(subjects);
    if !any_varies {
        return Err(Error::DegenerateCohort(
            "all clinical indicators are constant".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    let clinical_weights: Vec<f64> = if total > 0.0 && total.is_finite() {
        weights.iter().map(|w| w * q as f64 / total).collect()
    } else {
        vec![1.0; q]
    };
    let mut params = KernelParams {
        clinical_weights,
        sigma2_c: 1.0,
        sigma2_i: 1.0,
        jitter: DEFAULT_JITTER,
        clinical_mean,
        clinical_scale,
    };
    let standardized: Vec<Vec<f64>> = subjects
        .iter()
        .map(|s| params.standardize(&s.clinical))
        .collect();
    params.sigma2_c = mean_pairwise(&standardized, |a, b| {
        weighted_sq_dist(a, b, &params.clinical_weights)
    });
    if !(params.sigma2_c > 0.0) {
        return Err(Error::DegenerateCohort(
            "weighted clinical distances are all zero".into(),
        ));
    }
    let features: Vec<Vec<f64>> = subjects.iter().map(|s| s.features.clone()).collect();
    params.sigma2_i = median_pairwise(&features, sq_dist);
    if !(params.sigma2_i > 0.0) {
        return Err(Error::DegenerateCohort(
            "baseline image features have zero variance".into(),
        ));
    }
    Ok(params)
}

/// Estimates W from the data: each clinical indicator is weighted by the
/// absolute univariate OLS slope of the subject's mean rate of change
/// (Δy/Δx averaged over observations and phenotype dimensions) on the
/// standardized indicator.
pub fn estimate_kernel_params(cohort: &Cohort) -> Result<KernelParams> {
    let subjects = cohort.subjects();
    if subjects.len() < 2 {
        return Err(Error::DegenerateCohort(
            "need at least two subjects to estimate kernel parameters".into(),
        ));
    }
    let deltas = cohort.deltas();
    let m = cohort.dims().phenotypes;
    let mut rate_sum = vec![0.0; subjects.len()];
    let mut rate_count = vec![0usize; subjects.len()];
    for (k, &i) in cohort.incidence().iter().enumerate() {
        let dx = deltas.dx[k];
        if dx != 0.0 {
            let mean_rate = (0..m).map(|d| deltas.dy[(k, d)] / dx).sum::<f64>() / m as f64;
            rate_sum[i] += mean_rate;
            rate_count[i] += 1;
        }
    }
    let used: Vec<(usize, f64)> = (0..subjects.len())
        .filter(|&i| rate_count[i] > 0)
        .map(|i| (i, rate_sum[i] / rate_count[i] as f64))
        .collect();
    if used.is_empty() {
        return Err(Error::DegenerateDesign(
            "every observation has Δx = 0; no trend is identifiable".into(),
        ));
    }
    let (mean, scale, any_varies) = clinical_standardization(subjects);
    if !any_varies {
        return Err(Error::DegenerateCohort(
            "all clinical indicators are constant".into(),
        ));
    }
    let q = mean.len();
    let nu = used.len() as f64;
    let rate_mean = used.iter().map(|&(_, r)| r).sum::<f64>() / nu;
    let weights: Vec<f64> = (0..q)
        .map(|k| {
            let z: Vec<f64> = used
                .iter()
                .map(|&(i, _)| (subjects[i].clinical[k] - mean[k]) / scale[k])
                .collect();
            let zm = z.iter().sum::<f64>() / nu;
            let szz: f64 = z.iter().map(|v| (v - zm).powi(2)).sum();
            let szr: f64 = z
                .iter()
                .zip(&used)
                .map(|(v, &(_, r))| (v - zm) * (r - rate_mean))
                .sum();
            if szz > 0.0 {
                (szr / szz).abs()
            } else {
                0.0
            }
        })
        .collect();
    kernel_params_with_weights(subjects, &weights)
}

/// Subject-by-subject Gram matrices for the three similarity kernels.
#[derive(Debug, Clone)]
pub struct GramSet {
    pub genetic: DMatrix<f64>,
    pub clinical: DMatrix<f64>,
    pub image: DMatrix<f64>,
    pub params: KernelParams,
    /// Diagonal jitter applied to (G, C, I); zero when the matrix was already PSD.
    pub jitter_applied: [f64; 3],
}

impl GramSet {
    pub fn n(&self) -> usize {
        self.genetic.nrows()
    }

    pub fn matrices(&self) -> [&DMatrix<f64>; 3] {
        [&self.genetic, &self.clinical, &self.image]
    }
}

pub fn gram_set(cohort: &Cohort, params: &KernelParams) -> Result<GramSet> {
    gram_set_for_subjects(cohort.subjects(), params)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn repair_psd(m: &mut DMatrix<f64>, base_jitter: f64, name: &str) -> f64 {
    let n = m.nrows();
    if n == 0 || min_eigenvalue(m) >= 0.0 {
        return 0.0;
    }
    let diag: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    let mut jitter = base_jitter.max(f64::MIN_POSITIVE) * n as f64;
    let mut applied = 0.0;
    for _ in 0..12 {
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = d + jitter;
        }
        applied = jitter;
        if min_eigenvalue(m) >= 0.0 {
            break;
        }
        jitter *= 10.0;
    }
    log::warn!("{name} Gram matrix not PSD; added diagonal jitter {applied:e}");
    applied
}

pub fn gram_set_for_subjects(subjects: &[Subject], params: &KernelParams) -> Result<GramSet> {
    params.validate()?;
    let n = subjects.len();
    let standardized: Vec<Vec<f64>> = subjects
        .iter()
        .map(|s| params.standardize(&s.clinical))
        .collect();
    // Upper triangle per row, mirrored below so symmetry is exact.
    let rows: Vec<Vec<[f64; 3]>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| {
                    params.kernels_standardized(
                        &subjects[i],
                        &standardized[i],
                        &subjects[j],
                        &standardized[j],
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mats = [DMatrix::zeros(n, n), DMatrix::zeros(n, n), DMatrix::zeros(n, n)];
    for (i, row) in rows.iter().enumerate() {
        for (off, vals) in row.iter().enumerate() {
            let j = i + off;
            for (d, m) in mats.iter_mut().enumerate() {
                m[(i, j)] = vals[d];
                m[(j, i)] = vals[d];
            }
        }
    }
    let [mut genetic, mut clinical, mut image] = mats;
    let jitter_applied = [
        repair_psd(&mut genetic, params.jitter, "genetic"),
        repair_psd(&mut clinical, params.jitter, "clinical"),
        repair_psd(&mut image, params.jitter, "image"),
    ];
    Ok(GramSet {
        genetic,
        clinical,
        image,
        params: params.clone(),
        jitter_applied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn subject(id: &str, g: Vec<u8>, c: Vec<f64>, f: Vec<f64>) -> Subject {
        Subject {
            id: id.into(),
            baseline_age: 70.0,
            genotype: g,
            clinical: c,
            features: f,
            baseline_phenotype: vec![1.0],
        }
    }

    #[test]
    fn ibs_examples() {
        assert_eq!(ibs_kernel(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(ibs_kernel(&[0, 0], &[2, 2]).unwrap(), 0.0);
        assert_relative_eq!(ibs_kernel(&[0, 1, 2], &[2, 1, 0]).unwrap(), 1.0 / 3.0);
        assert!(matches!(
            ibs_kernel(&[0, 1], &[0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            ibs_kernel(&[3], &[0]),
            Err(Error::BadGenotype { .. })
        ));
    }

    #[test]
    fn clinical_examples() {
        assert_eq!(clinical_kernel(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0], 1.0).unwrap(), 1.0);
        assert_relative_eq!(
            clinical_kernel(&[1.0], &[0.0], &[1.0], 1.0).unwrap(),
            0.367879441171442,
            epsilon = 1e-12
        );
        assert_eq!(clinical_kernel(&[5.0, -3.0], &[0.0, 9.0], &[0.0, 0.0], 2.0).unwrap(), 1.0);
        assert!(matches!(
            clinical_kernel(&[1.0], &[0.0], &[1.0], 0.0),
            Err(Error::NonPositiveVariance(_))
        ));
    }

    #[test]
    fn image_examples() {
        assert_eq!(image_kernel(&[0.3, 0.1], &[0.3, 0.1], 1.0).unwrap(), 1.0);
        assert_relative_eq!(
            image_kernel(&[1.0, 1.0], &[0.0, 0.0], 2.0).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-15
        );
        let far = image_kernel(&[1e3], &[-1e3], 1.0).unwrap();
        assert!((0.0..1e-100).contains(&far));
    }

    fn five_subjects() -> Vec<Subject> {
        vec![
            subject("a", vec![0, 1], vec![0.0, 1.0], vec![0.0, 0.0]),
            subject("b", vec![1, 1], vec![1.0, 0.0], vec![1.0, 0.0]),
            subject("c", vec![2, 0], vec![2.0, 1.0], vec![0.0, 2.0]),
            subject("d", vec![0, 2], vec![0.5, 3.0], vec![3.0, 1.0]),
            subject("e", vec![1, 0], vec![1.5, 2.0], vec![-1.0, 1.5]),
        ]
    }

    #[test]
    fn image_bandwidth_is_median_pair_distance() {
        let subjects = five_subjects();
        let p = kernel_params_with_weights(&subjects, &[1.0, 1.0]).unwrap();
        let mut d = Vec::new();
        for i in 0..5 {
            for j in i + 1..5 {
                d.push(sq_dist(&subjects[i].features, &subjects[j].features));
            }
        }
        d.sort_by(f64::total_cmp);
        assert_eq!(p.sigma2_i, 0.5 * (d[4] + d[5]));
        let lo = image_kernel(&[0.0], &[d[5].sqrt()], p.sigma2_i).unwrap();
        let hi = image_kernel(&[0.0], &[d[4].sqrt()], p.sigma2_i).unwrap();
        let e1 = (-1.0f64).exp();
        assert!(lo <= e1 * (1.0 + 1e-12) && e1 <= hi * (1.0 + 1e-12));
    }

    #[test]
    fn constant_clinical_columns_are_degenerate() {
        let mut s = five_subjects();
        for x in &mut s {
            x.clinical = vec![1.0, 2.0];
        }
        assert!(matches!(
            kernel_params_with_weights(&s, &[1.0, 1.0]),
            Err(Error::DegenerateCohort(_))
        ));
    }

    #[test]
    fn single_subject_gram_is_one() {
        let s = five_subjects();
        let p = kernel_params_with_weights(&s, &[1.0, 1.0]).unwrap();
        let g = gram_set_for_subjects(&s[..1], &p).unwrap();
        for m in g.matrices() {
            assert_eq!(m.shape(), (1, 1));
            assert_eq!(m[(0, 0)], 1.0);
        }
    }

    #[test]
    fn duplicated_subjects_have_unit_similarity() {
        let mut s = five_subjects();
        let mut dup = s[1].clone();
        dup.id = "b2".into();
        s.push(dup);
        let p = kernel_params_with_weights(&s, &[1.0, 1.0]).unwrap();
        let g = gram_set_for_subjects(&s, &p).unwrap();
        for m in g.matrices() {
            assert!((m[(1, 5)] - 1.0).abs() < 1e-15);
            assert!((m[(1, 5)] - m[(1, 1)]).abs() <= 2.0 * g.jitter_applied.iter().cloned().fold(0.0, f64::max));
        }
    }

    proptest! {
        #[test]
        fn ibs_invariant_under_locus_permutation(
            pairs in prop::collection::vec((0u8..3, 0u8..3), 1..30),
            seed in any::<u64>()
        ) {
            let a: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let k = ibs_kernel(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&k));
            prop_assert_eq!(k, ibs_kernel(&b, &a).unwrap());
            let mut idx: Vec<usize> = (0..a.len()).collect();
            // deterministic shuffle from the seed
            let mut state = seed;
            for i in (1..idx.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                idx.swap(i, (state >> 33) as usize % (i + 1));
            }
            let pa: Vec<u8> = idx.iter().map(|&i| a[i]).collect();
            let pb: Vec<u8> = idx.iter().map(|&i| b[i]).collect();
            prop_assert!((ibs_kernel(&pa, &pb).unwrap() - k).abs() < 1e-15);
        }

        #[test]
        fn clinical_kernel_scale_covariance(
            v in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.0f64..2.0), 1..6),
            a in prop::sample::select(vec![-3.0, -0.5, 0.25, 2.0, 7.0]),
            s2 in 0.1f64..5.0
        ) {
            let ci: Vec<f64> = v.iter().map(|t| t.0).collect();
            let cj: Vec<f64> = v.iter().map(|t| t.1).collect();
            let w: Vec<f64> = v.iter().map(|t| t.2).collect();
            let k = clinical_kernel(&ci, &cj, &w, s2).unwrap();
            let sci: Vec<f64> = ci.iter().map(|x| a * x).collect();
            let scj: Vec<f64> = cj.iter().map(|x| a * x).collect();
            let sw: Vec<f64> = w.iter().map(|x| x / (a * a)).collect();
            let ks = clinical_kernel(&sci, &scj, &sw, s2).unwrap();
            prop_assert!((k - ks).abs() <= 1e-12 * k.max(1e-300).max(1.0));
            prop_assert!((0.0..=1.0).contains(&k));
            // strictly positive unless exp underflows
            if weighted_sq_dist(&ci, &cj, &w) / s2 < 700.0 {
                prop_assert!(k > 0.0);
            }
        }
    }
}
