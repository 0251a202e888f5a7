//! Longitudinal cohort data model and CSV ingestion.
//!
//! A cohort holds one row per subject (baseline metadata) and one row per
//! follow-up observation. After construction, subjects are sorted by id and
//! observations by `(subject_id, age)`, so every downstream matrix is built in
//! the same order regardless of input file order.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUBJECTS_FILE: &str = "subjects.csv";
pub const OBSERVATIONS_FILE: &str = "observations.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    /// Age at the baseline visit, years.
    pub baseline_age: f64,
    /// Minor-allele counts, each in {0, 1, 2}.
    pub genotype: Vec<u8>,
    pub clinical: Vec<f64>,
    /// Baseline image features.
    pub features: Vec<f64>,
    pub baseline_phenotype: Vec<f64>,
}

impl Subject {
    /// Stratum name encoded as the id prefix before the first `-`.
    pub fn stratum(&self) -> &str {
        stratum_of(&self.id)
    }

    pub fn dims(&self) -> Dims {
        Dims {
            loci: self.genotype.len(),
            clinical: self.clinical.len(),
            features: self.features.len(),
            phenotypes: self.baseline_phenotype.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.baseline_age.is_finite() && self.baseline_age > 0.0) {
            return Err(Error::NonFiniteValue(format!(
                "subject {}: baseline age {} must be finite and positive",
                self.id, self.baseline_age
            )));
        }
        if let Some(g) = self.genotype.iter().find(|&&g| g > 2) {
            return Err(Error::BadGenotype {
                context: format!("subject {}", self.id),
                value: g.to_string(),
            });
        }
        let finite = |xs: &[f64], what: &str| -> Result<()> {
            match xs.iter().position(|x| !x.is_finite()) {
                Some(k) => Err(Error::NonFiniteValue(format!(
                    "subject {}: {what}[{}] is not finite",
                    self.id,
                    k + 1
                ))),
                None => Ok(()),
            }
        };
        finite(&self.clinical, "clinical")?;
        finite(&self.features, "features")?;
        finite(&self.baseline_phenotype, "baseline phenotype")
    }
}

pub fn stratum_of(id: &str) -> &str {
    id.split_once('-').map(|(s, _)| s).unwrap_or(id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub subject_id: String,
    /// Age at this visit, years.
    pub age: f64,
    pub phenotype: Vec<f64>,
}

/// Column counts shared by every subject of a cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub loci: usize,
    pub clinical: usize,
    pub features: usize,
    pub phenotypes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    subjects: Vec<Subject>,
    observations: Vec<Observation>,
    /// observation index -> subject index
    incidence: Vec<usize>,
    dims: Dims,
}

/// Stacked age and phenotype changes, one row per observation.
#[derive(Debug, Clone)]
pub struct Deltas {
    pub dx: DVector<f64>,
    pub dy: DMatrix<f64>,
}

fn cmp_f64s(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

impl Cohort {
    pub fn new(mut subjects: Vec<Subject>, mut observations: Vec<Observation>) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| Error::DegenerateCohort("cohort has no subjects".into()))?;
        let dims = first.dims();
        if dims.loci == 0 || dims.clinical == 0 || dims.features == 0 || dims.phenotypes == 0 {
            return Err(Error::BadHeader(format!(
                "need at least one genotype, clinical, feature and phenotype column, got {dims:?}"
            )));
        }
        for s in &subjects {
            let d = s.dims();
            if d != dims {
                return Err(Error::RaggedRow {
                    context: format!("subject {}", s.id),
                    expected: dims.loci + dims.clinical + dims.features + dims.phenotypes,
                    found: d.loci + d.clinical + d.features + d.phenotypes,
                });
            }
            s.validate()?;
        }

        subjects.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = subjects.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::DuplicateSubject {
                id: w[0].id.clone(),
            });
        }
        let index: HashMap<&str, usize> = subjects
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();

        for o in &observations {
            let &i = index.get(o.subject_id.as_str()).ok_or_else(|| Error::MissingSubject {
                id: o.subject_id.clone(),
            })?;
            if o.phenotype.len() != dims.phenotypes {
                return Err(Error::RaggedRow {
                    context: format!("observation of {} at age {}", o.subject_id, o.age),
                    expected: dims.phenotypes,
                    found: o.phenotype.len(),
                });
            }
            if !o.age.is_finite() || o.phenotype.iter().any(|y| !y.is_finite()) {
                return Err(Error::NonFiniteValue(format!(
                    "observation of {} at age {}",
                    o.subject_id, o.age
                )));
            }
            if o.age < subjects[i].baseline_age {
                return Err(Error::InvalidObservation(format!(
                    "observation of {} at age {} precedes baseline age {}",
                    o.subject_id, o.age, subjects[i].baseline_age
                )));
            }
        }

        observations.sort_by(|a, b| {
            a.subject_id
                .cmp(&b.subject_id)
                .then(a.age.total_cmp(&b.age))
                .then_with(|| cmp_f64s(&a.phenotype, &b.phenotype))
        });
        let incidence = observations
            .iter()
            .map(|o| index[o.subject_id.as_str()])
            .collect();

        Ok(Self {
            subjects,
            observations,
            incidence,
            dims,
        })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn incidence(&self) -> &[usize] {
        &self.incidence
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subjects
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
    }

    /// Observation indices per subject, in canonical order.
    pub fn observations_by_subject(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.subjects.len()];
        for (k, &i) in self.incidence.iter().enumerate() {
            groups[i].push(k);
        }
        groups
    }

    pub fn deltas(&self) -> Deltas {
        let n = self.observations.len();
        let m = self.dims.phenotypes;
        let mut dx = DVector::zeros(n);
        let mut dy = DMatrix::zeros(n, m);
        for (k, (o, &i)) in self.observations.iter().zip(&self.incidence).enumerate() {
            let s = &self.subjects[i];
            dx[k] = o.age - s.baseline_age;
            for d in 0..m {
                dy[(k, d)] = o.phenotype[d] - s.baseline_phenotype[d];
            }
        }
        Deltas { dx, dy }
    }

    /// Sub-cohort keeping the subjects accepted by `keep` and their observations.
    pub fn filter(&self, keep: impl Fn(&Subject) -> bool) -> Result<Cohort> {
        let subjects: Vec<Subject> = self.subjects.iter().filter(|s| keep(s)).cloned().collect();
        let observations = self
            .observations
            .iter()
            .zip(&self.incidence)
            .filter(|(_, &i)| keep(&self.subjects[i]))
            .map(|(o, _)| o.clone())
            .collect();
        Cohort::new(subjects, observations)
    }

    pub fn stratum(&self, name: &str) -> Result<Cohort> {
        let c = self.filter(|s| s.stratum() == name);
        match c {
            Err(Error::DegenerateCohort(_)) => Err(Error::DegenerateCohort(format!(
                "no subjects in stratum {name:?}"
            ))),
            other => other,
        }
    }

    /// Splits off the last `n_test` subjects (canonical id order) as a held-out set.
    pub fn split_holdout(&self, n_test: usize) -> Result<(Cohort, Cohort)> {
        if n_test == 0 || n_test >= self.subjects.len() {
            return Err(Error::InvalidRequest(format!(
                "held-out size {n_test} must be in 1..{}",
                self.subjects.len()
            )));
        }
        let cut = self.subjects.len() - n_test;
        let cut_id = self.subjects[cut].id.clone();
        let train = self.filter(|s| s.id < cut_id)?;
        let test = self.filter(|s| s.id >= cut_id)?;
        Ok((train, test))
    }

    pub fn subjects_csv(&self) -> String {
        let d = self.dims;
        let mut out = String::from("id,x_b");
        for (prefix, count) in [
            ("g", d.loci),
            ("c", d.clinical),
            ("f", d.features),
            ("y", d.phenotypes),
        ] {
            for k in 1..=count {
                let _ = write!(out, ",{prefix}_{k}");
            }
        }
        out.push('\n');
        for s in &self.subjects {
            out.push_str(&s.id);
            let _ = write!(out, ",{:?}", s.baseline_age);
            for g in &s.genotype {
                let _ = write!(out, ",{g}");
            }
            for x in s.clinical.iter().chain(&s.features).chain(&s.baseline_phenotype) {
                let _ = write!(out, ",{x:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn observations_csv(&self) -> String {
        let mut out = String::from("id,x_t");
        for k in 1..=self.dims.phenotypes {
            let _ = write!(out, ",y_{k}");
        }
        out.push('\n');
        for o in &self.observations {
            out.push_str(&o.subject_id);
            let _ = write!(out, ",{:?}", o.age);
            for y in &o.phenotype {
                let _ = write!(out, ",{y:?}");
            }
            out.push('\n');
        }
        out
    }
}

/// Column layout parsed from a subjects.csv header.
fn parse_subject_header(header: &csv::StringRecord) -> Result<Dims> {
    let fields: Vec<&str> = header.iter().map(str::trim).collect();
    if fields.len() < 2 || fields[0] != "id" || fields[1] != "x_b" {
        return Err(Error::BadHeader(
            "subjects header must start with `id,x_b`".into(),
        ));
    }
    let mut counts = [0usize; 4];
    let mut stage = 0;
    for name in &fields[2..] {
        let (prefix, idx) = name
            .split_once('_')
            .ok_or_else(|| Error::BadHeader(format!("unexpected column {name:?}")))?;
        let block = match prefix {
            "g" => 0,
            "c" => 1,
            "f" => 2,
            "y" => 3,
            _ => return Err(Error::BadHeader(format!("unexpected column {name:?}"))),
        };
        if block < stage {
            return Err(Error::BadHeader(format!(
                "column {name:?} out of order; expected g_*, c_*, f_*, y_*"
            )));
        }
        stage = block;
        counts[block] += 1;
        if idx.parse::<usize>().ok() != Some(counts[block]) {
            return Err(Error::BadHeader(format!(
                "column {name:?} should be {prefix}_{}",
                counts[block]
            )));
        }
    }
    Ok(Dims {
        loci: counts[0],
        clinical: counts[1],
        features: counts[2],
        phenotypes: counts[3],
    })
}

fn parse_f64(field: &str, line: usize, column: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        path: Default::default(),
        line,
        msg: format!("column {column}: cannot parse {field:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::NonFiniteValue(format!(
            "line {line}, column {column}: {field:?}"
        )));
    }
    Ok(v)
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        path: Default::default(),
        line,
        msg: e.to_string(),
    }
}

pub fn read_subjects<R: Read>(reader: R) -> Result<Vec<Subject>> {
    let mut rdr = csv_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let dims = parse_subject_header(&header)?;
    let width = 2 + dims.loci + dims.clinical + dims.features + dims.phenotypes;
    let mut subjects = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != width {
            return Err(Error::RaggedRow {
                context: format!("line {line}"),
                expected: width,
                found: rec.len(),
            });
        }
        let id = rec[0].trim().to_string();
        let baseline_age = parse_f64(&rec[1], line, "x_b")?;
        let mut col = 2;
        let mut genotype = Vec::with_capacity(dims.loci);
        for s in 0..dims.loci {
            let raw = rec[col].trim();
            let g = match raw {
                "0" => 0,
                "1" => 1,
                "2" => 2,
                _ => {
                    return Err(Error::BadGenotype {
                        context: format!("line {line}, column g_{}", s + 1),
                        value: raw.to_string(),
                    })
                }
            };
            genotype.push(g);
            col += 1;
        }
        let mut take = |count: usize, prefix: &str| -> Result<Vec<f64>> {
            let mut v = Vec::with_capacity(count);
            for k in 0..count {
                v.push(parse_f64(&rec[col], line, &format!("{prefix}_{}", k + 1))?);
                col += 1;
            }
            Ok(v)
        };
        let clinical = take(dims.clinical, "c")?;
        let features = take(dims.features, "f")?;
        let baseline_phenotype = take(dims.phenotypes, "y")?;
        subjects.push(Subject {
            id,
            baseline_age,
            genotype,
            clinical,
            features,
            baseline_phenotype,
        });
    }
    Ok(subjects)
}

pub fn read_observations<R: Read>(reader: R) -> Result<Vec<Observation>> {
    let mut rdr = csv_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let fields: Vec<&str> = header.iter().map(str::trim).collect();
    if fields.len() < 3 || fields[0] != "id" || fields[1] != "x_t" {
        return Err(Error::BadHeader(
            "observations header must be `id,x_t,y_1..y_M`".into(),
        ));
    }
    for (k, name) in fields[2..].iter().enumerate() {
        if *name != format!("y_{}", k + 1) {
            return Err(Error::BadHeader(format!(
                "column {name:?} should be y_{}",
                k + 1
            )));
        }
    }
    let width = fields.len();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != width {
            return Err(Error::RaggedRow {
                context: format!("line {line}"),
                expected: width,
                found: rec.len(),
            });
        }
        let age = parse_f64(&rec[1], line, "x_t")?;
        let phenotype = (2..width)
            .map(|c| parse_f64(&rec[c], line, &format!("y_{}", c - 1)))
            .collect::<Result<Vec<_>>>()?;
        out.push(Observation {
            subject_id: rec[0].trim().to_string(),
            age,
            phenotype,
        });
    }
    Ok(out)
}

pub fn read_subjects_file(path: &Path) -> Result<Vec<Subject>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_subjects(f).map_err(|e| e.in_file(path))
}

pub fn load_cohort(subjects_path: &Path, observations_path: &Path) -> Result<Cohort> {
    let subjects = read_subjects_file(subjects_path)?;
    let f = fs::File::open(observations_path).map_err(|e| Error::io(observations_path, e))?;
    let observations = read_observations(f).map_err(|e| e.in_file(observations_path))?;
    if let (Some(s), Some(o)) = (subjects.first(), observations.first()) {
        if s.baseline_phenotype.len() != o.phenotype.len() {
            return Err(Error::RaggedRow {
                context: format!(
                    "{} vs {}: phenotype columns",
                    subjects_path.display(),
                    observations_path.display()
                ),
                expected: s.baseline_phenotype.len(),
                found: o.phenotype.len(),
            });
        }
    }
    Cohort::new(subjects, observations)
}

/// Loads `subjects.csv` and `observations.csv` from a directory.
pub fn load_cohort_dir(dir: &Path) -> Result<Cohort> {
    load_cohort(&dir.join(SUBJECTS_FILE), &dir.join(OBSERVATIONS_FILE))
}

pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sp = dir.join(SUBJECTS_FILE);
    fs::write(&sp, cohort.subjects_csv()).map_err(|e| Error::io(&sp, e))?;
    let op = dir.join(OBSERVATIONS_FILE);
    fs::write(&op, cohort.observations_csv()).map_err(|e| Error::io(&op, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SUBJECTS: &str = "id,x_b,g_1,g_2,c_1,f_1,y_1\n\
                            b,70,0,2,0.5,1.0,10.0\n\
                            a,65.5,1,1,-0.5,2.0,12.0\n";
    const OBS: &str = "id,x_t,y_1\nb,72.5,11.0\na,67,12.5\na,66,12.2\n";

    fn parse(subjects: &str, obs: &str) -> Result<Cohort> {
        Cohort::new(
            read_subjects(subjects.as_bytes())?,
            read_observations(obs.as_bytes())?,
        )
    }

    #[test]
    fn two_subjects_three_observations() {
        let c = parse(SUBJECTS, OBS).unwrap();
        assert_eq!(c.n_subjects(), 2);
        assert_eq!(c.n_observations(), 3);
        assert_eq!(c.incidence(), &[0, 0, 1]);
        assert_eq!(c.subjects()[0].id, "a");
        assert_eq!(c.observations()[0].age, 66.0);
    }

    #[test]
    fn unknown_subject_is_rejected() {
        let err = parse(SUBJECTS, "id,x_t,y_1\nzzz,80,1\n").unwrap_err();
        assert!(matches!(err, Error::MissingSubject { ref id } if id == "zzz"));
    }

    #[test]
    fn genotype_three_is_rejected() {
        let bad = "id,x_b,g_1,c_1,f_1,y_1\na,70,3,0,0,1\n";
        assert!(matches!(
            read_subjects(bad.as_bytes()),
            Err(Error::BadGenotype { .. })
        ));
    }

    #[test]
    fn ragged_and_nonfinite_rows() {
        let ragged = "id,x_b,g_1,c_1,f_1,y_1\na,70,1,0,0\n";
        assert!(matches!(
            read_subjects(ragged.as_bytes()),
            Err(Error::RaggedRow { .. })
        ));
        let nan = "id,x_b,g_1,c_1,f_1,y_1\na,70,1,NaN,0,1\n";
        assert!(matches!(
            read_subjects(nan.as_bytes()),
            Err(Error::NonFiniteValue(_))
        ));
        let missing = "id,x_b,g_1,c_1,f_1,y_1\na,70,1,,0,1\n";
        assert!(read_subjects(missing.as_bytes()).is_err());
    }

    #[test]
    fn deltas_subtract_baseline() {
        let c = parse(SUBJECTS, OBS).unwrap();
        let d = c.deltas();
        assert_eq!(d.dy.shape(), (3, 1));
        // b: x_b = 70, x_t = 72.5
        assert_eq!(d.dx[2], 2.5);
        assert_eq!(d.dy[(2, 0)], 1.0);
    }

    #[test]
    fn observation_at_baseline_has_zero_delta() {
        let c = parse(SUBJECTS, "id,x_t,y_1\nb,70,10.0\n").unwrap();
        let d = c.deltas();
        assert_eq!(d.dx[0], 0.0);
        assert_eq!(d.dy[(0, 0)], 0.0);
        assert_eq!(d.dx.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn canonical_files_round_trip() {
        let c = parse(SUBJECTS, OBS).unwrap();
        let again = parse(&c.subjects_csv(), &c.observations_csv()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.subjects_csv(), again.subjects_csv());
        assert_eq!(c.observations_csv(), again.observations_csv());
    }

    #[test]
    fn observation_before_baseline_is_rejected() {
        assert!(matches!(
            parse(SUBJECTS, "id,x_t,y_1\nb,60,1\n"),
            Err(Error::InvalidObservation(_))
        ));
    }

    #[test]
    fn holdout_and_strata() {
        let s = "id,x_b,g_1,c_1,f_1,y_1\nhealthy-1,70,1,0,0,1\nhealthy-2,70,1,0,0,1\ndisease-1,70,1,0,0,1\n";
        let c = parse(s, "id,x_t,y_1\nhealthy-1,71,1\ndisease-1,71,2\n").unwrap();
        let h = c.stratum("healthy").unwrap();
        assert_eq!(h.n_subjects(), 2);
        assert_eq!(h.n_observations(), 1);
        let (train, test) = c.split_holdout(1).unwrap();
        assert_eq!(train.n_subjects(), 2);
        assert_eq!(test.subjects()[0].id, "healthy-2");
        assert!(c.stratum("nobody").is_err());
    }
}
