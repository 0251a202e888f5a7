//! 2D displacement-field phenotypes.
//!
//! A displacement field `u` maps atlas coordinates to subject coordinates so
//! that a subject image is `I(v) = A(v + u(v))`. Fields are encoded per atlas
//! label with a PCA basis fitted across training subjects; the concatenated
//! coefficients are the phenotype vector.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VARIANCE_RETAINED: f64 = 0.95;
pub const INVERT_MAX_ITERS: usize = 30;
pub const INVERT_TOL: f64 = 1e-4;
pub const INVERT_FAIL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid2D {
    pub width: usize,
    pub height: usize,
}

impl Grid2D {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < 8 || height < 8 {
            return Err(Error::InvalidRequest(format!(
                "grid {width}x{height} is smaller than 8x8"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn coords(&self, idx: usize) -> (f64, f64) {
        ((idx % self.width) as f64, (idx / self.width) as f64)
    }

    fn check(&self, other: &Grid2D) -> Result<()> {
        if self != other {
            return Err(Error::DimensionMismatch(format!(
                "grid {}x{} does not match {}x{}",
                other.width, other.height, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Bilinear interpolation of a scalar channel with border clamping.
    fn bilinear(&self, x: f64, y: f64, at: impl Fn(usize) -> f64) -> f64 {
        let px = x.clamp(0.0, (self.width - 1) as f64);
        let py = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (px.floor() as usize, py.floor() as usize);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = px - x0 as f64;
        let fy = py - y0 as f64;
        let (a00, a10) = (at(self.index(x0, y0)), at(self.index(x1, y0)));
        let (a01, a11) = (at(self.index(x0, y1)), at(self.index(x1, y1)));
        let top = a00 + fx * (a10 - a00);
        let bottom = a01 + fx * (a11 - a01);
        top + fy * (bottom - top)
    }

    fn nearest(&self, x: f64, y: f64) -> usize {
        let px = x.clamp(0.0, (self.width - 1) as f64).round() as usize;
        let py = y.clamp(0.0, (self.height - 1) as f64).round() as usize;
        self.index(px, py)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub grid: Grid2D,
    pub data: Vec<f64>,
}

impl Image {
    pub fn constant(grid: Grid2D, value: f64) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn sample(&self, x: f64, y: f64) -> f64 {
        self.grid.bilinear(x, y, |i| self.data[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub grid: Grid2D,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn labels(&self) -> Vec<u8> {
        self.data.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Pixel count of `label` (the 2D stand-in for a structure volume).
    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub grid: Grid2D,
    pub data: Vec<[f64; 2]>,
}

impl DisplacementField {
    pub fn zeros(grid: Grid2D) -> Self {
        Self {
            grid,
            data: vec![[0.0; 2]; grid.len()],
        }
    }

    pub fn constant(grid: Grid2D, shift: [f64; 2]) -> Self {
        Self {
            grid,
            data: vec![shift; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> [f64; 2]) -> Self {
        let data = (0..grid.len())
            .map(|i| {
                let (x, y) = grid.coords(i);
                f(x, y)
            })
            .collect();
        Self { grid, data }
    }

    pub fn sample(&self, x: f64, y: f64) -> [f64; 2] {
        [
            self.grid.bilinear(x, y, |i| self.data[i][0]),
            self.grid.bilinear(x, y, |i| self.data[i][1]),
        ]
    }

    pub fn max_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|d| d[0].hypot(d[1]))
            .fold(0.0, f64::max)
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|d| d[0] * d[0] + d[1] * d[1]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|d| d[0].is_finite() && d[1].is_finite())
    }

    /// Pointwise difference `self - other`.
    pub fn sub(&self, other: &DisplacementField) -> DisplacementField {
        DisplacementField {
            grid: self.grid,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| [a[0] - b[0], a[1] - b[1]])
                .collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,ux,uy\n");
        for (i, d) in self.data.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?}",
                i % self.grid.width,
                i / self.grid.width,
                d[0],
                d[1]
            );
        }
        out
    }

    pub fn from_csv(text: &str, grid: Grid2D) -> Result<Self> {
        let mut field = DisplacementField::zeros(grid);
        let mut seen = vec![false; grid.len()];
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "x,y,ux,uy" => {}
            _ => return Err(Error::BadHeader("field CSV must start with x,y,ux,uy".into())),
        }
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let bad = |msg: &str| Error::Parse {
                path: Default::default(),
                line: ln + 1,
                msg: msg.to_string(),
            };
            if parts.len() != 4 {
                return Err(bad("expected 4 columns"));
            }
            let x: usize = parts[0].trim().parse().map_err(|_| bad("bad x"))?;
            let y: usize = parts[1].trim().parse().map_err(|_| bad("bad y"))?;
            if x >= grid.width || y >= grid.height {
                return Err(bad("coordinate outside grid"));
            }
            let ux: f64 = parts[2].trim().parse().map_err(|_| bad("bad ux"))?;
            let uy: f64 = parts[3].trim().parse().map_err(|_| bad("bad uy"))?;
            let i = grid.index(x, y);
            field.data[i] = [ux, uy];
            seen[i] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::InvalidRequest("field CSV does not cover the grid".into()));
        }
        if !field.is_finite() {
            return Err(Error::NonFiniteValue("field CSV has non-finite entries".into()));
        }
        Ok(field)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    pub image: Image,
    pub labels: LabelMap,
}

impl Atlas {
    pub fn new(image: Image, labels: LabelMap) -> Result<Self> {
        image.grid.check(&labels.grid)?;
        Ok(Self { image, labels })
    }

    pub fn grid(&self) -> Grid2D {
        self.image.grid
    }
}

/// `out(v) = image(v + u(v))`, bilinear, border-clamped.
pub fn warp_image(image: &Image, field: &DisplacementField) -> Result<Image> {
    image.grid.check(&field.grid)?;
    let g = image.grid;
    let data = (0..g.len())
        .map(|i| {
            let (x, y) = g.coords(i);
            let d = field.data[i];
            image.sample(x + d[0], y + d[1])
        })
        .collect();
    Ok(Image { grid: g, data })
}

/// Nearest-neighbour label warp; the output label set is a subset of the input's.
pub fn warp_labels(labels: &LabelMap, field: &DisplacementField) -> Result<LabelMap> {
    labels.grid.check(&field.grid)?;
    let g = labels.grid;
    let data = (0..g.len())
        .map(|i| {
            let (x, y) = g.coords(i);
            let d = field.data[i];
            labels.data[g.nearest(x + d[0], y + d[1])]
        })
        .collect();
    Ok(LabelMap { grid: g, data })
}

/// Displacement of `outer ∘ inner`: `u_i(v) + u_o(v + u_i(v))`.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    outer.grid.check(&inner.grid)?;
    let g = inner.grid;
    let data = (0..g.len())
        .map(|i| {
            let (x, y) = g.coords(i);
            let di = inner.data[i];
            let o = outer.sample(x + di[0], y + di[1]);
            [di[0] + o[0], di[1] + o[1]]
        })
        .collect();
    Ok(DisplacementField { grid: g, data })
}

/// Fixed-point inverse: `w(v) ← -u(v + w(v))`.
pub fn invert(field: &DisplacementField) -> Result<DisplacementField> {
    let (inv, residual) = invert_with_residual(field);
    if residual > INVERT_FAIL {
        return Err(Error::NotInvertible { residual });
    }
    Ok(inv)
}

/// Inverse together with the final max residual `|w(v) + u(v + w(v))|` in pixels.
pub fn invert_with_residual(field: &DisplacementField) -> (DisplacementField, f64) {
    let g = field.grid;
    let mut inv = DisplacementField::zeros(g);
    let residual_of = |inv: &DisplacementField| -> f64 {
        (0..g.len())
            .map(|i| {
                let (x, y) = g.coords(i);
                let w = inv.data[i];
                let u = field.sample(x + w[0], y + w[1]);
                (w[0] + u[0]).hypot(w[1] + u[1])
            })
            .fold(0.0, f64::max)
    };
    let mut residual = residual_of(&inv);
    for _ in 0..INVERT_MAX_ITERS {
        if residual < INVERT_TOL {
            break;
        }
        let data = (0..g.len())
            .map(|i| {
                let (x, y) = g.coords(i);
                let w = inv.data[i];
                let u = field.sample(x + w[0], y + w[1]);
                [-u[0], -u[1]]
            })
            .collect();
        inv = DisplacementField { grid: g, data };
        residual = residual_of(&inv);
    }
    if !inv.is_finite() {
        residual = f64::INFINITY;
    }
    (inv, residual)
}

/// PCA of the displacement vectors inside one atlas label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPca {
    pub label: u8,
    /// Pixel indices of the label, ascending.
    pub pixels: Vec<usize>,
    /// Mean displacement, interleaved (ux, uy) per pixel.
    pub mean: Vec<f64>,
    /// Orthonormal components, each of length `2 * pixels.len()`.
    pub basis: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub explained_variance_ratio: f64,
}

impl LabelPca {
    pub fn n_components(&self) -> usize {
        self.basis.len()
    }

    fn gather(&self, field: &DisplacementField) -> Vec<f64> {
        self.pixels
            .iter()
            .flat_map(|&p| field.data[p])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationModel {
    pub grid: Grid2D,
    pub labels: Vec<LabelPca>,
}

impl DeformationModel {
    pub fn n_components(&self) -> usize {
        self.labels.iter().map(LabelPca::n_components).sum()
    }

    pub fn mean_field(&self) -> DisplacementField {
        let mut f = DisplacementField::zeros(self.grid);
        for l in &self.labels {
            for (k, &p) in l.pixels.iter().enumerate() {
                f.data[p] = [l.mean[2 * k], l.mean[2 * k + 1]];
            }
        }
        f
    }
}

pub fn fit_pca(training: &[DisplacementField], atlas: &Atlas) -> Result<DeformationModel> {
    if training.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: training.len(),
        });
    }
    let grid = atlas.grid();
    for f in training {
        grid.check(&f.grid)?;
        if !f.is_finite() {
            return Err(Error::NonFiniteValue("training field has non-finite entries".into()));
        }
    }
    let labels = atlas
        .labels
        .labels()
        .into_iter()
        .map(|label| {
            let pixels: Vec<usize> = (0..grid.len())
                .filter(|&i| atlas.labels.data[i] == label)
                .collect();
            fit_label(label, pixels, training)
        })
        .collect();
    Ok(DeformationModel { grid, labels })
}

fn fit_label(label: u8, pixels: Vec<usize>, training: &[DisplacementField]) -> LabelPca {
    let n = training.len();
    let d = 2 * pixels.len();
    let mut x = DMatrix::zeros(n, d);
    for (s, f) in training.iter().enumerate() {
        for (k, &p) in pixels.iter().enumerate() {
            x[(s, 2 * k)] = f.data[p][0];
            x[(s, 2 * k + 1)] = f.data[p][1];
        }
    }
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
    for (j, &m) in mean.iter().enumerate() {
        x.column_mut(j).add_scalar_mut(-m);
    }
    let total: f64 = x.norm_squared();
    let scale: f64 = mean.iter().map(|m| m * m).sum::<f64>() * n as f64 + total;
    if total <= 1e-24 * scale.max(1e-300) || total == 0.0 {
        return LabelPca {
            label,
            pixels,
            mean,
            basis: Vec::new(),
            singular_values: Vec::new(),
            explained_variance_ratio: 1.0,
        };
    }
    let svd = x.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut basis = Vec::new();
    let mut singular_values = Vec::new();
    let mut captured = 0.0;
    for &k in &order {
        if captured >= VARIANCE_RETAINED * total {
            break;
        }
        let s = svd.singular_values[k];
        captured += s * s;
        let mut comp: Vec<f64> = v_t.row(k).iter().copied().collect();
        let pivot = comp
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, v)| {
                if v.abs() > bv.abs() {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .1;
        if pivot < 0.0 {
            comp.iter_mut().for_each(|v| *v = -*v);
        }
        basis.push(comp);
        singular_values.push(s);
    }
    LabelPca {
        label,
        pixels,
        mean,
        basis,
        singular_values,
        explained_variance_ratio: (captured / total).min(1.0),
    }
}

/// Concatenated per-label PCA coefficients of `field`.
pub fn encode(field: &DisplacementField, model: &DeformationModel) -> Result<Vec<f64>> {
    model.grid.check(&field.grid)?;
    let mut y = Vec::with_capacity(model.n_components());
    for l in &model.labels {
        let x = l.gather(field);
        for comp in &l.basis {
            y.push(
                comp.iter()
                    .zip(x.iter().zip(&l.mean))
                    .map(|(c, (x, m))| c * (x - m))
                    .sum(),
            );
        }
    }
    Ok(y)
}

pub fn decode(y: &[f64], model: &DeformationModel) -> Result<DisplacementField> {
    if y.len() != model.n_components() {
        return Err(Error::LengthMismatch {
            expected: model.n_components(),
            found: y.len(),
        });
    }
    let mut field = DisplacementField::zeros(model.grid);
    let mut offset = 0;
    for l in &model.labels {
        let coefs = &y[offset..offset + l.n_components()];
        offset += l.n_components();
        for (k, &p) in l.pixels.iter().enumerate() {
            let mut v = [l.mean[2 * k], l.mean[2 * k + 1]];
            for (c, comp) in coefs.iter().zip(&l.basis) {
                v[0] += c * comp[2 * k];
                v[1] += c * comp[2 * k + 1];
            }
            field.data[p] = v;
        }
    }
    Ok(field)
}

/// Predicted follow-up from a baseline image.
pub struct Synthesis {
    pub image: Image,
    /// Displacement from follow-up coordinates into the baseline image.
    pub baseline_to_followup: DisplacementField,
}

/// Follow-up image for phenotype `y_t`, given the baseline image and its
/// atlas-to-baseline field.
///
/// With `I_b(w) = A(w + u_b(w))` and `I_t(v) = A(v + u_t(v))`, the follow-up is
/// `I_t(v) = I_b(v + d(v))` where `d = compose(invert(u_b), u_t)`.
pub fn synthesize_followup(
    baseline_image: &Image,
    atlas_to_baseline: &DisplacementField,
    y_t: &[f64],
    model: &DeformationModel,
) -> Result<Synthesis> {
    let atlas_to_followup = decode(y_t, model)?;
    let baseline_inverse = invert(atlas_to_baseline)?;
    let d = compose(&baseline_inverse, &atlas_to_followup)?;
    Ok(Synthesis {
        image: warp_image(baseline_image, &d)?,
        baseline_to_followup: d,
    })
}

fn write_pgm_bytes(grid: Grid2D, pixels: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend(pixels);
    out
}

pub fn image_to_pgm(image: &Image) -> Vec<u8> {
    write_pgm_bytes(
        image.grid,
        image
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    )
}

pub fn labels_to_pgm(labels: &LabelMap) -> Vec<u8> {
    write_pgm_bytes(labels.grid, labels.data.iter().copied())
}

/// Reads a binary (P5, maxval ≤ 255) PGM into raw byte values.
pub fn read_pgm(bytes: &[u8]) -> Result<(Grid2D, Vec<u8>)> {
    let bad = |msg: &str| Error::InvalidRequest(format!("PGM: {msg}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("only binary P5 is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let maxval: usize = fields[3].parse().map_err(|_| bad("maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be in 1..=255"));
    }
    pos += 1;
    let grid = Grid2D::new(w, h)?;
    let data = bytes.get(pos..pos + grid.len()).ok_or_else(|| bad("truncated data"))?;
    Ok((grid, data.to_vec()))
}

pub fn read_image_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (grid, data) = read_pgm(&bytes)?;
    Ok(Image {
        grid,
        data: data.into_iter().map(|v| f64::from(v) / 255.0).collect(),
    })
}

pub fn read_labels_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (grid, data) = read_pgm(&bytes)?;
    Ok(LabelMap { grid, data })
}

pub fn read_field_csv(path: &Path, grid: Grid2D) -> Result<DisplacementField> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DisplacementField::from_csv(&text, grid).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn grid() -> Grid2D {
        Grid2D::new(24, 20).unwrap()
    }

    fn smooth_field(rng: &mut ChaCha8Rng, g: Grid2D, amp: f64) -> DisplacementField {
        let a: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0) * amp);
        let (w, h) = (g.width as f64, g.height as f64);
        DisplacementField::from_fn(g, |x, y| {
            let sx = (std::f64::consts::PI * x / w).sin();
            let sy = (std::f64::consts::PI * y / h).sin();
            let c = (2.0 * std::f64::consts::PI * (x + y) / (w + h)).cos();
            [a[0] * sx * sy + a[1] * c * sy, a[2] * sx * sy + a[3] * c * sx + a[4] * sy * sy + a[5] * 0.0]
        })
    }

    fn two_label_atlas(g: Grid2D) -> Atlas {
        let labels = LabelMap {
            grid: g,
            data: (0..g.len())
                .map(|i| if g.coords(i).0 < g.width as f64 / 2.0 { 1 } else { 2 })
                .collect(),
        };
        let image = Image {
            grid: g,
            data: (0..g.len()).map(|i| g.coords(i).0 / g.width as f64).collect(),
        };
        Atlas::new(image, labels).unwrap()
    }

    #[test]
    fn zero_field_warp_is_identity() {
        let g = grid();
        let atlas = two_label_atlas(g);
        let out = warp_image(&atlas.image, &DisplacementField::zeros(g)).unwrap();
        assert_eq!(out, atlas.image);
    }

    #[test]
    fn integer_shift_matches_index_arithmetic() {
        let g = grid();
        let img = Image {
            grid: g,
            data: (0..g.len()).map(|i| (i % 7) as f64 * 0.1).collect(),
        };
        let out = warp_image(&img, &DisplacementField::constant(g, [2.0, -1.0])).unwrap();
        for y in 0..g.height {
            for x in 0..g.width {
                let sx = (x + 2).min(g.width - 1);
                let sy = y.saturating_sub(1);
                assert_eq!(out.data[g.index(x, y)], img.data[g.index(sx, sy)]);
            }
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = smooth_field(&mut rng, g, 3.0);
        let out = warp_image(&Image::constant(g, 0.37), &f).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.37));
    }

    #[test]
    fn label_warp_preserves_label_set() {
        let g = grid();
        let atlas = two_label_atlas(g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = smooth_field(&mut rng, g, 4.0);
        let out = warp_labels(&atlas.labels, &f).unwrap();
        let orig = atlas.labels.labels();
        assert!(out.labels().iter().all(|l| orig.contains(l)));
    }

    #[test]
    fn compose_identity_and_shifts() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = smooth_field(&mut rng, g, 1.5);
        let zero = DisplacementField::zeros(g);
        assert_eq!(compose(&zero, &f).unwrap(), f);
        assert_eq!(compose(&f, &zero).unwrap(), f);
        let a = DisplacementField::constant(g, [0.5, -1.25]);
        let b = DisplacementField::constant(g, [2.0, 0.75]);
        let ab = compose(&b, &a).unwrap();
        assert!(ab.data.iter().all(|d| *d == [2.5, -0.5]));
    }

    #[test]
    fn inversion_examples() {
        let g = grid();
        assert_eq!(invert(&DisplacementField::zeros(g)).unwrap(), DisplacementField::zeros(g));
        let inv = invert(&DisplacementField::constant(g, [1.0, -2.0])).unwrap();
        // clamping makes the border rows differ; the interior is exact
        for y in 3..g.height - 3 {
            for x in 3..g.width - 3 {
                assert_eq!(inv.data[g.index(x, y)], [-1.0, 2.0]);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let f = smooth_field(&mut rng, g, 1.0);
            let back = compose(&invert(&f).unwrap(), &f).unwrap();
            assert!(back.max_norm() < 0.1, "residual {}", back.max_norm());
        }
    }

    #[test]
    fn folding_field_is_not_invertible() {
        let g = grid();
        // |∂u/∂x| reaches π, so the map folds onto itself
        let f = DisplacementField::from_fn(g, |x, _| [4.0 * (std::f64::consts::PI * x / 4.0).sin(), 0.0]);
        assert!(matches!(invert(&f), Err(Error::NotInvertible { .. })));
    }

    #[test]
    fn pca_of_identical_fields_is_mean_only() {
        let g = grid();
        let atlas = two_label_atlas(g);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = smooth_field(&mut rng, g, 1.0);
        let model = fit_pca(&[f.clone(), f.clone(), f.clone()], &atlas).unwrap();
        assert!(model.labels.iter().all(|l| l.n_components() == 0));
        let diff = model.mean_field().sub(&f);
        assert!(diff.max_norm() < 1e-15);
        assert!(matches!(
            fit_pca(&[f], &atlas),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn rank_one_fields_need_one_component() {
        let g = grid();
        let atlas = two_label_atlas(g);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mean = smooth_field(&mut rng, g, 1.0);
        let pattern = smooth_field(&mut rng, g, 1.0);
        let fields: Vec<_> = [1.0, -1.0, 0.5]
            .iter()
            .map(|&s| DisplacementField {
                grid: g,
                data: mean
                    .data
                    .iter()
                    .zip(&pattern.data)
                    .map(|(m, p)| [m[0] + s * p[0], m[1] + s * p[1]])
                    .collect(),
            })
            .collect();
        let model = fit_pca(&fields, &atlas).unwrap();
        for l in &model.labels {
            assert_eq!(l.n_components(), 1);
            assert!((l.explained_variance_ratio - 1.0).abs() < 1e-12);
            let pivot = l.basis[0].iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn projection_residual_is_orthogonal() {
        let g = grid();
        let atlas = two_label_atlas(g);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fields: Vec<_> = (0..6).map(|_| smooth_field(&mut rng, g, 1.0)).collect();
        let model = fit_pca(&fields, &atlas).unwrap();
        let outside = DisplacementField::from_fn(g, |x, y| {
            [rng_free(x, y), rng_free(y, x)]
        });
        let y = encode(&outside, &model).unwrap();
        let recon = decode(&y, &model).unwrap();
        let resid = outside.sub(&recon);
        for l in &model.labels {
            let r = l.gather(&resid);
            for comp in &l.basis {
                let dot: f64 = comp.iter().zip(&r).map(|(a, b)| a * b).sum();
                assert!(dot.abs() < 1e-10, "residual not orthogonal: {dot}");
            }
        }
        assert!(encode(&model.mean_field(), &model).unwrap().iter().all(|v| v.abs() < 1e-12));
        assert_eq!(decode(&vec![0.0; model.n_components()], &model).unwrap(), model.mean_field());
    }

    fn rng_free(a: f64, b: f64) -> f64 {
        ((a * 12.9898 + b * 78.233).sin() * 43758.5453).fract()
    }

    #[test]
    fn decoded_energy_matches_coefficients() {
        let g = grid();
        let atlas = two_label_atlas(g);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fields: Vec<_> = (0..8).map(|_| smooth_field(&mut rng, g, 1.0)).collect();
        let model = fit_pca(&fields, &atlas).unwrap();
        let y: Vec<f64> = (0..model.n_components())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let centered = decode(&y, &model).unwrap().sub(&model.mean_field());
        let norm: f64 = y.iter().map(|v| v * v).sum();
        assert!((centered.energy() - norm).abs() < 1e-10 * norm.max(1.0));
    }

    #[test]
    fn pgm_and_csv_round_trip() {
        let g = grid();
        let atlas = two_label_atlas(g);
        let (g2, bytes) = read_pgm(&labels_to_pgm(&atlas.labels)).unwrap();
        assert_eq!(g2, g);
        assert_eq!(bytes, atlas.labels.data);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = smooth_field(&mut rng, g, 1.0);
        assert_eq!(DisplacementField::from_csv(&f.to_csv(), g).unwrap(), f);
    }
}
