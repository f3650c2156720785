//! Simulation scenarios with their analytic conditional quantiles, CSV
//! ingestion and seeded index splits.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{NoiseLaw, Rng};

/// `y = g(x) + s(x)·ε` with `x ~ U[0,1]^d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
    S3,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::S1, Scenario::S2, Scenario::S3];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::S1 => "S1",
            Scenario::S2 => "S2",
            Scenario::S3 => "S3",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Scenario::S1 => 2,
            Scenario::S2 | Scenario::S3 => 5,
        }
    }

    pub fn noise_law(self) -> NoiseLaw {
        match self {
            Scenario::S1 => NoiseLaw::StudentT { dof: 2 },
            Scenario::S2 => NoiseLaw::StudentT { dof: 3 },
            Scenario::S3 => NoiseLaw::Laplace { scale: 2.0 },
        }
    }

    /// Mean function `g`. `z` must have `dim()` entries.
    pub fn mean(self, z: &[f64]) -> f64 {
        match self {
            Scenario::S1 => {
                (2.0 * PI * z[0] * z[0]).cos() + ((z[0] * z[0] + 2.0 * z[1]).sqrt() + 2.0).sin()
            }
            Scenario::S2 => (z[0] + 2.0 * z[1] + z[2] + 2.0 * z[3] + z[4]).sqrt(),
            Scenario::S3 => {
                let w1 = z[0] + 3.0 * z[1];
                let w2 = (2.0 * PI * (z[2] + z[3])).cos();
                let w3 = z[1] + z[2].sqrt() + 2.0 * z[4];
                if w2 < 0.0 {
                    w1 + (w2 * w2 + w3).max(0.0).sqrt()
                } else {
                    // w1 ≥ 0 and w2 ≥ 0 on the unit cube, so the clamp only
                    // matters for inputs outside it.
                    (w1 + w2).max(0.0).sqrt() + 0.5 * w3
                }
            }
        }
    }

    /// Noise scale `s(x)`.
    pub fn noise_scale(self, z: &[f64]) -> f64 {
        match self {
            Scenario::S1 => ((z[0] - 1.0).powi(2) + z[1] * z[1]).sqrt() / 2.0,
            Scenario::S2 => (0.5 * (z[0] + z[2] + z[4])).sqrt(),
            Scenario::S3 => 1.0,
        }
    }

    /// Response at `z` for a given standardized noise draw.
    pub fn respond(self, z: &[f64], noise: f64) -> f64 {
        self.mean(z) + self.noise_scale(z) * noise
    }

    fn check_point(self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::Shape(format!(
                "{} expects {} coordinates, got {}",
                self.name(),
                self.dim(),
                z.len()
            )));
        }
        if z.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "{} oracle is defined on [0,1]^{}, got {z:?}",
                self.name(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `f*_τ(x) = g(x) + s(x)·Q_ε(τ)`.
    pub fn true_quantile(self, z: &[f64], tau: f64) -> Result<f64> {
        self.check_point(z)?;
        let q = self.noise_law().quantile(tau)?;
        Ok(self.mean(z) + self.noise_scale(z) * q)
    }

    /// True quantiles for every row of `x`.
    pub fn true_quantiles(self, x: &Array2<f64>, tau: f64) -> Result<Vec<f64>> {
        let q = self.noise_law().quantile(tau)?;
        x.axis_iter(Axis(0))
            .map(|row| {
                let z = row.to_vec();
                self.check_point(&z)?;
                Ok(self.mean(&z) + self.noise_scale(&z) * q)
            })
            .collect()
    }

    pub fn generate(self, n: usize, seed: u64) -> Result<Dataset> {
        let mut rng = Rng::new(seed);
        let mut data = self.generate_with(&mut rng, n)?;
        data.provenance = format!("{}:seed={seed}", self.name());
        Ok(data)
    }

    /// Draws `n` rows from `rng`: all covariates first, then all noise.
    pub fn generate_with(self, rng: &mut Rng, n: usize) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample size must be at least 1".into()));
        }
        let d = self.dim();
        let x = Array2::from_shape_simple_fn((n, d), || rng.uniform());
        let law = self.noise_law();
        let y: Array1<f64> = x
            .axis_iter(Axis(0))
            .map(|row| {
                let z = row.as_slice().expect("row-major design matrix");
                self.respond(z, law.draw(rng))
            })
            .collect();
        Ok(Dataset {
            x,
            y,
            provenance: format!("{}:key={}", self.name(), rng.key()),
        })
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Scenario::S1),
            "S2" => Ok(Scenario::S2),
            "S3" => Ok(Scenario::S3),
            other => Err(Error::InvalidArgument(format!("unknown scenario `{other}`"))),
        }
    }
}

pub fn generate(scenario: Scenario, n: usize, seed: u64) -> Result<Dataset> {
    scenario.generate(n, seed)
}

pub fn true_quantile(scenario: Scenario, x: &[f64], tau: f64) -> Result<f64> {
    scenario.true_quantile(x, tau)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `n × d`, row-major.
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>, provenance: impl Into<String>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Shape(format!(
                "{} design rows but {} responses",
                x.nrows(),
                y.len()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset entries".into()));
        }
        Ok(Self {
            x: x.as_standard_layout().into_owned(),
            y,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), indices),
            y: self.y.select(Axis(0), indices),
            provenance: self.provenance.clone(),
        }
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }

    /// Header `x1,…,xd,y`; values in shortest round-trip form.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.write_csv_annotated(path, &[])
    }

    /// As [`Dataset::write_csv`], preceded by `# ` comment lines.
    pub fn write_csv_annotated(&self, path: &Path, comments: &[String]) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for c in comments {
            writeln!(file, "# {c}").map_err(|e| Error::io(path, e))?;
        }
        let mut w = csv::Writer::from_writer(file);
        let mut header: Vec<String> = (1..=self.dim()).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for (row, y) in self.x.axis_iter(Axis(0)).zip(self.y.iter()) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// What [`load_csv`] discarded.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub dropped_by_filter: usize,
    pub dropped_non_numeric: usize,
}

/// `column=value`, string equality on the raw cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowFilter {
    pub column: String,
    pub value: String,
}

impl std::str::FromStr for RowFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('=') {
            Some((c, v)) if !c.is_empty() => Ok(RowFilter {
                column: c.trim().to_string(),
                value: v.trim().to_string(),
            }),
            _ => Err(Error::InvalidArgument(format!(
                "row filter must look like column=value, got `{s}`"
            ))),
        }
    }
}

/// Reads numeric features and a target from a headered CSV file.
pub fn load_csv(
    path: &Path,
    feature_cols: &[String],
    target_col: &str,
    row_filter: Option<&RowFilter>,
) -> Result<(Dataset, LoadReport)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("column `{name}` not found in {}", path.display())))
    };
    let feature_idx = feature_cols
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let target_idx = find(target_col)?;
    let filter_idx = row_filter.map(|f| find(&f.column)).transpose()?;

    let mut report = LoadReport::default();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for record in reader.records() {
        let record = record?;
        report.rows_read += 1;
        if let (Some(i), Some(f)) = (filter_idx, row_filter) {
            if record.get(i).map(str::trim) != Some(f.value.as_str()) {
                report.dropped_by_filter += 1;
                continue;
            }
        }
        let parse = |i: usize| -> Option<f64> {
            record
                .get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
        };
        let row: Option<Vec<f64>> = feature_idx.iter().map(|&i| parse(i)).collect();
        match (row, parse(target_idx)) {
            (Some(row), Some(y)) => {
                xs.extend(row);
                ys.push(y);
            }
            _ => report.dropped_non_numeric += 1,
        }
    }
    if ys.is_empty() {
        return Err(Error::Data(format!(
            "no usable rows in {} ({} read)",
            path.display(),
            report.rows_read
        )));
    }
    let x = Array2::from_shape_vec((ys.len(), feature_idx.len()), xs)
        .map_err(|e| Error::Data(e.to_string()))?;
    let provenance = match row_filter {
        Some(f) => format!("{}:{}={}", path.display(), f.column, f.value),
        None => path.display().to_string(),
    };
    Ok((Dataset::new(x, Array1::from(ys), provenance)?, report))
}

/// Per-column affine standardization fitted on one subset and applied to others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Self {
        let n = data.len() as f64;
        let mean: Vec<f64> = data.x.axis_iter(Axis(1)).map(|c| c.sum() / n).collect();
        let std = data
            .x
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(c, m)| {
                let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                let s = var.sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        for (mut col, (m, s)) in out
            .x
            .axis_iter_mut(Axis(1))
            .zip(self.mean.iter().zip(&self.std))
        {
            col.mapv_inplace(|v| (v - m) / s);
        }
        out
    }
}

/// Held-out fractions of a split; the training part receives the remainder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub held_out: Vec<f64>,
}

impl SplitSpec {
    pub fn validation(fraction: f64) -> Self {
        Self {
            held_out: vec![fraction],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partitions {
    pub train: Vec<usize>,
    pub held_out: Vec<Vec<usize>>,
}

/// Seeded shuffle of `0..n` cut into `round(n·fᵢ)`-sized held-out parts.
pub fn split(n: usize, spec: &SplitSpec, seed: u64) -> Result<Partitions> {
    split_with(n, spec, &mut Rng::new(seed))
}

pub fn split_with(n: usize, spec: &SplitSpec, rng: &mut Rng) -> Result<Partitions> {
    let total: f64 = spec.held_out.iter().sum();
    if spec.held_out.iter().any(|f| !(*f > 0.0)) || total > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be positive and sum to at most 1, got {:?}",
            spec.held_out
        )));
    }
    let sizes: Vec<usize> = spec
        .held_out
        .iter()
        .map(|f| (f * n as f64).round() as usize)
        .collect();
    let used: usize = sizes.iter().sum();
    if sizes.contains(&0) || used >= n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} rows into non-empty parts {:?} plus training",
            spec.held_out
        )));
    }
    let perm = rng.permutation(n);
    let mut start = n - used;
    let train = perm[..start].to_vec();
    let held_out = sizes
        .iter()
        .map(|&s| {
            let part = perm[start..start + s].to_vec();
            start += s;
            part
        })
        .collect();
    Ok(Partitions { train, held_out })
}

#[cfg(test)]
mod tests {


    use super::*;

    #[test]
    fn generation_is_reproducible() {
        assert!(Scenario::S1.generate(0, 1).is_err());
        let a = Scenario::S1.generate(1, 42).unwrap();
        let b = Scenario::S1.generate(1, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 2);
        assert!(a.x.iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn s1_noise_vanishes_at_corner() {
        let z = [1.0, 0.0];
        assert_eq!(Scenario::S1.noise_scale(&z), 0.0);
        assert_eq!(Scenario::S1.respond(&z, 123.0), Scenario::S1.mean(&z));
    }

    #[test]
    fn true_quantile_examples() {
        let expected = 1.0 + 3f64.sin();
        for tau in [0.05, 0.5, 0.95] {
            let q = Scenario::S1.true_quantile(&[1.0, 0.0], tau).unwrap();
            assert!((q - expected).abs() < 1e-12);
        }
        assert!((expected - 1.14112).abs() < 1e-5);

        let z = [0.3, 0.1, 0.8, 0.4, 0.6];
        assert_eq!(Scenario::S3.true_quantile(&z, 0.5).unwrap(), Scenario::S3.mean(&z));

        let q = Scenario::S2.true_quantile(&[1.0; 5], 0.95).unwrap();
        assert!((q - 5.5281).abs() < 1e-3, "{q}");
    }

    #[test]
    fn oracle_rejects_bad_points() {
        assert!(Scenario::S2.true_quantile(&[0.5; 4], 0.5).is_err());
        assert!(Scenario::S2.true_quantile(&[1.5, 0.0, 0.0, 0.0, 0.0], 0.5).is_err());
        assert!(Scenario::S1.true_quantile(&[0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn s3_radicands_nonnegative_on_cube() {
        let mut rng = Rng::new(1);
        for _ in 0..10_000 {
            let z: Vec<f64> = (0..5).map(|_| rng.uniform()).collect();
            let w1 = z[0] + 3.0 * z[1];
            let w2 = (2.0 * PI * (z[2] + z[3])).cos();
            let w3 = z[1] + z[2].sqrt() + 2.0 * z[4];
            assert!(if w2 < 0.0 { w2 * w2 + w3 >= 0.0 } else { w1 + w2 >= 0.0 });
        }
    }

    #[test]
    fn split_examples() {
        let p = split(10, &SplitSpec::validation(0.1), 0).unwrap();
        assert_eq!((p.train.len(), p.held_out[0].len()), (9, 1));

        let spec = SplitSpec::validation(0.2);
        let a = split(100, &spec, 5).unwrap();
        assert_eq!(a, split(100, &spec, 5).unwrap());
        assert_eq!((a.train.len(), a.held_out[0].len()), (80, 20));

        assert!(split(3, &SplitSpec::validation(0.1), 0).is_err());
        assert!(split(10, &SplitSpec { held_out: vec![0.6, 0.5] }, 0).is_err());
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::File::create(&path)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        path
    }

    #[test]
    fn csv_filter_and_drop_policy() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "a.csv",
            "age,sex,bmi\n30,M,22.5\n41,F,27.0\n52,M,24.1\n",
        );
        let filter: RowFilter = "sex=M".parse().unwrap();
        let (data, report) =
            load_csv(&path, &["age".into()], "bmi", Some(&filter)).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(report.dropped_by_filter, 1);

        let path = write(&dir, "b.csv", "a,b\n1,2\nx,3\n4,5\n");
        let (data, report) = load_csv(&path, &["a".into()], "b", None).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(report.dropped_non_numeric, 1);

        assert!(load_csv(&path, &["zzz".into()], "b", None).is_err());
        assert!(load_csv(&dir.path().join("missing.csv"), &["a".into()], "b", None).is_err());
        let path = write(&dir, "c.csv", "a,b\nx,1\n");
        assert!(load_csv(&path, &["a".into()], "b", None).is_err());
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let data = Scenario::S1.generate(200, 3).unwrap();
        let path = dir.path().join("s1.csv");
        data.write_csv(&path).unwrap();
        let (back, _) = load_csv(&path, &["x1".into(), "x2".into()], "y", None).unwrap();
        assert_eq!(back.x, data.x);
        assert_eq!(back.y, data.y);
    }

    #[test]
    fn standardizer_centers_training_columns() {
        let data = Scenario::S2.generate(500, 8).unwrap();
        let st = Standardizer::fit(&data);
        let out = st.apply(&data);
        for col in out.x.axis_iter(Axis(1)) {
            assert!(col.mean().unwrap().abs() < 1e-12);
        }
        assert_eq!(out.y, data.y);
    }
}
