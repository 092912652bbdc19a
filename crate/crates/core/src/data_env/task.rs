//! Synthetic Gaussian-class tasks and their datasets.

use super::TaskError;
use crate::config::FlatConfig;
use crate::rng::{self, Rng};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// One complete feature vector with its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub x: Vec<f64>,
    pub y: usize,
}

/// An immutable table of instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    rows: Vec<Instance>,
}

impl Dataset {
    pub fn new(dim: usize, rows: Vec<Instance>) -> Result<Self, TaskError> {
        for (i, r) in rows.iter().enumerate() {
            if r.x.len() != dim {
                return Err(TaskError::Shape(format!(
                    "row {i} has {} features, expected {dim}",
                    r.x.len()
                )));
            }
        }
        Ok(Dataset { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Instance] {
        &self.rows
    }

    pub fn get(&self, i: usize) -> &Instance {
        &self.rows[i]
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> Dataset {
        Dataset { dim: self.dim, rows: self.rows[..n.min(self.rows.len())].to_vec() }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TaskError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("f{i}")).collect();
        header.push("y".into());
        wr.write_record(&header)?;
        for r in &self.rows {
            let mut rec: Vec<String> = r.x.iter().map(|v| v.to_string()).collect();
            rec.push(r.y.to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, TaskError> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let n = header.len();
        if n < 2 || &header[n - 1] != "y" {
            return Err(TaskError::Shape("dataset header must be f0,...,f{d-1},y".into()));
        }
        for (i, h) in header.iter().take(n - 1).enumerate() {
            if h != format!("f{i}") {
                return Err(TaskError::Shape(format!("column {i} is `{h}`, expected `f{i}`")));
            }
        }
        let dim = n - 1;
        let mut rows = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| -> Result<f64, TaskError> {
                s.trim().parse::<f64>().map_err(|e| {
                    TaskError::Shape(format!("data row {}: bad value `{s}`: {e}", line + 1))
                })
            };
            let x = (0..dim).map(|i| parse(&rec[i])).collect::<Result<Vec<_>, _>>()?;
            let y = rec[dim].trim().parse::<usize>().map_err(|e| {
                TaskError::Shape(format!("data row {}: bad label `{}`: {e}", line + 1, &rec[dim]))
            })?;
            rows.push(Instance { x, y });
        }
        Dataset::new(dim, rows)
    }

    pub fn save(&self, path: &Path) -> Result<(), TaskError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self, TaskError> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// Gaussian class-conditional task: `y ~ priors`, `x | y ~ N(mean_y, cov_y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    dim: usize,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    cholesky: Vec<DMatrix<f64>>,
    priors: Vec<f64>,
    seed: u64,
    informative: Vec<usize>,
    noise: Vec<usize>,
}

impl SyntheticTaskSpec {
    pub fn new(
        means: Vec<Vec<f64>>,
        covariances: Vec<DMatrix<f64>>,
        priors: Vec<f64>,
        seed: u64,
    ) -> Result<Self, TaskError> {
        let classes = means.len();
        if classes == 0 {
            return Err(TaskError::Shape("at least one class is required".into()));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(TaskError::Shape("dimension must be positive".into()));
        }
        if priors.len() != classes {
            return Err(TaskError::Priors(format!("{} priors for {classes} classes", priors.len())));
        }
        if priors.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(TaskError::Priors("priors must be finite and nonnegative".into()));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(TaskError::Priors(format!("priors sum to {total}, not 1")));
        }
        let covariances = match covariances.len() {
            1 if classes > 1 => vec![covariances[0].clone(); classes],
            n if n == classes => covariances,
            n => {
                return Err(TaskError::Shape(format!("{n} covariances for {classes} classes")));
            }
        };
        let mut mvecs = Vec::with_capacity(classes);
        let mut chol = Vec::with_capacity(classes);
        for (c, (m, s)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != dim {
                return Err(TaskError::Shape(format!("class {c} mean has length {}, expected {dim}", m.len())));
            }
            if s.nrows() != dim || s.ncols() != dim {
                return Err(TaskError::Shape(format!(
                    "class {c} covariance is {}x{}, expected {dim}x{dim}",
                    s.nrows(),
                    s.ncols()
                )));
            }
            let scale = s.amax().max(1.0);
            for i in 0..dim {
                for j in 0..i {
                    if (s[(i, j)] - s[(j, i)]).abs() > 1e-10 * scale {
                        return Err(TaskError::NotSymmetric { class: c });
                    }
                }
            }
            let l = nalgebra::Cholesky::new(s.clone())
                .ok_or(TaskError::NotPositiveDefinite { class: c })?;
            chol.push(l.l());
            mvecs.push(DVector::from_vec(m.clone()));
        }
        let (informative, noise) = split_dimensions(&mvecs, &covariances);
        Ok(SyntheticTaskSpec {
            dim,
            means: mvecs,
            covariances,
            cholesky: chol,
            priors,
            seed,
            informative,
            noise,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn mean(&self, c: usize) -> &DVector<f64> {
        &self.means[c]
    }

    pub fn covariance(&self, c: usize) -> &DMatrix<f64> {
        &self.covariances[c]
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Dimensions whose distribution depends on the class, directly or through correlation.
    pub fn informative_dims(&self) -> &[usize] {
        &self.informative
    }

    /// Dimensions independent of the label and of every informative dimension.
    pub fn noise_dims(&self) -> &[usize] {
        &self.noise
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.seed = seed;
        s
    }

    /// Per-dimension standard deviation of the mixture marginal.
    pub fn marginal_std(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for c in 0..self.classes() {
                    let mu = self.means[c][i];
                    m1 += self.priors[c] * mu;
                    m2 += self.priors[c] * (self.covariances[c][(i, i)] + mu * mu);
                }
                (m2 - m1 * m1).max(0.0).sqrt()
            })
            .collect()
    }

    /// Same task with every class mean moved by `shift`.
    pub fn shifted(&self, shift: &[f64]) -> Result<Self, TaskError> {
        if shift.len() != self.dim {
            return Err(TaskError::Shape("shift length must equal d".into()));
        }
        let means = self
            .means
            .iter()
            .map(|m| m.iter().zip(shift).map(|(a, b)| a + b).collect())
            .collect();
        SyntheticTaskSpec::new(means, self.covariances.clone(), self.priors.clone(), self.seed)
    }

    /// Draw `n` instances (class first, then the class Gaussian).
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Dataset {
        let mut rows = Vec::with_capacity(n);
        let mut z = DVector::zeros(self.dim);
        for _ in 0..n {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut y = self.classes() - 1;
            for (c, &p) in self.priors.iter().enumerate() {
                acc += p;
                if u < acc {
                    y = c;
                    break;
                }
            }
            for v in z.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let x = &self.means[y] + &self.cholesky[y] * &z;
            rows.push(Instance { x: x.iter().copied().collect(), y });
        }
        Dataset { dim: self.dim, rows }
    }

    /// Train/validation/test splits, each from its own seed stream.
    pub fn generate(
        &self,
        n_train: usize,
        n_val: usize,
        n_test: usize,
    ) -> Result<(Dataset, Dataset, Dataset), TaskError> {
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return Err(TaskError::Shape("split sizes must be positive".into()));
        }
        let train = self.sample(n_train, &mut rng::stream(self.seed, "data/train", 0));
        let val = self.sample(n_val, &mut rng::stream(self.seed, "data/val", 0));
        let test = self.sample(n_test, &mut rng::stream(self.seed, "data/test", 0));
        Ok((train, val, test))
    }

    /// Parse the task keys `d`, `classes`, `means`, `cov`, `priors`, `seed`.
    ///
    /// `means` lists class vectors separated by `;`. `cov` is `identity`,
    /// `ar1:<rho>`, `diag:<v0,..>`, one matrix (rows separated by `;`) shared
    /// by all classes, or one matrix per class separated by `|`. `priors`
    /// is `uniform` or a comma list.
    pub fn from_config(cfg: &FlatConfig) -> Result<Self, TaskError> {
        let dim: usize = cfg.require("d")?;
        let classes: usize = cfg.require("classes")?;
        if dim == 0 || classes == 0 {
            return Err(cfg.invalid("d", "d and classes must be positive").into());
        }
        let means_raw = cfg.require_str("means")?;
        let means: Vec<Vec<f64>> = means_raw
            .split(';')
            .map(|row| parse_row(row).map_err(|e| cfg.invalid("means", e)))
            .collect::<Result<_, _>>()?;
        if means.len() != classes {
            return Err(cfg
                .invalid("means", format!("{} mean vectors for {classes} classes", means.len()))
                .into());
        }
        if let Some(bad) = means.iter().position(|m| m.len() != dim) {
            return Err(cfg.invalid("means", format!("class {bad} mean does not have d={dim} entries")).into());
        }
        let cov_raw = cfg.raw("cov").unwrap_or("identity").trim();
        let covariances = parse_covariances(cov_raw, dim).map_err(|e| cfg.invalid("cov", e))?;
        let priors = match cfg.raw("priors").map(str::trim) {
            None | Some("uniform") => vec![1.0 / classes as f64; classes],
            Some(p) => parse_row(p).map_err(|e| cfg.invalid("priors", e))?,
        };
        let seed: u64 = cfg.get_or("seed", 0)?;
        SyntheticTaskSpec::new(means, covariances, priors, seed)
    }

    /// Render as config text accepted by [`SyntheticTaskSpec::from_config`].
    pub fn to_config_text(&self) -> String {
        let fmt_row = |v: &mut dyn Iterator<Item = f64>| {
            v.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let means = self
            .means
            .iter()
            .map(|m| fmt_row(&mut m.iter().copied()))
            .collect::<Vec<_>>()
            .join("; ");
        let cov = self
            .covariances
            .iter()
            .map(|s| {
                (0..self.dim)
                    .map(|i| fmt_row(&mut s.row(i).iter().copied()))
                    .collect::<Vec<_>>()
                    .join(";")
            })
            .collect::<Vec<_>>()
            .join(" | ");
        format!(
            "d = {}\nclasses = {}\nmeans = {}\ncov = {}\npriors = {}\nseed = {}\n",
            self.dim,
            self.classes(),
            means,
            cov,
            fmt_row(&mut self.priors.iter().copied()),
            self.seed
        )
    }
}

fn parse_row(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect()
}

fn parse_matrix(s: &str, dim: usize) -> Result<DMatrix<f64>, String> {
    let rows: Vec<Vec<f64>> = s.split(';').map(parse_row).collect::<Result<_, _>>()?;
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(format!("matrix must be {dim}x{dim}"));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

fn parse_covariances(s: &str, dim: usize) -> Result<Vec<DMatrix<f64>>, String> {
    if s == "identity" {
        return Ok(vec![DMatrix::identity(dim, dim)]);
    }
    if let Some(rho) = s.strip_prefix("ar1:") {
        let rho: f64 = rho.trim().parse().map_err(|e| format!("ar1 coefficient: {e}"))?;
        return Ok(vec![ar1_covariance(dim, rho)]);
    }
    if let Some(d) = s.strip_prefix("diag:") {
        let v = parse_row(d)?;
        if v.len() != dim {
            return Err(format!("diag needs {dim} entries"));
        }
        return Ok(vec![DMatrix::from_diagonal(&DVector::from_vec(v))]);
    }
    s.split('|').map(|m| parse_matrix(m.trim(), dim)).collect()
}

/// `Σ_ij = rho^|i-j|`
pub fn ar1_covariance(dim: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

/// Informative dims: those whose mean or variance varies by class, closed under
/// nonzero within-class correlation with an informative dim.
fn split_dimensions(means: &[DVector<f64>], covs: &[DMatrix<f64>]) -> (Vec<usize>, Vec<usize>) {
    let dim = means[0].len();
    let mut informative = vec![false; dim];
    for i in 0..dim {
        let varies = means.iter().any(|m| m[i] != means[0][i])
            || covs.iter().any(|s| (0..dim).any(|j| s[(i, j)] != covs[0][(i, j)]));
        informative[i] = varies;
    }
    loop {
        let mut changed = false;
        for i in 0..dim {
            if informative[i] {
                continue;
            }
            if (0..dim).any(|j| informative[j] && covs.iter().any(|s| s[(i, j)] != 0.0)) {
                informative[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let inf = (0..dim).filter(|&i| informative[i]).collect();
    let noise = (0..dim).filter(|&i| !informative[i]).collect();
    (inf, noise)
}
