//! Per-class Gaussian mixtures over classification logits.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ClassId;
use crate::error::{io_err, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Full-covariance mixture. Covariances are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
}

struct Component {
    weight_ln: f64,
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
    log_det: f64,
}

impl GaussianMixture {
    fn components(&self) -> Result<Vec<Component>> {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.covariances)
            .map(|((&w, m), c)| {
                let cov = DMatrix::from_row_slice(self.dim, self.dim, c);
                let chol = cov.cholesky().ok_or_else(|| {
                    Error::Config("mixture covariance is not positive definite".into())
                })?;
                let l = chol.l();
                let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
                Ok(Component {
                    weight_ln: w.ln(),
                    mean: DVector::from_column_slice(m),
                    chol_l: l,
                    log_det,
                })
            })
            .collect()
    }

    fn component_log_terms(comps: &[Component], x: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(x);
        comps
            .iter()
            .map(|c| {
                let diff = &x - &c.mean;
                let z = c
                    .chol_l
                    .solve_lower_triangular(&diff)
                    .expect("cholesky factor has a positive diagonal");
                let d = diff.len() as f64;
                c.weight_ln - 0.5 * (d * LN_2PI + c.log_det + z.norm_squared())
            })
            .collect()
    }

    /// Log-density of `x` under the mixture.
    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        match self.components() {
            Ok(c) => log_sum_exp(&Self::component_log_terms(&c, x)),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Posterior component probabilities of `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let comps = self
            .components()
            .expect("fitted mixture is positive definite");
        let t = Self::component_log_terms(&comps, x);
        let z = log_sum_exp(&t);
        t.iter().map(|v| (v - z).exp()).collect()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub components: usize,
    pub min_samples: usize,
    pub covariance_floor: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 1,
            min_samples: 5,
            covariance_floor: 1e-6,
            max_iter: 200,
            seed: 0,
        }
    }
}

impl GmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.components) {
            return Err(Error::Config("gmm.components must be in 1..=4".into()));
        }
        if self.min_samples < self.components || !(self.covariance_floor > 0.0) {
            return Err(Error::Config(
                "gmm.min_samples must be >= components and covariance_floor > 0".into(),
            ));
        }
        Ok(())
    }
}

fn weighted_gaussian(samples: &[Vec<f64>], resp: &[f64], floor: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let d = samples[0].len();
    let nk: f64 = resp.iter().sum::<f64>().max(1e-300);
    let mut mean = vec![0.0; d];
    for (x, &r) in samples.iter().zip(resp) {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += r * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nk);
    let mut cov = vec![0.0; d * d];
    for (x, &r) in samples.iter().zip(resp) {
        for i in 0..d {
            let di = x[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += r * di * (x[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= nk);
    for i in 0..d {
        cov[i * d + i] += floor;
    }
    (nk, mean, cov)
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by a few Lloyd iterations.
fn kmeans_init(samples: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = samples.len();
    let mut centers = vec![samples[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d: Vec<f64> = samples
            .iter()
            .map(|x| {
                centers
                    .iter()
                    .map(|c| dist_sq(x, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, v) in d.iter().enumerate() {
                if u < *v {
                    pick = i;
                    break;
                }
                u -= v;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(samples[idx].clone());
    }
    let mut assign = vec![0; n];
    for _ in 0..20 {
        for (a, x) in assign.iter_mut().zip(samples) {
            *a = (0..k)
                .min_by(|&i, &j| dist_sq(x, &centers[i]).total_cmp(&dist_sq(x, &centers[j])))
                .expect("k >= 1");
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = samples
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(x, _)| x)
                .collect();
            if members.is_empty() {
                continue;
            }
            for (i, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[i]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    assign
}

/// Fits a mixture with EM, deterministic given `cfg.seed`.
pub fn fit_mixture(samples: &[Vec<f64>], cfg: &GmmConfig) -> Result<GaussianMixture> {
    cfg.validate()?;
    if samples.len() < cfg.min_samples.max(1) {
        return Err(Error::Config(format!(
            "{} samples, at least {} required",
            samples.len(),
            cfg.min_samples
        )));
    }
    let d = samples[0].len();
    if d == 0
        || samples
            .iter()
            .any(|s| s.len() != d || s.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Shape(
            "mixture samples must share a positive dimension and be finite".into(),
        ));
    }
    let n = samples.len();
    let k = cfg.components;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let assign = if k == 1 {
        vec![0; n]
    } else {
        kmeans_init(samples, k, &mut rng)
    };
    let mut resp: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            assign
                .iter()
                .map(|&a| if a == c { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut gm = GaussianMixture {
        dim: d,
        weights: vec![0.0; k],
        means: vec![],
        covariances: vec![],
    };
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..cfg.max_iter.max(1) {
        let mut means = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        for (c, r) in resp.iter().enumerate() {
            let (nk, m, cv) = weighted_gaussian(samples, r, cfg.covariance_floor);
            gm.weights[c] = (nk / n as f64).max(1e-12);
            means.push(m);
            covs.push(cv);
        }
        let wsum: f64 = gm.weights.iter().sum();
        gm.weights.iter_mut().for_each(|w| *w /= wsum);
        gm.means = means;
        gm.covariances = covs;
        if k == 1 {
            break;
        }
        let comps = gm.components()?;
        let mut ll = 0.0;
        for (i, x) in samples.iter().enumerate() {
            let t = GaussianMixture::component_log_terms(&comps, x);
            let z = log_sum_exp(&t);
            ll += z;
            for c in 0..k {
                resp[c][i] = (t[c] - z).exp();
            }
        }
        if (ll - prev).abs() <= 1e-9 * ll.abs().max(1.0) {
            break;
        }
        prev = ll;
    }
    Ok(gm)
}

/// A fitted class mixture with its likelihood threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixturePerClass {
    pub class_id: ClassId,
    pub mixture: GaussianMixture,
    /// Minimum log-likelihood over the fitting samples.
    pub theta_like: f64,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum GmmEntry {
    Fitted(GaussianMixturePerClass),
    /// Too few samples; the class skips the overconfidence check.
    Bypass {
        samples: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GmmStore {
    pub classes: BTreeMap<ClassId, GmmEntry>,
}

impl GmmStore {
    pub fn get(&self, c: ClassId) -> Option<&GmmEntry> {
        self.classes.get(&c)
    }

    pub fn fitted(&self, c: ClassId) -> Option<&GaussianMixturePerClass> {
        match self.classes.get(&c) {
            Some(GmmEntry::Fitted(g)) => Some(g),
            _ => None,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(io_err(path))
    }
}

/// One mixture per class; classes below `min_samples` get a bypass record.
pub fn fit_gmms(per_class: &BTreeMap<ClassId, Vec<Vec<f64>>>, cfg: &GmmConfig) -> Result<GmmStore> {
    cfg.validate()?;
    let mut store = GmmStore::default();
    for (&class_id, samples) in per_class {
        if samples.len() < cfg.min_samples {
            log::warn!(
                "class {class_id}: {} logit samples, below the minimum {}; overconfidence check bypassed",
                samples.len(),
                cfg.min_samples
            );
            store.classes.insert(
                class_id,
                GmmEntry::Bypass {
                    samples: samples.len(),
                    reason: format!("fewer than {} samples", cfg.min_samples),
                },
            );
            continue;
        }
        let class_cfg = GmmConfig {
            seed: cfg.seed ^ (class_id.0 as u64).wrapping_mul(0x9e37_79b9),
            ..*cfg
        };
        let mixture = fit_mixture(samples, &class_cfg)?;
        let theta_like = samples
            .iter()
            .map(|x| mixture.log_likelihood(x))
            .fold(f64::INFINITY, f64::min);
        store.classes.insert(
            class_id,
            GmmEntry::Fitted(GaussianMixturePerClass {
                class_id,
                mixture,
                theta_like,
                samples: samples.len(),
                seed: class_cfg.seed,
            }),
        );
    }
    Ok(store)
}
