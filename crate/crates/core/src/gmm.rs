//! Diagonal-covariance Gaussian mixtures and Fisher-vector encoding.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use seqattn_tensor::{stns, Tensor};

use crate::error::{Error, Result};

/// Lower bound applied to every fitted standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Gmm {
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: Gmm,
    /// Total log-likelihood after each EM iteration.
    pub log_likelihood: Vec<f64>,
    /// Components reseeded because they lost all responsibility mass.
    pub reinitialized: usize,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl Gmm {
    pub fn components(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.mu.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, d) = (self.components(), self.dim());
        if c == 0 || d == 0 || self.mu.len() != c || self.sigma.len() != c {
            return Err(Error::Model("malformed mixture".into()));
        }
        for (k, (m, s)) in self.mu.iter().zip(&self.sigma).enumerate() {
            if m.len() != d || s.len() != d {
                return Err(Error::Model(format!("component {k} has inconsistent dimension")));
            }
            if let Some(v) = s.iter().find(|&&v| !(v >= SIGMA_FLOOR)) {
                return Err(Error::Model(format!(
                    "component {k} has sigma {v} below the floor {SIGMA_FLOOR}"
                )));
            }
        }
        if self.pi.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Model("mixture weights must be positive".into()));
        }
        Ok(())
    }

    fn log_component(&self, k: usize, x: &[f64]) -> f64 {
        let mut s = self.pi[k].ln();
        for ((&xi, &m), &sd) in x.iter().zip(&self.mu[k]).zip(&self.sigma[k]) {
            let z = (xi - m) / sd;
            s -= 0.5 * (z * z + LN_2PI) + sd.ln();
        }
        s
    }

    /// Posterior responsibilities of `x`, plus its log density.
    pub fn posterior(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let logs: Vec<f64> = (0..self.components()).map(|k| self.log_component(k, x)).collect();
        let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
        let lse = mx + z.ln();
        (logs.iter().map(|l| (l - lse).exp()).collect(), lse)
    }

    pub fn log_likelihood(&self, data: &[Vec<f64>]) -> f64 {
        data.iter().map(|x| self.posterior(x).1).sum()
    }

    pub fn to_tensors(&self) -> Result<[Tensor<f64>; 3]> {
        let (c, d) = (self.components(), self.dim());
        Ok([
            Tensor::new(&[c, d], self.mu.concat())?,
            Tensor::new(&[c, d], self.sigma.concat())?,
            Tensor::new(&[c], self.pi.clone())?,
        ])
    }

    pub fn from_tensors(mu: &Tensor<f64>, sigma: &Tensor<f64>, pi: &Tensor<f64>) -> Result<Self> {
        let (ms, ss) = (mu.shape(), sigma.shape());
        if ms.len() != 2 || ms != ss || pi.shape() != [ms[0]] {
            return Err(Error::Model(format!(
                "mixture tensors have shapes {ms:?}, {ss:?}, {:?}",
                pi.shape()
            )));
        }
        let d = ms[1];
        let rows = |t: &Tensor<f64>| t.data().chunks(d).map(<[f64]>::to_vec).collect();
        let g = Self {
            mu: rows(mu),
            sigma: rows(sigma),
            pi: pi.data().to_vec(),
        };
        g.validate()?;
        Ok(g)
    }

    /// Writes `<prefix>.mu.stns`, `<prefix>.sigma.stns`, `<prefix>.pi.stns`.
    pub fn save(&self, dir: &Path, prefix: &str) -> Result<()> {
        let [m, s, p] = self.to_tensors()?;
        for (name, t) in [("mu", m), ("sigma", s), ("pi", p)] {
            stns::save(&t, dir.join(format!("{prefix}.{name}.stns")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, prefix: &str) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor<f64>> {
            let path = dir.join(format!("{prefix}.{name}.stns"));
            if !path.exists() {
                return Err(Error::Missing(path));
            }
            Ok(stns::load(&path)?)
        };
        Self::from_tensors(&get("mu")?, &get("sigma")?, &get("pi")?)
    }
}

fn global_sigma(data: &[Vec<f64>]) -> Vec<f64> {
    let d = data[0].len();
    let n = data.len() as f64;
    (0..d)
        .map(|j| {
            let m = data.iter().map(|x| x[j]).sum::<f64>() / n;
            let v = data.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / n;
            v.sqrt().max(SIGMA_FLOOR)
        })
        .collect()
}

/// Expectation-maximization with diagonal covariances.
pub fn fit_gmm(data: &[Vec<f64>], c: usize, iterations: usize, rng: &mut impl Rng) -> Result<GmmFit> {
    if c == 0 {
        return Err(Error::Usage("mixture needs at least one component".into()));
    }
    let d = data.first().map_or(0, Vec::len);
    if d == 0 || data.iter().any(|x| x.len() != d) {
        return Err(Error::Usage("descriptors must be non-empty and equally sized".into()));
    }
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for x in data {
        if !distinct.iter().any(|y| *y == x) {
            distinct.push(x);
            if distinct.len() > c {
                break;
            }
        }
    }
    if distinct.len() < c {
        return Err(Error::Usage(format!(
            "need at least {c} distinct descriptors, found {}",
            distinct.len()
        )));
    }
    let spread = global_sigma(data);
    let mut starts = sample(rng, data.len(), data.len()).into_vec();
    let mut mu: Vec<Vec<f64>> = Vec::with_capacity(c);
    while mu.len() < c {
        let Some(i) = starts.pop() else { break };
        if !mu.iter().any(|m| m == &data[i]) {
            mu.push(data[i].clone());
        }
    }
    let mut model = Gmm {
        mu,
        sigma: vec![spread.clone(); c],
        pi: vec![1.0 / c as f64; c],
    };
    let n = data.len() as f64;
    let mut log_likelihood = Vec::with_capacity(iterations);
    let mut reinitialized = 0;
    for _ in 0..iterations {
        let mut nk = vec![0.0; c];
        let mut sx = vec![vec![0.0; d]; c];
        let mut sxx = vec![vec![0.0; d]; c];
        for x in data {
            let (q, _) = model.posterior(x);
            for k in 0..c {
                nk[k] += q[k];
                for j in 0..d {
                    sx[k][j] += q[k] * x[j];
                    sxx[k][j] += q[k] * x[j] * x[j];
                }
            }
        }
        for k in 0..c {
            if nk[k] < 1e-10 {
                let i = rng.gen_range(0..data.len());
                log::warn!("mixture component {k} lost its mass; reseeding from descriptor {i}");
                model.mu[k] = data[i].clone();
                model.sigma[k] = spread.clone();
                model.pi[k] = 1.0 / n;
                reinitialized += 1;
                continue;
            }
            for j in 0..d {
                let m = sx[k][j] / nk[k];
                let var = (sxx[k][j] / nk[k] - m * m).max(0.0);
                model.mu[k][j] = m;
                model.sigma[k][j] = var.sqrt().max(SIGMA_FLOOR);
            }
            model.pi[k] = nk[k] / n;
        }
        let z: f64 = model.pi.iter().sum();
        model.pi.iter_mut().for_each(|p| *p /= z);
        log_likelihood.push(model.log_likelihood(data));
    }
    Ok(GmmFit {
        model,
        log_likelihood,
        reinitialized,
    })
}

/// `[u_1..u_C, v_1..v_C]`, each block of length D.
pub fn fisher_vector(states: &[Vec<f64>], gmm: &Gmm) -> Result<Vec<f64>> {
    gmm.validate()?;
    if states.is_empty() {
        return Err(Error::Usage("cannot encode an empty sequence".into()));
    }
    let (c, d) = (gmm.components(), gmm.dim());
    if let Some(x) = states.iter().find(|x| x.len() != d) {
        return Err(Error::Model(format!(
            "state of length {} for a {d}-dimensional mixture",
            x.len()
        )));
    }
    let t = states.len() as f64;
    let mut u = vec![0.0; c * d];
    let mut v = vec![0.0; c * d];
    for x in states {
        let (q, _) = gmm.posterior(x);
        for k in 0..c {
            for j in 0..d {
                let z = (x[j] - gmm.mu[k][j]) / gmm.sigma[k][j];
                u[k * d + j] += q[k] * z;
                v[k * d + j] += q[k] * (z * z - 1.0);
            }
        }
    }
    for k in 0..c {
        let su = 1.0 / (t * gmm.pi[k].sqrt());
        let sv = 1.0 / (t * (2.0 * gmm.pi[k]).sqrt());
        u[k * d..(k + 1) * d].iter_mut().for_each(|e| *e *= su);
        v[k * d..(k + 1) * d].iter_mut().for_each(|e| *e *= sv);
    }
    u.extend(v);
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_component_is_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(2.0..5.0)]).collect();
        let fit = fit_gmm(&data, 1, 3, &mut rng).unwrap();
        for j in 0..2 {
            let m = data.iter().map(|x| x[j]).sum::<f64>() / 50.0;
            let v = data.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / 50.0;
            assert!((fit.model.mu[0][j] - m).abs() < 1e-12);
            assert!((fit.model.sigma[0][j].powi(2) - v).abs() < 1e-12);
        }
        assert_eq!(fit.model.pi, vec![1.0]);
    }

    #[test]
    fn separated_clusters_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let centers = [[-3.0, 1.0], [4.0, -2.0]];
        let data: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let c = centers[i % 2];
                vec![c[0] + rng.gen_range(-0.3..0.3), c[1] + rng.gen_range(-0.3..0.3)]
            })
            .collect();
        let fit = fit_gmm(&data, 2, 20, &mut rng).unwrap();
        for c in centers {
            let best = fit
                .model
                .mu
                .iter()
                .map(|m| ((m[0] - c[0]).powi(2) + (m[1] - c[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "center {c:?} missed by {best}");
        }
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<Vec<f64>> = (0..120)
            .map(|i| {
                let off = (i % 3) as f64 * 1.5;
                (0..3).map(|_| off + rng.gen_range(-1.0..1.0)).collect()
            })
            .collect();
        let fit = fit_gmm(&data, 3, 20, &mut rng).unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn too_few_distinct_descriptors() {
        let data = vec![vec![1.0, 2.0]; 10];
        assert!(fit_gmm(&data, 2, 5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn centered_data_closed_form() {
        let gmm = Gmm {
            mu: vec![vec![0.5, -1.0, 2.0]],
            sigma: vec![vec![1.0, 2.0, 0.5]],
            pi: vec![1.0],
        };
        let states = vec![gmm.mu[0].clone(); 4];
        let fv = fisher_vector(&states, &gmm).unwrap();
        assert_eq!(fv.len(), 6);
        assert!(fv[..3].iter().all(|&u| u == 0.0));
        for &v in &fv[3..] {
            assert!((v + 1.0 / 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn fisher_length_is_two_d_c() {
        let gmm = Gmm {
            mu: vec![vec![0.0; 4]; 3],
            sigma: vec![vec![1.0; 4]; 3],
            pi: vec![1.0 / 3.0; 3],
        };
        assert_eq!(fisher_vector(&[vec![0.1; 4]], &gmm).unwrap().len(), 24);
    }

    #[test]
    fn sigma_below_floor_is_rejected() {
        let gmm = Gmm {
            mu: vec![vec![0.0]],
            sigma: vec![vec![1e-4]],
            pi: vec![1.0],
        };
        assert!(matches!(fisher_vector(&[vec![0.0]], &gmm), Err(Error::Model(_))));
        let ok = Gmm { sigma: vec![vec![1.0]], ..gmm };
        assert!(matches!(fisher_vector(&[], &ok), Err(Error::Usage(_))));
    }

    #[test]
    fn uniform_single_component_is_standardized_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gmm = Gmm {
            mu: vec![vec![0.2, -0.4]],
            sigma: vec![vec![0.7, 1.3]],
            pi: vec![1.0],
        };
        let states: Vec<Vec<f64>> = (0..9).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let fv = fisher_vector(&states, &gmm).unwrap();
        for j in 0..2 {
            let z: Vec<f64> = states.iter().map(|x| (x[j] - gmm.mu[0][j]) / gmm.sigma[0][j]).collect();
            let mean_z = z.iter().sum::<f64>() / 9.0;
            let mean_z2 = z.iter().map(|v| v * v).sum::<f64>() / 9.0;
            assert!((fv[j] - mean_z).abs() < 1e-12);
            assert!((fv[2 + j] - (mean_z2 - 1.0) / 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn stns_triplet_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let gmm = Gmm {
            mu: vec![vec![0.5, -0.25], vec![1.0, 2.0]],
            sigma: vec![vec![1.0, 0.5], vec![0.25, 2.0]],
            pi: vec![0.75, 0.25],
        };
        gmm.save(dir.path(), "gmm").unwrap();
        assert_eq!(Gmm::load(dir.path(), "gmm").unwrap(), gmm);
        assert!(matches!(Gmm::load(dir.path(), "nope"), Err(Error::Missing(_))));
    }
}
