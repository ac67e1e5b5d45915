use serde::{Deserialize, Serialize};

use super::Episode;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Linear map applied to every generated image.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DomainShift {
    #[default]
    None,
    /// `x -> x + strength * R x` with `R` a fixed Gaussian matrix, entries
    /// of variance `1 / D`, drawn from `seed` (shared by every task).
    RandomLinear { strength: f64, seed: u64 },
}

/// Balanced Gaussian classes in image space.
///
/// A sample of class `n` is `shift(mu_n + noise_std * eps + nuisance_std * U eta)`
/// where `mu_n` has i.i.d. `N(0, class_sep^2)` entries, `eps ~ N(0, I_D)`,
/// `eta ~ N(0, I_r)` and `U` is a per-task `D x r` basis with `N(0, 1/r)`
/// entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianTaskSpec {
    pub n_way: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub in_chans: usize,
    pub image_size: usize,
    pub class_sep: f64,
    pub noise_std: f64,
    pub nuisance_rank: usize,
    pub nuisance_std: f64,
    pub shift: DomainShift,
}

impl Default for GaussianTaskSpec {
    fn default() -> Self {
        Self {
            n_way: 5,
            shots: 5,
            queries_per_class: 10,
            in_chans: 3,
            image_size: 16,
            class_sep: 1.0,
            noise_std: 1.0,
            nuisance_rank: 4,
            nuisance_std: 0.0,
            shift: DomainShift::None,
        }
    }
}

impl GaussianTaskSpec {
    pub fn dim(&self) -> usize {
        self.in_chans * self.image_size * self.image_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_way < 2 || self.shots == 0 || self.queries_per_class == 0 {
            return bad(format!(
                "synthetic task needs n_way >= 2, shots >= 1, queries >= 1; got {}, {}, {}",
                self.n_way, self.shots, self.queries_per_class
            ));
        }
        if self.dim() == 0 {
            return bad("synthetic images must be non-empty".into());
        }
        for (name, v) in
            [("class_sep", self.class_sep), ("noise_std", self.noise_std), ("nuisance_std", self.nuisance_std)]
        {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.class_sep == 0.0 {
            return bad("class_sep 0 makes every class identical".into());
        }
        if self.nuisance_std > 0.0 && (self.nuisance_rank == 0 || self.noise_std == 0.0) {
            return bad("nuisance needs rank >= 1 and noise_std > 0".into());
        }
        if let DomainShift::RandomLinear { strength, .. } = self.shift {
            if !strength.is_finite() {
                return bad(format!("shift strength must be finite, got {strength}"));
            }
        }
        Ok(())
    }
}

/// A generated episode with the ground truth needed for the Bayes rule.
#[derive(Debug, Clone)]
pub struct SyntheticTask<T: Scalar> {
    pub episode: Episode<T>,
    pub spec: GaussianTaskSpec,
    /// Class means before the shift, `[N, D]`.
    pub means: Vec<Vec<f64>>,
    /// Nuisance basis `U`, row-major `[D, r]`.
    basis: Vec<f64>,
    /// Query samples before the shift, `[Q, D]`.
    clean_query: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.normal()).collect()
}

fn shift_matrix(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    gaussian(&mut rng, dim * dim, 1.0 / (dim as f64).sqrt())
}

pub fn make_synthetic_task<T: Scalar>(spec: &GaussianTaskSpec, seed: u64) -> Result<SyntheticTask<T>> {
    spec.validate()?;
    let d = spec.dim();
    let r = spec.nuisance_rank;
    let mut rng = Rng::new(seed);
    let means: Vec<Vec<f64>> = (0..spec.n_way).map(|_| gaussian(&mut rng, d, spec.class_sep)).collect();
    let basis = gaussian(&mut rng, d * r, 1.0 / (r.max(1) as f64).sqrt());
    let shift = match spec.shift {
        DomainShift::None => None,
        DomainShift::RandomLinear { strength, seed } => Some((strength, shift_matrix(d, seed))),
    };

    let mut draw = |class: usize| -> Vec<f64> {
        let eta = gaussian(&mut rng, r, 1.0);
        let mut x: Vec<f64> = means[class].iter().map(|m| m + spec.noise_std * rng.normal()).collect();
        if spec.nuisance_std > 0.0 {
            for (i, xi) in x.iter_mut().enumerate() {
                let u = &basis[i * r..(i + 1) * r];
                *xi += spec.nuisance_std * u.iter().zip(&eta).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        x
    };
    let mut support = Vec::new();
    let mut support_labels = Vec::new();
    let mut clean_query = Vec::new();
    let mut query_labels = Vec::new();
    for class in 0..spec.n_way {
        for _ in 0..spec.shots {
            support.push(draw(class));
            support_labels.push(class);
        }
        for _ in 0..spec.queries_per_class {
            clean_query.push(draw(class));
            query_labels.push(class);
        }
    }
    let apply = |x: &Vec<f64>| -> Vec<f64> {
        match &shift {
            None => x.clone(),
            Some((strength, m)) => m
                .chunks_exact(d)
                .zip(x)
                .map(|(row, xi)| xi + strength * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                .collect(),
        }
    };
    let images = |rows: &[Vec<f64>]| -> Result<Tensor<T>> {
        let flat: Vec<f64> = rows.iter().flat_map(apply).collect();
        Tensor::from_f64(vec![rows.len(), spec.in_chans, spec.image_size, spec.image_size], &flat)
    };
    let m = support.len();
    let q = clean_query.len();
    let episode = Episode {
        support: images(&support)?,
        support_labels,
        query: images(&clean_query)?,
        query_labels,
        n_way: spec.n_way,
        shots: vec![spec.shots; spec.n_way],
        seed,
        support_ids: (0..m).collect(),
        query_ids: (m..m + q).collect(),
    };
    Ok(SyntheticTask { episode, spec: spec.clone(), means, basis, clean_query })
}

/// Cholesky solve of the small SPD system `a x = b` (`a` row-major `n x n`).
fn spd_solve(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                l[i * n + i] = (a[i * n + i] - s).sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x
}

impl<T: Scalar> SyntheticTask<T> {
    /// `Sigma^{-1} v` for the shared class covariance, via Woodbury.
    fn precision_times(&self, v: &[f64]) -> Vec<f64> {
        let s2 = self.spec.noise_std * self.spec.noise_std;
        let n2 = self.spec.nuisance_std * self.spec.nuisance_std;
        if s2 == 0.0 {
            return v.to_vec();
        }
        if n2 == 0.0 {
            return v.iter().map(|x| x / s2).collect();
        }
        let r = self.spec.nuisance_rank;
        let u = &self.basis;
        let mut utu = vec![0.0; r * r];
        for row in u.chunks_exact(r) {
            for a in 0..r {
                for b in 0..r {
                    utu[a * r + b] += row[a] * row[b];
                }
            }
        }
        for a in 0..r {
            utu[a * r + a] += s2 / n2;
        }
        let mut utv = vec![0.0; r];
        for (row, x) in u.chunks_exact(r).zip(v) {
            for a in 0..r {
                utv[a] += row[a] * x;
            }
        }
        let c = spd_solve(&utu, &utv, r);
        u.chunks_exact(r)
            .zip(v)
            .map(|(row, x)| (x - row.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()) / s2)
            .collect()
    }

    /// Bayes-optimal labels for the query set: linear discriminant with the
    /// true means and covariance, evaluated before the (invertible) shift.
    /// Ties go to the lowest class.
    pub fn bayes_predictions(&self) -> Vec<usize> {
        let w: Vec<Vec<f64>> = self.means.iter().map(|m| self.precision_times(m)).collect();
        let bias: Vec<f64> =
            w.iter().zip(&self.means).map(|(wc, m)| -0.5 * wc.iter().zip(m).map(|(a, b)| a * b).sum::<f64>()).collect();
        self.clean_query
            .iter()
            .map(|x| {
                let scores: Vec<f64> =
                    w.iter().zip(&bias).map(|(wc, b)| wc.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() + b).collect();
                let mut best = 0;
                for (j, &s) in scores.iter().enumerate().skip(1) {
                    if s > scores[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn bayes_accuracy(&self) -> f64 {
        let pred = self.bayes_predictions();
        let correct = pred.iter().zip(&self.episode.query_labels).filter(|(p, t)| p == t).count();
        correct as f64 / pred.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_balance() {
        let spec = GaussianTaskSpec::default();
        let t: SyntheticTask<f64> = make_synthetic_task(&spec, 4).unwrap();
        assert_eq!(t.episode.support.shape(), &[25, 3, 16, 16]);
        assert_eq!(t.episode.query.shape(), &[50, 3, 16, 16]);
        t.episode.validate().unwrap();
    }

    #[test]
    fn zero_noise_copies_the_mean() {
        let spec = GaussianTaskSpec { noise_std: 0.0, image_size: 4, ..GaussianTaskSpec::default() };
        let t: SyntheticTask<f64> = make_synthetic_task(&spec, 1).unwrap();
        let e = &t.episode;
        let d = spec.dim();
        for (i, &y) in e.query_labels.iter().enumerate() {
            assert_eq!(&e.query.data()[i * d..(i + 1) * d], &t.means[y][..]);
        }
        assert_eq!(t.bayes_accuracy(), 1.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = GaussianTaskSpec {
            shift: DomainShift::RandomLinear { strength: 1.0, seed: 3 },
            nuisance_std: 2.0,
            image_size: 4,
            ..GaussianTaskSpec::default()
        };
        let a: SyntheticTask<f32> = make_synthetic_task(&spec, 8).unwrap();
        let b: SyntheticTask<f32> = make_synthetic_task(&spec, 8).unwrap();
        assert_eq!(a.episode, b.episode);
    }

    #[test]
    fn woodbury_matches_dense_inverse() {
        let spec = GaussianTaskSpec {
            image_size: 2,
            in_chans: 1,
            nuisance_rank: 2,
            nuisance_std: 1.5,
            noise_std: 0.7,
            ..GaussianTaskSpec::default()
        };
        let t: SyntheticTask<f64> = make_synthetic_task(&spec, 2).unwrap();
        let d = spec.dim();
        let v = [0.3, -1.0, 2.0, 0.5];
        let x = t.precision_times(&v);
        // Sigma x should give back v.
        for i in 0..d {
            let mut s = 0.49 * x[i];
            for (j, xj) in x.iter().enumerate() {
                let uu: f64 = (0..2).map(|k| t.basis[i * 2 + k] * t.basis[j * 2 + k]).sum();
                s += 2.25 * uu * xj;
            }
            assert!((s - v[i]).abs() < 1e-12, "{s} vs {}", v[i]);
        }
    }

    #[test]
    fn degenerate_specs() {
        let base = GaussianTaskSpec::default();
        for spec in [
            GaussianTaskSpec { n_way: 1, ..base.clone() },
            GaussianTaskSpec { class_sep: 0.0, ..base.clone() },
            GaussianTaskSpec { noise_std: -1.0, ..base.clone() },
            GaussianTaskSpec { noise_std: 0.0, nuisance_std: 1.0, ..base.clone() },
        ] {
            assert!(make_synthetic_task::<f64>(&spec, 0).is_err());
        }
    }
}
