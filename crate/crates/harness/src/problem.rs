//! Turns a problem section into concrete data and models for one seed.

use std::sync::Arc;

use aadl_core::data::{load_csv, split, synthetic_classification, synthetic_regression, Dataset, Normalizer};
use aadl_core::models::{Activation, AffineMap, LossKind, Mlp, MlpSpec, NoiseModel};
use aadl_core::DenseVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ProblemConfig;
use crate::HarnessError;

pub enum Instance {
    Affine {
        map: AffineMap,
        noise: Option<NoiseModel>,
        /// Fixed point from a direct solve.
        exact: DenseVector,
        target_error: f64,
    },
    Network {
        model: Mlp,
        train: Arc<Dataset>,
        validation: Dataset,
    },
}

/// Symmetric contraction whose largest eigenvalue is `radius` and whose
/// others are uniform in `[-radius, radius]`.
pub fn random_affine(dim: usize, radius: f64, seed: u64) -> Result<AffineMap, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eigenvalues = vec![radius];
    eigenvalues.extend((1..dim).map(|_| rng.random_range(-radius..=radius)));
    Ok(AffineMap::random_symmetric(&eigenvalues, rng.random())?)
}

struct Network<'a> {
    hidden: &'a [usize],
    activation: Activation,
    loss: LossKind,
    train_fraction: f64,
    normalize: bool,
    split_seed: u64,
}

fn network(data: Dataset, net: Network<'_>, init_seed: u64) -> Result<Instance, HarnessError> {
    let (train, validation) = split(&data, net.train_fraction, net.split_seed)?;
    let (train, validation) = if net.normalize {
        let stats = Normalizer::fit(&train);
        (stats.apply(&train), stats.apply(&validation))
    } else {
        (train, validation)
    };
    let mut layer_sizes = vec![train.n_features()];
    layer_sizes.extend_from_slice(net.hidden);
    layer_sizes.push(train.n_targets());
    let model = Mlp::new(MlpSpec { layer_sizes, activation: net.activation, init_seed }, net.loss)?;
    Ok(Instance::Network { model, train: Arc::new(train), validation })
}

pub fn build(problem: &ProblemConfig, seed: u64) -> Result<Instance, HarnessError> {
    match problem {
        ProblemConfig::Affine(p) => {
            let map = random_affine(p.dim, p.spectral_radius, p.map_seed.unwrap_or(seed))?;
            let exact = map.direct_fixed_point();
            Ok(Instance::Affine { map, noise: p.noise, exact, target_error: p.target_error })
        }
        ProblemConfig::MlpCsv(p) => {
            if !p.path.exists() {
                return Err(HarnessError::DatasetMissing { path: p.path.clone() });
            }
            let data = load_csv(&p.path, &p.target_columns, false)?;
            let data = if p.drop_columns.is_empty() { data } else { data.drop_features(&p.drop_columns)? };
            let net = Network {
                hidden: &p.hidden,
                activation: p.activation,
                loss: LossKind::Mse,
                train_fraction: p.train_fraction,
                normalize: p.normalize,
                split_seed: p.split_seed.unwrap_or(seed),
            };
            network(data, net, seed)
        }
        ProblemConfig::MlpSynthetic(p) => {
            let data = synthetic_regression(p.samples, p.features, p.noise_sd, p.data_seed)?;
            let net = Network {
                hidden: &p.hidden,
                activation: p.activation,
                loss: LossKind::Mse,
                train_fraction: p.train_fraction,
                normalize: p.normalize,
                split_seed: p.split_seed.unwrap_or(seed),
            };
            network(data, net, seed)
        }
        ProblemConfig::Logistic(p) => {
            let data = synthetic_classification(p.samples, p.features, p.data_seed)?;
            let net = Network {
                hidden: &[],
                activation: Activation::default(),
                loss: LossKind::LogisticCrossEntropy,
                train_fraction: p.train_fraction,
                normalize: true,
                split_seed: p.split_seed.unwrap_or(seed),
            };
            network(data, net, seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AffineProblem, LogisticProblem};

    #[test]
    fn affine_instance_has_exact_fixed_point() {
        let p = ProblemConfig::Affine(AffineProblem {
            dim: 10,
            spectral_radius: 0.9,
            map_seed: None,
            noise: None,
            target_error: 1e-8,
        });
        let Instance::Affine { map, exact, .. } = build(&p, 3).unwrap() else { panic!() };
        assert!(map.residual(&exact).unwrap().norm_l2() < 1e-12);
        assert!(map.norm_estimate() < 0.9 + 1e-9);
    }

    #[test]
    fn logistic_instance_is_a_linear_model() {
        let p = ProblemConfig::Logistic(LogisticProblem {
            samples: 50,
            features: 4,
            data_seed: 0,
            train_fraction: 0.8,
            split_seed: None,
        });
        let Instance::Network { model, train, validation } = build(&p, 0).unwrap() else { panic!() };
        assert_eq!(model.spec().layer_sizes, vec![4, 1]);
        assert_eq!((train.rows(), validation.rows()), (40, 10));
    }
}
