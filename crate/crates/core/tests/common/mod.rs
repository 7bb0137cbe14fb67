#![allow(dead_code)]

use ftl_core::neuralnet::{self, Batch, ComboNetConfig, ModelWeights, Pooling};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The small network used for gradient checks.
pub fn gradcheck_config() -> ComboNetConfig {
    ComboNetConfig {
        input_dim: 8,
        stem_channels: 4,
        residual_blocks: 1,
        kernel_size: 3,
        dense_hidden: vec![16],
        n_classes: 3,
        pooling: Pooling::Flatten,
        init_seed: 11,
    }
}

/// He-initialised weights with small random biases, so bias paths are live.
pub fn randomized_weights(cfg: &ComboNetConfig, seed: u64) -> ModelWeights {
    let mut w = neuralnet::init_model(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in &mut w.blocks {
        for v in &mut b.bias {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    w
}

pub fn random_batch(d: usize, c: usize, n: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n * d).map(|_| rng.random_range(0.0..1.0)).collect();
    let y = (0..n)
        .map(|i| if i < c { i } else { rng.random_range(0..c) })
        .collect();
    (x, y)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub n_params: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Compares the analytic gradient with central differences of the mean loss,
/// one parameter at a time.
pub fn finite_difference_check(
    cfg: &ComboNetConfig,
    w: &ModelWeights,
    x: &[f64],
    y: &[usize],
    h: f64,
) -> GradCheck {
    let batch = Batch {
        features: x,
        labels: y,
    };
    let (_, grads) = neuralnet::loss_and_gradient(cfg, w, batch).unwrap();
    let analytic: Vec<f64> = grads.values().copied().collect();
    let loss_at = |w: &ModelWeights| {
        neuralnet::evaluate_loss(
            cfg,
            w,
            Batch {
                features: x,
                labels: y,
            },
        )
        .unwrap()
    };
    let mut probe = w.clone();
    let mut out = GradCheck {
        n_params: analytic.len(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
    };
    for (p, &a) in analytic.iter().enumerate() {
        let orig = *probe.values().nth(p).unwrap();
        *probe.values_mut().nth(p).unwrap() = orig + h;
        let plus = loss_at(&probe);
        *probe.values_mut().nth(p).unwrap() = orig - h;
        let minus = loss_at(&probe);
        *probe.values_mut().nth(p).unwrap() = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let abs = (a - numeric).abs();
        let rel = abs / (a.abs() + 1e-8);
        out.max_abs_err = out.max_abs_err.max(abs);
        out.max_rel_err = out.max_rel_err.max(rel);
    }
    out
}

/// Plain per-parameter `sum_i (n_i / n) * w_i` over flattened values.
pub fn brute_force_average(models: &[(ModelWeights, usize)]) -> Vec<f64> {
    let n: usize = models.iter().map(|(_, k)| k).sum();
    let flat: Vec<Vec<f64>> = models
        .iter()
        .map(|(m, _)| m.values().copied().collect())
        .collect();
    (0..flat[0].len())
        .map(|p| {
            models
                .iter()
                .zip(&flat)
                .map(|((_, k), v)| (*k as f64 / n as f64) * v[p])
                .sum()
        })
        .collect()
}

/// Random model of the given architecture with every value perturbed.
pub fn random_model(cfg: &ComboNetConfig, seed: u64) -> ModelWeights {
    let mut w = neuralnet::init_model(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in w.values_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    w
}

pub fn repo_path(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

pub const FIXTURE: &str = "fixtures/iiot_sample.csv";
pub const FIXTURE_LABEL: &str = "Attack_type";
