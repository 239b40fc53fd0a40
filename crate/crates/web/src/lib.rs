//! WebAssembly exports for the static demo page in `www/`. Every export
//! returns a JSON string; errors come back as `{"error": "..."}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use dmda::autodiff::Tensor;
use dmda::mda::grl_lambda;
use dmda::scp::{build_masks, percentile};
use dmda::theory::{closed_form_d, generalized_jsd, verify_identity, DiscreteJointSet};
use dmda::trainer::{lr_at, TrainConfig};

fn to_json<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("demo output serializes"),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Schedules {
    pub step: Vec<usize>,
    pub lambda: Vec<f64>,
    pub lr: Vec<f64>,
}

/// Reversal coefficient and learning rate sampled at `points` steps.
pub fn schedules(
    total_steps: usize,
    learning_rate: f64,
    decay_points: &str,
    points: usize,
) -> Result<Schedules, String> {
    let decay: Vec<f64> = decay_points
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| format!("decay point '{s}': {e}"))
        })
        .collect::<Result<_, _>>()?;
    let config = TrainConfig {
        total_steps,
        learning_rate,
        lr_decay_points: decay,
        ..TrainConfig::default()
    };
    config.validate().map_err(|e| e.to_string())?;
    if total_steps == 0 || points < 2 {
        return Err("need total_steps >= 1 and at least 2 points".into());
    }
    let step: Vec<usize> = (0..points)
        .map(|i| i * total_steps / (points - 1))
        .collect();
    let lambda = step
        .iter()
        .map(|&s| grl_lambda(s as f64 / total_steps as f64).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let lr = step.iter().map(|&s| lr_at(s, &config)).collect();
    Ok(Schedules { step, lambda, lr })
}

#[wasm_bindgen(js_name = schedules)]
pub fn schedules_js(
    total_steps: usize,
    learning_rate: f64,
    decay_points: &str,
    points: usize,
) -> String {
    to_json(schedules(total_steps, learning_rate, decay_points, points))
}

#[derive(Debug, Serialize, PartialEq)]
pub struct MaskView {
    /// `[class][channel]`.
    pub weights: Vec<Vec<f64>>,
    pub thresholds: Vec<f64>,
    pub masks: Vec<Vec<u8>>,
    pub survivors: Vec<usize>,
}

/// Random auxiliary weights `[K, C]` pruned at quantile `m`.
pub fn mask_view(seed: u64, channels: usize, classes: usize, m: f64) -> Result<MaskView, String> {
    if channels == 0 || classes == 0 || channels * classes > 4096 {
        return Err("channels and classes must be positive and small".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..channels * classes)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let weight = Tensor::new(vec![channels, classes], data.clone()).map_err(|e| e.to_string())?;
    let mask = build_masks(&weight, 100.0 * m).map_err(|e| e.to_string())?;
    let weights: Vec<Vec<f64>> = (0..classes)
        .map(|c| (0..channels).map(|k| data[k * classes + c]).collect())
        .collect();
    Ok(MaskView {
        thresholds: weights.iter().map(|w| percentile(w, 100.0 * m)).collect(),
        survivors: (0..classes).map(|c| mask.survivors(c)).collect(),
        masks: mask.rows().to_vec(),
        weights,
    })
}

#[wasm_bindgen(js_name = maskView)]
pub fn mask_view_js(seed: u32, channels: usize, classes: usize, m: f64) -> String {
    to_json(mask_view(u64::from(seed), channels, classes, m))
}

#[derive(Debug, Serialize, PartialEq)]
pub struct DiscriminatorView {
    /// Normalized input distributions.
    pub distributions: Vec<Vec<f64>>,
    /// `[point][domain]`, after dropping zero-mass points.
    pub optimal: Vec<Vec<f64>>,
    pub objective: f64,
    pub jsd: f64,
    pub floor: f64,
    pub identity_residual: f64,
}

/// Parses one distribution per line (non-negative weights, comma or space
/// separated), normalizes each, and evaluates the optimal discriminator.
pub fn discriminator(text: &str) -> Result<DiscriminatorView, String> {
    let mut dists = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let row: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| format!("line {}: '{s}': {e}", i + 1))
            })
            .collect::<Result<_, _>>()?;
        let total: f64 = row.iter().sum();
        if row.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || total <= 0.0 {
            return Err(format!(
                "line {}: weights must be non-negative with a positive sum",
                i + 1
            ));
        }
        dists.push(row.iter().map(|v| v / total).collect::<Vec<f64>>());
    }
    let set = DiscreteJointSet::new(dists.clone()).map_err(|e| e.to_string())?;
    let report = verify_identity(&set).map_err(|e| e.to_string())?;
    let m = set.m() as f64;
    Ok(DiscriminatorView {
        optimal: closed_form_d(&set.drop_zero_mass()).map_err(|e| e.to_string())?,
        jsd: generalized_jsd(&set),
        objective: report.objective,
        floor: -m * m.ln(),
        identity_residual: report.identity_residual,
        distributions: dists,
    })
}

#[wasm_bindgen(js_name = discriminator)]
pub fn discriminator_js(text: &str) -> String {
    to_json(discriminator(text))
}
