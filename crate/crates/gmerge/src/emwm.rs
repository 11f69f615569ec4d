//! Entropy-minimized weight merging.
//!
//! For each layer the three checkpoints are reduced to per-neuron scalars
//! (row means). A candidate coefficient pair `(v, m)` mixes the three
//! scalar vectors, a temperature-controlled softmax turns the mix into a
//! distribution over neurons, and the Shannon entropy of that distribution
//! is the objective. Projected gradient descent over the unit simplex,
//! with the temperature annealed geometrically down to a floor, drives
//! each layer toward a low-entropy (decisive) mixture. The analytic
//! gradient is exact; see [`entropy_gradient`].

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::merge::{apply_merge, apply_merge_partial, LayerCoeffs, MergeCoefficients, MergeError};
use crate::tensor::{Checkpoint, Tensor};

#[derive(Debug, Error)]
pub enum EmwmError {
    #[error("invalid optimizer config: {reason}")]
    InvalidConfig { reason: &'static str },
    #[error("scalar vectors have unequal lengths: {base}, {vggt}, {mde}")]
    LengthMismatch {
        base: usize,
        vggt: usize,
        mde: usize,
    },
    #[error("scalar at index {index} is not finite ({value})")]
    NonFiniteScalar { index: usize, value: f64 },
    #[error("scalar vector must be non-empty")]
    EmptyScalars,
    #[error("distribution entry {index} is negative ({value})")]
    NegativeProbability { index: usize, value: f64 },
    #[error("distribution sums to {sum}, expected 1 within 1e-9")]
    NotNormalized { sum: f64 },
    #[error(transparent)]
    Merge(#[from] MergeError),
}

/// Tuning knobs for the per-layer optimizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmwmConfig {
    /// Geometric annealing rate for the softmax temperature.
    pub gamma: f64,
    /// Convergence threshold on both coefficient deltas.
    pub epsilon: f64,
    /// Hard iteration cap per layer.
    pub max_iters: usize,
    /// Gradient step size.
    pub eta: f64,
    /// Lower bound for the annealed temperature.
    pub beta_floor: f64,
    /// Starting point, on the simplex.
    pub lambda_init: LayerCoeffs,
}

impl Default for EmwmConfig {
    fn default() -> Self {
        EmwmConfig {
            gamma: 0.95,
            epsilon: 1e-6,
            max_iters: 20_000,
            eta: 1e-2,
            beta_floor: 1e-4,
            lambda_init: LayerCoeffs::barycenter(),
        }
    }
}

impl EmwmConfig {
    pub fn validate(&self) -> Result<(), EmwmError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(EmwmError::InvalidConfig {
                reason: "gamma must lie in (0, 1)",
            });
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(EmwmError::InvalidConfig {
                reason: "epsilon must be positive and finite",
            });
        }
        if self.max_iters == 0 {
            return Err(EmwmError::InvalidConfig {
                reason: "max_iters must be at least 1",
            });
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(EmwmError::InvalidConfig {
                reason: "eta must be positive and finite",
            });
        }
        if !(self.beta_floor > 0.0 && self.beta_floor <= 1.0) {
            return Err(EmwmError::InvalidConfig {
                reason: "beta_floor must lie in (0, 1]",
            });
        }
        Ok(())
    }
}

/// Annealed temperature at iteration `t`: `max(gamma^t, beta_floor)`.
/// `t = 0` always yields 1.
pub fn beta_at(config: &EmwmConfig, t: usize) -> f64 {
    config.gamma.powf(t as f64).max(config.beta_floor)
}

/// One finite scalar per neuron, the per-layer summary the optimizer works
/// on.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronScalars(Vec<f64>);

impl NeuronScalars {
    pub fn new(values: Vec<f64>) -> Result<Self, EmwmError> {
        if values.is_empty() {
            return Err(EmwmError::EmptyScalars);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(EmwmError::NonFiniteScalar { index, value });
        }
        Ok(NeuronScalars(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Reduces a layer to per-neuron scalars: axis 0 indexes neurons and each
/// scalar is the mean over the remaining axes, so a rank-1 layer maps to
/// itself.
pub fn neuron_scalars(layer: &Tensor) -> NeuronScalars {
    let neurons = layer.shape()[0];
    let per_neuron: usize = layer.shape()[1..].iter().product();
    let data = layer.data();
    let values = (0..neurons)
        .map(|i| {
            let row = &data[i * per_neuron..(i + 1) * per_neuron];
            row.iter().sum::<f64>() / per_neuron as f64
        })
        .collect();
    NeuronScalars(values)
}

/// Temperature-scaled softmax over the scalars: `P_i` proportional to
/// `exp(s_i / beta)`. Stabilized by subtracting the maximum logit, so any
/// finite input and positive temperature yields a valid distribution.
pub fn layer_distribution(scalars: &NeuronScalars, beta: f64) -> Vec<f64> {
    debug_assert!(beta > 0.0, "temperature must be positive");
    softmax(scalars.values(), beta)
}

fn softmax(values: &[f64], beta: f64) -> Vec<f64> {
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = values.iter().map(|&v| ((v - max) / beta).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Shannon entropy in bits. Zero entries contribute zero (the `p log p`
/// limit), which matters once the annealed temperature pushes the softmax
/// into exact underflow.
pub fn entropy(p: &[f64]) -> Result<f64, EmwmError> {
    if let Some((index, &value)) = p.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(EmwmError::NegativeProbability { index, value });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(EmwmError::NotNormalized { sum });
    }
    Ok(entropy_unchecked(p))
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.log2())
        .sum::<f64>()
}

/// Analytic gradient of the entropy objective with respect to the
/// coefficient pair, evaluated at `lambda` and temperature `beta`.
///
/// With merged scalars `s_i = (1 - v - m) a_i + v b_i + m c_i` and
/// `P = softmax(s / beta)`, the chain rule gives
/// `dH/dv = sum_i -P_i (log2 P_i + H) / beta * (b_i - a_i)` and the same
/// with `(c_i - a_i)` for `m`. Terms with `P_i = 0` vanish in the limit
/// and are skipped.
pub fn entropy_gradient(
    base: &NeuronScalars,
    vggt: &NeuronScalars,
    mde: &NeuronScalars,
    lambda: (f64, f64),
    beta: f64,
) -> Result<(f64, f64), EmwmError> {
    check_lengths(base, vggt, mde)?;
    let merged = merged_scalars(base, vggt, mde, lambda);
    let p = softmax(&merged, beta);
    let h = entropy_unchecked(&p);
    let mut grad_v = 0.0;
    let mut grad_m = 0.0;
    for ((&p_i, &b), (&v, &m)) in p
        .iter()
        .zip(base.values())
        .zip(vggt.values().iter().zip(mde.values()))
    {
        if p_i <= 0.0 {
            continue;
        }
        let w = -p_i * (p_i.log2() + h) / beta;
        grad_v += w * (v - b);
        grad_m += w * (m - b);
    }
    Ok((grad_v, grad_m))
}

fn check_lengths(
    base: &NeuronScalars,
    vggt: &NeuronScalars,
    mde: &NeuronScalars,
) -> Result<(), EmwmError> {
    if base.len() != vggt.len() || base.len() != mde.len() {
        return Err(EmwmError::LengthMismatch {
            base: base.len(),
            vggt: vggt.len(),
            mde: mde.len(),
        });
    }
    Ok(())
}

fn merged_scalars(
    base: &NeuronScalars,
    vggt: &NeuronScalars,
    mde: &NeuronScalars,
    (v, m): (f64, f64),
) -> Vec<f64> {
    let c0 = 1.0 - v - m;
    base.values()
        .iter()
        .zip(vggt.values())
        .zip(mde.values())
        .map(|((a, b), c)| c0 * a + v * b + m * c)
        .collect()
}

/// Euclidean projection onto the unit 1-simplex. In 2-D the projection has
/// a closed form: shift both coordinates equally onto the sum-to-one line,
/// then clamp to the nearest vertex if a coordinate went negative. Points
/// already on the simplex are returned unchanged, bit for bit.
pub fn project_simplex((x, y): (f64, f64)) -> (f64, f64) {
    let shift = 0.5 * (1.0 - x - y);
    let (px, py) = (x + shift, y + shift);
    if px < 0.0 {
        (0.0, 1.0)
    } else if py < 0.0 {
        (1.0, 0.0)
    } else if px + py == 1.0 {
        // Covers every point already on the simplex: there `shift` is
        // exactly zero, so the input comes back bit for bit.
        (px, py)
    } else {
        // For far-away candidates the shift cancels catastrophically
        // against the inputs and the sum can drift by several ulps of the
        // (possibly huge) candidate. Re-pin the pair to the line; the sum
        // then lands within one rounding of 1.
        let px = px.clamp(0.0, 1.0);
        (px, 1.0 - px)
    }
}

/// Norm of the entropy gradient projected onto the feasible directions of
/// the simplex at `lambda`. Zero means first-order stationarity: in the
/// interior the tangential component vanishes, at a vertex no feasible
/// descent direction remains.
pub fn projected_gradient_norm(lambda: LayerCoeffs, grad: (f64, f64)) -> f64 {
    // Tangent of the sum-to-one line, unit length.
    let tangential = (grad.0 - grad.1) / std::f64::consts::SQRT_2;
    if lambda.vggt <= 0.0 {
        // At (0, 1) the only feasible move increases vggt; descent exists
        // iff the directional derivative along it is negative.
        if tangential < 0.0 {
            -tangential
        } else {
            0.0
        }
    } else if lambda.mde <= 0.0 {
        if tangential > 0.0 {
            tangential
        } else {
            0.0
        }
    } else {
        tangential.abs()
    }
}

/// Outcome of one layer's optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerResult {
    pub lambda: LayerCoeffs,
    /// Iterations actually executed (at least 1).
    pub iterations: usize,
    /// Entropy at the starting point followed by one entry per iteration,
    /// each evaluated at that iteration's own temperature.
    pub entropy_trace: Vec<f64>,
    pub converged: bool,
}

/// Runs projected gradient descent on one layer's scalars.
pub fn optimize_layer(
    base: &NeuronScalars,
    vggt: &NeuronScalars,
    mde: &NeuronScalars,
    config: &EmwmConfig,
) -> Result<LayerResult, EmwmError> {
    optimize_layer_with_observer(base, vggt, mde, config, |_, _| {})
}

/// Like [`optimize_layer`] but invokes `observer(t, lambda)` with the
/// post-projection iterate at every iteration, which is how the simplex
/// invariant is audited in tests.
pub fn optimize_layer_with_observer(
    base: &NeuronScalars,
    vggt: &NeuronScalars,
    mde: &NeuronScalars,
    config: &EmwmConfig,
    mut observer: impl FnMut(usize, LayerCoeffs),
) -> Result<LayerResult, EmwmError> {
    config.validate()?;
    check_lengths(base, vggt, mde)?;

    let entropy_at = |lambda: (f64, f64), beta: f64| {
        entropy_unchecked(&softmax(&merged_scalars(base, vggt, mde, lambda), beta))
    };

    let mut lambda = (config.lambda_init.vggt, config.lambda_init.mde);
    let mut trace = Vec::with_capacity(64);
    trace.push(entropy_at(lambda, beta_at(config, 0)));

    let mut iterations = 0;
    let mut converged = false;
    for t in 1..=config.max_iters {
        let beta = beta_at(config, t);
        let grad = entropy_gradient(base, vggt, mde, lambda, beta)?;
        let candidate = (lambda.0 - config.eta * grad.0, lambda.1 - config.eta * grad.1);
        let next = project_simplex(candidate);
        observer(
            t,
            LayerCoeffs {
                vggt: next.0,
                mde: next.1,
            },
        );
        trace.push(entropy_at(next, beta));
        let delta_v = (next.0 - lambda.0).abs();
        let delta_m = (next.1 - lambda.1).abs();
        lambda = next;
        iterations = t;
        if delta_v <= config.epsilon && delta_m <= config.epsilon {
            converged = true;
            break;
        }
    }

    let lambda = LayerCoeffs::new(lambda.0, lambda.1)
        .expect("projection keeps iterates on the simplex");
    Ok(LayerResult {
        lambda,
        iterations,
        entropy_trace: trace,
        converged,
    })
}

/// Full merge report: the config used plus one [`LayerResult`] per layer.
#[derive(Debug, Clone)]
pub struct EmwmReport {
    pub config: EmwmConfig,
    pub layers: BTreeMap<String, LayerResult>,
}

impl EmwmReport {
    /// Chosen coefficient pairs, ready for [`apply_merge`].
    pub fn coefficients(&self) -> MergeCoefficients {
        self.layers
            .iter()
            .map(|(name, r)| (name.clone(), r.lambda))
            .collect()
    }

    /// JSON form. `include_trace` adds the full per-iteration entropy
    /// trace under each layer; otherwise only the endpoints are kept.
    pub fn to_json(&self, include_trace: bool) -> Value {
        let mut layers = Map::new();
        for (name, r) in &self.layers {
            let mut entry = Map::new();
            entry.insert("lambda_vggt".into(), json!(r.lambda.vggt));
            entry.insert("lambda_mde".into(), json!(r.lambda.mde));
            entry.insert("iterations".into(), json!(r.iterations));
            entry.insert("converged".into(), json!(r.converged));
            entry.insert(
                "entropy_initial".into(),
                json!(r.entropy_trace.first().copied().unwrap_or(0.0)),
            );
            entry.insert(
                "entropy_final".into(),
                json!(r.entropy_trace.last().copied().unwrap_or(0.0)),
            );
            if include_trace {
                entry.insert("entropy_trace".into(), json!(r.entropy_trace));
            }
            layers.insert(name.clone(), Value::Object(entry));
        }
        json!({
            "config": {
                "gamma": self.config.gamma,
                "epsilon": self.config.epsilon,
                "max_iters": self.config.max_iters,
                "eta": self.config.eta,
                "beta_floor": self.config.beta_floor,
                "lambda_init": [self.config.lambda_init.vggt, self.config.lambda_init.mde],
            },
            "layers": Value::Object(layers),
        })
    }
}

/// Optimizes coefficients for every layer (in parallel) and applies the
/// resulting merge. Layer results land in the report keyed by name.
pub fn merge_emwm(
    base: &Checkpoint,
    vggt: &Checkpoint,
    mde: &Checkpoint,
    config: &EmwmConfig,
) -> Result<(Checkpoint, EmwmReport), EmwmError> {
    merge_emwm_impl(base, vggt, mde, config, false)
}

/// Lenient variant: layers without compatible counterparts in both
/// specialists are copied from the base and skipped by the optimizer.
pub fn merge_emwm_partial(
    base: &Checkpoint,
    vggt: &Checkpoint,
    mde: &Checkpoint,
    config: &EmwmConfig,
) -> Result<(Checkpoint, EmwmReport), EmwmError> {
    merge_emwm_impl(base, vggt, mde, config, true)
}

fn merge_emwm_impl(
    base: &Checkpoint,
    vggt: &Checkpoint,
    mde: &Checkpoint,
    config: &EmwmConfig,
    partial: bool,
) -> Result<(Checkpoint, EmwmReport), EmwmError> {
    config.validate()?;
    let mergeable: Vec<&str> = if partial {
        base.iter()
            .filter(|(name, b)| {
                let ok = |ck: &Checkpoint| {
                    ck.get(name)
                        .is_some_and(|t| t.shape() == b.shape() && t.dtype() == b.dtype())
                };
                ok(vggt) && ok(mde)
            })
            .map(|(name, _)| name)
            .collect()
    } else {
        base.names().collect()
    };

    let per_layer: Result<Vec<(String, LayerResult)>, EmwmError> = mergeable
        .par_iter()
        .map(|&name| {
            let b = base.get(name).expect("name from base");
            let (v, m) = match (vggt.get(name), mde.get(name)) {
                (Some(v), Some(m)) if v.shape() == b.shape() && m.shape() == b.shape() => (v, m),
                _ => {
                    return Err(EmwmError::Merge(MergeError::Incompatible {
                        context: "emwm inputs",
                        report: crate::tensor::validate_compat(base, vggt),
                    }))
                }
            };
            let result = optimize_layer(
                &neuron_scalars(b),
                &neuron_scalars(v),
                &neuron_scalars(m),
                config,
            )?;
            Ok((name.to_string(), result))
        })
        .collect();
    let per_layer = per_layer?;

    let report = EmwmReport {
        config: config.clone(),
        layers: per_layer.into_iter().collect(),
    };
    let coeffs = report.coefficients();
    let merged = if partial {
        apply_merge_partial(base, vggt, mde, &coeffs)?
    } else {
        apply_merge(base, vggt, mde, &coeffs)?
    };
    Ok((merged, report))
}
