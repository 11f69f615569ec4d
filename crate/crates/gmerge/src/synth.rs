//! Seeded synthetic fixtures: pinhole point clouds with known camera
//! truth, checkpoint triples for merge experiments, feature-map pairs,
//! and disparity pairs with a planted offset. Same seed, same bytes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraError, PointCloud, PointRecord};
use crate::metrics::{GridMap, MetricsError};
use crate::neck::{Activation, AttentionParams, FeatureMap, MdeNeckStub, NeckError, StubLayer};
use crate::tensor::{Checkpoint, DType, Tensor};

/// Scene and camera settings for [`pinhole_cloud`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PinholeParams {
    /// Number of points.
    pub n: usize,
    /// True focal length in pixels.
    pub f: f64,
    /// True depth shift.
    pub s: f64,
    /// Image width and height in pixels; image coordinates are sampled
    /// uniformly inside the centered frame.
    pub width: f64,
    pub height: f64,
    /// Depth range for the world points.
    pub z_min: f64,
    pub z_max: f64,
    /// Standard deviation of Gaussian noise added to the observed image
    /// coordinates (0 disables noise).
    pub noise_sigma: f64,
}

impl Default for PinholeParams {
    fn default() -> Self {
        PinholeParams {
            n: 1000,
            f: 500.0,
            s: 0.0,
            width: 1242.0,
            height: 375.0,
            z_min: 2.0,
            z_max: 10.0,
            noise_sigma: 0.0,
        }
    }
}

/// Ground truth recorded alongside a generated cloud.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PinholeTruth {
    pub f: f64,
    pub s: f64,
    pub n: usize,
    pub width: f64,
    pub height: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Samples image coordinates and depths, back-projects them through the
/// true camera, and (optionally) perturbs the observations with Gaussian
/// noise. The noiseless cloud is exactly consistent with `(f, s)` up to
/// floating-point rounding.
pub fn pinhole_cloud(
    params: &PinholeParams,
    seed: u64,
) -> Result<(PointCloud, PinholeTruth), CameraError> {
    if params.n == 0 {
        return Err(CameraError::TooFewPoints {
            needed: 1,
            got: 0,
        });
    }
    if !(params.f > 0.0) || !(params.z_min > 0.0) || params.z_max < params.z_min {
        return Err(CameraError::InvalidConfig {
            reason: "need f > 0 and 0 < z_min <= z_max",
        });
    }
    if params.z_min + params.s <= 0.0 {
        return Err(CameraError::InfeasibleDepth {
            index: 0,
            depth: params.z_min + params.s,
        });
    }
    if !(params.width > 0.0) || !(params.height > 0.0) || params.noise_sigma < 0.0 {
        return Err(CameraError::InvalidConfig {
            reason: "need positive image extents and noise_sigma >= 0",
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut points = Vec::with_capacity(params.n);
    for _ in 0..params.n {
        let u = rng.random_range(-params.width / 2.0..params.width / 2.0);
        let v = rng.random_range(-params.height / 2.0..params.height / 2.0);
        let z = if params.z_max > params.z_min {
            rng.random_range(params.z_min..params.z_max)
        } else {
            params.z_min
        };
        let depth = z + params.s;
        let x = u * depth / params.f;
        let y = v * depth / params.f;
        let (u_obs, v_obs) = if params.noise_sigma > 0.0 {
            (
                u + params.noise_sigma * noise.sample(&mut rng),
                v + params.noise_sigma * noise.sample(&mut rng),
            )
        } else {
            (u, v)
        };
        points.push(PointRecord {
            x,
            y,
            z,
            u: u_obs,
            v: v_obs,
        });
    }
    let truth = PinholeTruth {
        f: params.f,
        s: params.s,
        n: params.n,
        width: params.width,
        height: params.height,
        z_min: params.z_min,
        z_max: params.z_max,
        noise_sigma: params.noise_sigma,
        seed,
    };
    Ok((PointCloud::new(points)?, truth))
}

/// Base/vggt/mde checkpoints sharing structure: `layers` layers named
/// `layer000`, `layer001`, ... with shapes alternating between
/// `[neurons]` and `[neurons, 3]`. The specialists are the base plus
/// independent Gaussian task vectors.
pub fn checkpoint_triple(layers: usize, neurons: usize, seed: u64) -> [Checkpoint; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut base = Checkpoint::new();
    let mut vggt = Checkpoint::new();
    let mut mde = Checkpoint::new();
    for l in 0..layers {
        let shape = if l % 2 == 0 {
            vec![neurons]
        } else {
            vec![neurons, 3]
        };
        let count: usize = shape.iter().product();
        let b: Vec<f64> = (0..count).map(|_| normal.sample(&mut rng)).collect();
        let v: Vec<f64> = b
            .iter()
            .map(|x| x + 0.5 * normal.sample(&mut rng))
            .collect();
        let m: Vec<f64> = b
            .iter()
            .map(|x| x + 0.5 * normal.sample(&mut rng))
            .collect();
        let name = format!("layer{l:03}");
        base.insert(&name, Tensor::f64(shape.clone(), b).expect("finite"));
        vggt.insert(&name, Tensor::f64(shape.clone(), v).expect("finite"));
        mde.insert(&name, Tensor::f64(shape, m).expect("finite"));
    }
    [base, vggt, mde]
}

/// Two independent uniform feature maps of the same shape, stand-ins for
/// the depth-branch and attention-branch activations.
pub fn feature_pair(rows: usize, cols: usize, seed: u64) -> Result<(FeatureMap, FeatureMap), NeckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |_: usize| rng.random_range(-1.0..1.0);
    let mde: Vec<f64> = (0..rows * cols).map(&mut sample).collect();
    let fa: Vec<f64> = (0..rows * cols).map(&mut sample).collect();
    Ok((
        FeatureMap::new(rows, cols, mde)?,
        FeatureMap::new(rows, cols, fa)?,
    ))
}

/// Ground-truth disparity with dyadic values (multiples of 1/256 in
/// [1, 64]) and a prediction offset by exactly `offset`, so the planted
/// end-point error is reproduced without rounding slack whenever the
/// offset is itself dyadic.
pub fn disparity_pair(
    height: usize,
    width: usize,
    offset: f64,
    seed: u64,
) -> Result<(GridMap, GridMap), MetricsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt: Vec<f64> = (0..height * width)
        .map(|_| f64::from(rng.random_range(256u32..=16384)) / 256.0)
        .collect();
    let pred: Vec<f64> = gt.iter().map(|d| d + offset).collect();
    Ok((GridMap::new(height, width, gt)?, GridMap::new(height, width, pred)?))
}

/// Random attention weights for a toy block.
pub fn random_attention_params(
    channels: usize,
    heads: usize,
    rng: &mut impl Rng,
) -> Result<AttentionParams, NeckError> {
    let head_dim = channels / heads.max(1);
    let scale = 1.0 / (channels.max(1) as f64).sqrt();
    let mut mat = |rows: usize, cols: usize| -> Result<FeatureMap, NeckError> {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0) * scale)
            .collect();
        FeatureMap::new(rows, cols, data)
    };
    let mut q = Vec::with_capacity(heads);
    let mut k = Vec::with_capacity(heads);
    let mut v = Vec::with_capacity(heads);
    for _ in 0..heads {
        q.push(mat(channels, head_dim)?);
        k.push(mat(channels, head_dim)?);
        v.push(mat(channels, head_dim)?);
    }
    let out = mat(channels, channels)?;
    let token: Vec<f64> = (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    AttentionParams::new(q, k, v, out, token)
}

/// Random tanh stub stack with `depth` square layers.
pub fn random_stub(
    channels: usize,
    depth: usize,
    rng: &mut impl Rng,
) -> Result<MdeNeckStub, NeckError> {
    let scale = 1.0 / (channels.max(1) as f64).sqrt();
    let mut layers = Vec::with_capacity(depth);
    for _ in 0..depth {
        let weight: Vec<f64> = (0..channels * channels)
            .map(|_| rng.random_range(-1.0..1.0) * scale)
            .collect();
        let bias: Vec<f64> = (0..channels).map(|_| rng.random_range(-0.1..0.1)).collect();
        layers.push(StubLayer {
            weight: FeatureMap::new(channels, channels, weight)?,
            bias,
            activation: Activation::Tanh,
        });
    }
    MdeNeckStub::new(layers)
}

/// A checkpoint with mixed ranks and dtypes, for container stress tests
/// and examples.
pub fn random_checkpoint(layers: usize, seed: u64) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ck = Checkpoint::new();
    for l in 0..layers {
        let rank = rng.random_range(1..=3usize);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=6usize)).collect();
        let count: usize = shape.iter().product();
        let dtype = if rng.random_bool(0.5) {
            DType::F32
        } else {
            DType::F64
        };
        let data: Vec<f64> = (0..count).map(|_| rng.random_range(-10.0..10.0)).collect();
        ck.insert(
            format!("layer{l:03}"),
            Tensor::new(dtype, shape, data).expect("finite random data"),
        );
    }
    ck
}
