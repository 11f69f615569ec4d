//! Command-line front end. Every subcommand reads its inputs, computes,
//! and only then writes outputs (each write staged through a temp file),
//! so failures never leave partial artifacts. Machine-readable results go
//! to stdout as single-line JSON; diagnostics go to stderr.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O, parse, domain errors),
//! 2 usage errors.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::camera::{focal_from_fov, fov_from_focal, solve_camera, LmConfig, PointCloud};
use crate::container::{atomic_write, read_container, write_container};
use crate::emwm::{merge_emwm, merge_emwm_partial, EmwmConfig};
use crate::merge::LayerCoeffs;
use crate::metrics::{
    bad_pixel_rate, bad_pixel_rate_d1, depth_from_disparity, disparity_from_depth, epe,
    pca_project3, ssim_multichannel, GridMap, SsimConfig, StereoRig,
};
use crate::neck::{modulate, FeatureMap};
use crate::synth;
use crate::tensor::{Checkpoint, DType, Tensor};

#[derive(Debug, Parser)]
#[command(
    name = "gmerge",
    version,
    about = "Entropy-guided checkpoint merging, camera solving, and stereo metrics"
)]
pub struct Cli {
    /// Seed for the synthetic generators.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Chattier stderr; `merge` also embeds full entropy traces in its
    /// report.
    #[arg(long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge two specialist checkpoints into a base via entropy-minimized
    /// coefficients.
    Merge(MergeArgs),
    /// Recover focal length and depth shift from a point cloud CSV.
    SolveCamera(SolveCameraArgs),
    /// Convert focal lengths to fields of view (degrees).
    Fov(FovArgs),
    /// Convert fields of view (degrees) to focal lengths.
    Focal(FocalArgs),
    /// End-point error and bad-pixel rates between two maps.
    Metrics(MetricsArgs),
    /// Convert a depth map to disparity (or back with --invert).
    Disparity(DisparityArgs),
    /// Structural similarity between two images or feature stacks.
    Ssim(SsimArgs),
    /// Project a feature matrix onto its top three principal axes.
    Pca3(Pca3Args),
    /// Modulate depth-branch features with attention features.
    Neck(NeckArgs),
    /// Generate seeded synthetic fixtures.
    #[command(subcommand)]
    Synth(SynthKind),
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub vggt: PathBuf,
    #[arg(long)]
    pub mde: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Temperature annealing rate.
    #[arg(long, default_value_t = 0.95)]
    pub gamma: f64,
    /// Convergence threshold on coefficient movement.
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    #[arg(long, default_value_t = 20_000)]
    pub max_iters: usize,
    /// Gradient step size.
    #[arg(long, default_value_t = 1e-2)]
    pub eta: f64,
    /// Temperature floor.
    #[arg(long, default_value_t = 1e-4)]
    pub beta_floor: f64,
    /// Copy base layers through when the specialists lack compatible
    /// counterparts instead of failing.
    #[arg(long)]
    pub allow_partial: bool,
}

#[derive(Debug, Args)]
pub struct SolveCameraArgs {
    /// Point cloud CSV with header X,Y,Z,u,v.
    #[arg(long)]
    pub points: PathBuf,
    /// Also write the solution JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
}

#[derive(Debug, Args)]
pub struct FovArgs {
    #[arg(long)]
    pub fx: f64,
    #[arg(long)]
    pub fy: f64,
    #[arg(long)]
    pub width: f64,
    #[arg(long)]
    pub height: f64,
}

#[derive(Debug, Args)]
pub struct FocalArgs {
    #[arg(long)]
    pub fov_x: f64,
    #[arg(long)]
    pub fov_y: f64,
    #[arg(long)]
    pub width: f64,
    #[arg(long)]
    pub height: f64,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Bad-pixel thresholds, comma separated (e.g. 1,3,5).
    #[arg(long, value_delimiter = ',', required = true)]
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct DisparityArgs {
    /// Input map; despite the flag name this is a disparity map when
    /// --invert is given.
    #[arg(long)]
    pub depth: PathBuf,
    /// Focal length in pixels.
    #[arg(long)]
    pub f: f64,
    /// Stereo baseline.
    #[arg(long)]
    pub baseline: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Convert disparity back to depth instead.
    #[arg(long)]
    pub invert: bool,
}

#[derive(Debug, Args)]
pub struct SsimArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Dynamic range of the inputs.
    #[arg(long, default_value_t = 1.0)]
    pub l: f64,
}

#[derive(Debug, Args)]
pub struct Pca3Args {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NeckArgs {
    /// Depth-branch feature map.
    #[arg(long)]
    pub mde: PathBuf,
    /// Attention-branch feature map.
    #[arg(long)]
    pub fa: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum SynthKind {
    /// Point cloud consistent with a known camera, plus a truth sidecar.
    #[command(name = "pinhole-cloud", alias = "pinhole")]
    PinholeCloud(PinholeArgs),
    /// Structurally compatible base/vggt/mde checkpoints.
    CheckpointTriple(CheckpointTripleArgs),
    /// Two feature maps for the neck and diagnostics commands.
    FeaturePair(FeaturePairArgs),
    /// Ground-truth disparity plus a prediction offset by a constant.
    DisparityPair(DisparityPairArgs),
}

#[derive(Debug, Args)]
pub struct PinholeArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 500.0)]
    pub f: f64,
    #[arg(long, default_value_t = 0.0)]
    pub s: f64,
    #[arg(long, default_value_t = 1242.0)]
    pub width: f64,
    #[arg(long, default_value_t = 375.0)]
    pub height: f64,
    #[arg(long, default_value_t = 2.0)]
    pub z_min: f64,
    #[arg(long, default_value_t = 10.0)]
    pub z_max: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckpointTripleArgs {
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub neurons: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FeaturePairArgs {
    #[arg(long, default_value_t = 64)]
    pub rows: usize,
    #[arg(long, default_value_t = 32)]
    pub cols: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DisparityPairArgs {
    #[arg(long, default_value_t = 48)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 1.0)]
    pub offset: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Parses and dispatches; returns the process exit code.
pub fn run(args: Vec<String>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{rendered}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{rendered}");
                    2
                }
            };
        }
    };
    match dispatch(cli, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            1
        }
    }
}

fn dispatch(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Merge(args) => cmd_merge(args, cli.verbose, stdout, stderr),
        Command::SolveCamera(args) => cmd_solve_camera(args, stdout),
        Command::Fov(args) => {
            let (fov_x, fov_y) = fov_from_focal(args.fx, args.fy, args.width, args.height)?;
            emit(stdout, json!({ "fov_x": fov_x, "fov_y": fov_y }))
        }
        Command::Focal(args) => {
            let (f_x, f_y) = focal_from_fov(args.fov_x, args.fov_y, args.width, args.height)?;
            emit(stdout, json!({ "f_x": f_x, "f_y": f_y }))
        }
        Command::Metrics(args) => cmd_metrics(args, stdout),
        Command::Disparity(args) => cmd_disparity(args, stdout),
        Command::Ssim(args) => cmd_ssim(args, stdout),
        Command::Pca3(args) => cmd_pca3(args, stdout),
        Command::Neck(args) => cmd_neck(args, stdout),
        Command::Synth(kind) => cmd_synth(kind, cli.seed, stdout),
    }
}

fn emit(stdout: &mut dyn Write, value: serde_json::Value) -> Result<()> {
    writeln!(stdout, "{value}").context("writing to stdout")?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn cmd_merge(
    args: MergeArgs,
    verbose: bool,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<()> {
    let base = read_container(&args.base).context("reading base checkpoint")?;
    let vggt = read_container(&args.vggt).context("reading vggt checkpoint")?;
    let mde = read_container(&args.mde).context("reading mde checkpoint")?;
    let config = EmwmConfig {
        gamma: args.gamma,
        epsilon: args.eps,
        max_iters: args.max_iters,
        eta: args.eta,
        beta_floor: args.beta_floor,
        lambda_init: LayerCoeffs::barycenter(),
    };
    let (merged, report) = if args.allow_partial {
        merge_emwm_partial(&base, &vggt, &mde, &config)?
    } else {
        merge_emwm(&base, &vggt, &mde, &config)?
    };
    if verbose {
        for (name, r) in &report.layers {
            writeln!(
                stderr,
                "{name}: lambda = ({:.6}, {:.6}), iterations = {}, entropy {:.6} -> {:.6}",
                r.lambda.vggt,
                r.lambda.mde,
                r.iterations,
                r.entropy_trace.first().copied().unwrap_or(0.0),
                r.entropy_trace.last().copied().unwrap_or(0.0),
            )?;
        }
    }
    write_container(&merged, &args.out).context("writing merged checkpoint")?;
    write_json(&args.report, &report.to_json(verbose))?;
    let converged = report.layers.values().filter(|r| r.converged).count();
    emit(
        stdout,
        json!({
            "out": args.out.display().to_string(),
            "report": args.report.display().to_string(),
            "layers": report.layers.len(),
            "converged": converged,
        }),
    )
}

fn cmd_solve_camera(args: SolveCameraArgs, stdout: &mut dyn Write) -> Result<()> {
    let cloud = PointCloud::from_csv_path(&args.points).context("reading point cloud")?;
    let config = LmConfig {
        max_iters: args.max_iters,
        ..LmConfig::default()
    };
    let solution = solve_camera(&cloud, &config)?;
    let value = serde_json::to_value(&solution)?;
    if let Some(out) = &args.out {
        write_json(out, &value)?;
    }
    emit(stdout, value)
}

/// Loads a grid from CSV (by extension) or from a single-layer container.
fn load_grid(path: &Path) -> Result<GridMap> {
    if is_csv(path) {
        return GridMap::from_csv_path(path).with_context(|| format!("reading {}", path.display()));
    }
    let (name, tensor) = single_layer(path)?;
    GridMap::from_tensor(&tensor)
        .with_context(|| format!("layer '{name}' of {} is not a rank-2 grid", path.display()))
}

/// Loads an image stack: rank-2 tensors become one channel, rank-3
/// tensors are split along their leading axis.
fn load_channels(path: &Path) -> Result<Vec<GridMap>> {
    if is_csv(path) {
        return Ok(vec![GridMap::from_csv_path(path)?]);
    }
    let (name, tensor) = single_layer(path)?;
    match tensor.rank() {
        2 => Ok(vec![GridMap::from_tensor(&tensor)?]),
        3 => {
            let (c, h, w) = (tensor.shape()[0], tensor.shape()[1], tensor.shape()[2]);
            let mut channels = Vec::with_capacity(c);
            for i in 0..c {
                let slice = tensor.data()[i * h * w..(i + 1) * h * w].to_vec();
                channels.push(GridMap::new(h, w, slice)?);
            }
            Ok(channels)
        }
        r => bail!(
            "layer '{name}' of {} has rank {r}; expected 2 or 3",
            path.display()
        ),
    }
}

fn load_matrix(path: &Path) -> Result<FeatureMap> {
    if is_csv(path) {
        let grid = GridMap::from_csv_path(path)?;
        if grid.valid_count() != grid.values().len() {
            bail!(
                "{}: feature matrices cannot contain invalid (nan) cells",
                path.display()
            );
        }
        return Ok(FeatureMap::new(
            grid.height(),
            grid.width(),
            grid.values().to_vec(),
        )?);
    }
    let (name, tensor) = single_layer(path)?;
    FeatureMap::from_tensor(&tensor)
        .with_context(|| format!("layer '{name}' of {} is not a rank-2 matrix", path.display()))
}

fn single_layer(path: &Path) -> Result<(String, Tensor)> {
    let ckpt = read_container(path).with_context(|| format!("reading {}", path.display()))?;
    if ckpt.len() != 1 {
        let names: Vec<&str> = ckpt.names().collect();
        bail!(
            "{} must hold exactly one layer, found {}: {names:?}",
            path.display(),
            ckpt.len()
        );
    }
    let (name, tensor) = ckpt.iter().next().expect("len checked");
    Ok((name.to_string(), tensor.clone()))
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false)
}

fn write_grid(path: &Path, grid: &GridMap, layer: &str) -> Result<()> {
    if is_csv(path) {
        grid.to_csv_path(path)
            .with_context(|| format!("writing {}", path.display()))?;
        return Ok(());
    }
    if grid.valid_count() != grid.values().len() {
        bail!(
            "{}: the container format has no validity mask; write masked grids to .csv",
            path.display()
        );
    }
    let mut ckpt = Checkpoint::new();
    ckpt.insert(layer, grid.to_tensor(DType::F64));
    write_container(&ckpt, path).with_context(|| format!("writing {}", path.display()))
}

fn cmd_metrics(args: MetricsArgs, stdout: &mut dyn Write) -> Result<()> {
    let pred = load_grid(&args.pred)?;
    let gt = load_grid(&args.gt)?;
    let epe_value = epe(&pred, &gt)?;
    let mut bad = serde_json::Map::new();
    for &t in &args.thresholds {
        bad.insert(format!("{t}"), json!(bad_pixel_rate(&pred, &gt, t)?));
    }
    let d1 = bad_pixel_rate_d1(&pred, &gt, 3.0, 0.05)?;
    let joint = pred
        .valid()
        .iter()
        .zip(gt.valid())
        .filter(|(a, b)| **a && **b)
        .count();
    emit(
        stdout,
        json!({
            "epe": epe_value,
            "bad": bad,
            "d1": d1,
            "joint_valid": joint,
        }),
    )
}

fn cmd_disparity(args: DisparityArgs, stdout: &mut dyn Write) -> Result<()> {
    let input = load_grid(&args.depth)?;
    let rig = StereoRig::new(args.f, args.baseline)?;
    let (output, layer) = if args.invert {
        (depth_from_disparity(&input, rig)?, "depth")
    } else {
        (disparity_from_depth(&input, rig)?, "disparity")
    };
    write_grid(&args.out, &output, layer)?;
    emit(
        stdout,
        json!({
            "out": args.out.display().to_string(),
            "kind": layer,
            "valid": output.valid_count(),
        }),
    )
}

fn cmd_ssim(args: SsimArgs, stdout: &mut dyn Write) -> Result<()> {
    let a = load_channels(&args.a)?;
    let b = load_channels(&args.b)?;
    let config = SsimConfig::with_range(args.l);
    let value = ssim_multichannel(&a, &b, &config)?;
    emit(stdout, json!({ "ssim": value, "channels": a.len() }))
}

fn cmd_pca3(args: Pca3Args, stdout: &mut dyn Write) -> Result<()> {
    let features = load_matrix(&args.features)?;
    let pca = pca_project3(&features)?;

    // Total variance (trace of the covariance) for the explained share.
    let t = features.rows();
    let mut total_var = 0.0;
    for j in 0..features.cols() {
        let mean: f64 = (0..t).map(|r| features.get(r, j)).sum::<f64>() / t as f64;
        total_var += (0..t)
            .map(|r| (features.get(r, j) - mean).powi(2))
            .sum::<f64>()
            / (t - 1) as f64;
    }
    let explained: f64 = pca.eigenvalues.iter().sum::<f64>() / total_var.max(f64::MIN_POSITIVE);

    // Min-max normalized scores in [0, 1] per component, the form most
    // viewers want for an RGB preview. Constant columns map to 0.5.
    let mut minmax = Vec::with_capacity(t * 3);
    for k in 0..3 {
        let column: Vec<f64> = (0..t).map(|r| pca.scores.get(r, k)).collect();
        let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        minmax.push(move |x: f64| if span > 0.0 { (x - lo) / span } else { 0.5 });
    }
    let mut minmax_data = Vec::with_capacity(t * 3);
    for r in 0..t {
        for (k, f) in minmax.iter().enumerate() {
            minmax_data.push(f(pca.scores.get(r, k)));
        }
    }

    let mut out = Checkpoint::new();
    out.insert("scores", pca.scores.to_tensor(DType::F64));
    out.insert("scores_minmax", Tensor::f64(vec![t, 3], minmax_data)?);
    out.insert("components", pca.components.to_tensor(DType::F64));
    out.insert(
        "eigenvalues",
        Tensor::f64(vec![3], pca.eigenvalues.to_vec())?,
    );
    write_container(&out, &args.out).context("writing projection container")?;
    emit(
        stdout,
        json!({
            "out": args.out.display().to_string(),
            "eigenvalues": pca.eigenvalues.to_vec(),
            "explained_variance_fraction": explained,
        }),
    )
}

fn cmd_neck(args: NeckArgs, stdout: &mut dyn Write) -> Result<()> {
    let mde = load_matrix(&args.mde)?;
    let fa = load_matrix(&args.fa)?;
    let fused = modulate(&mde, &fa, args.alpha)?;
    if is_csv(&args.out) {
        let grid = GridMap::new(fused.rows(), fused.cols(), fused.data().to_vec())?;
        grid.to_csv_path(&args.out)
            .with_context(|| format!("writing {}", args.out.display()))?;
    } else {
        let mut ckpt = Checkpoint::new();
        ckpt.insert("features", fused.to_tensor(DType::F64));
        write_container(&ckpt, &args.out).context("writing fused features")?;
    }
    emit(
        stdout,
        json!({
            "out": args.out.display().to_string(),
            "rows": fused.rows(),
            "cols": fused.cols(),
            "alpha": args.alpha,
        }),
    )
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_synth(kind: SynthKind, seed: u64, stdout: &mut dyn Write) -> Result<()> {
    match kind {
        SynthKind::PinholeCloud(args) => {
            ensure_dir(&args.out_dir)?;
            let params = synth::PinholeParams {
                n: args.n,
                f: args.f,
                s: args.s,
                width: args.width,
                height: args.height,
                z_min: args.z_min,
                z_max: args.z_max,
                noise_sigma: args.noise_sigma,
            };
            let (cloud, truth) = synth::pinhole_cloud(&params, seed)?;
            let cloud_path = args.out_dir.join("cloud.csv");
            let truth_path = args.out_dir.join("truth.json");
            cloud.to_csv_path(&cloud_path)?;
            write_json(&truth_path, &serde_json::to_value(truth)?)?;
            emit(
                stdout,
                json!({
                    "cloud": cloud_path.display().to_string(),
                    "truth": truth_path.display().to_string(),
                    "n": args.n,
                }),
            )
        }
        SynthKind::CheckpointTriple(args) => {
            ensure_dir(&args.out_dir)?;
            let [base, vggt, mde] = synth::checkpoint_triple(args.layers, args.neurons, seed);
            let paths = [
                args.out_dir.join("base.gmrg"),
                args.out_dir.join("vggt.gmrg"),
                args.out_dir.join("mde.gmrg"),
            ];
            write_container(&base, &paths[0])?;
            write_container(&vggt, &paths[1])?;
            write_container(&mde, &paths[2])?;
            emit(
                stdout,
                json!({
                    "base": paths[0].display().to_string(),
                    "vggt": paths[1].display().to_string(),
                    "mde": paths[2].display().to_string(),
                    "layers": args.layers,
                }),
            )
        }
        SynthKind::FeaturePair(args) => {
            ensure_dir(&args.out_dir)?;
            let (mde, fa) = synth::feature_pair(args.rows, args.cols, seed)?;
            let mde_path = args.out_dir.join("mde.gmrg");
            let fa_path = args.out_dir.join("fa.gmrg");
            for (map, path) in [(&mde, &mde_path), (&fa, &fa_path)] {
                let mut ckpt = Checkpoint::new();
                ckpt.insert("features", map.to_tensor(DType::F64));
                write_container(&ckpt, path)?;
            }
            emit(
                stdout,
                json!({
                    "mde": mde_path.display().to_string(),
                    "fa": fa_path.display().to_string(),
                    "rows": args.rows,
                    "cols": args.cols,
                }),
            )
        }
        SynthKind::DisparityPair(args) => {
            ensure_dir(&args.out_dir)?;
            let (gt, pred) = synth::disparity_pair(args.height, args.width, args.offset, seed)?;
            let gt_path = args.out_dir.join("gt.gmrg");
            let pred_path = args.out_dir.join("pred.gmrg");
            for (map, path) in [(&gt, &gt_path), (&pred, &pred_path)] {
                let mut ckpt = Checkpoint::new();
                ckpt.insert("disparity", map.to_tensor(DType::F64));
                write_container(&ckpt, path)?;
            }
            emit(
                stdout,
                json!({
                    "gt": gt_path.display().to_string(),
                    "pred": pred_path.display().to_string(),
                    "offset": args.offset,
                }),
            )
        }
    }
}
