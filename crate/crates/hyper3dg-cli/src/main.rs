//! Command-line front end for the hyper3dg refinement pipeline.
//!
//! Subcommands:
//! - `init`        synthesize or convert a Gaussian cloud to PLY
//! - `optimize`    run the full guided optimization loop
//! - `refine-step` apply one hypergraph refinement and report increment stats
//! - `render`      render a PLY from sampled poses to PNGs
//! - `patchify`    cluster a PLY into patches (labels CSV + centroids PLY)
//! - `bench`       time patchify, structure construction, and one convolution
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
//! failure. Every scalar configuration field has a long flag; `--config`
//! accepts a JSON document whose keys mirror the configuration field names,
//! with explicit flags taking precedence over the document.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, Vector3};

use hyper3dg::camera::sample_poses;
use hyper3dg::error::{Error, Result};
use hyper3dg::featurize::{standardize_columns, ExtractorSpec};
use hyper3dg::gs::{
    synth_init, Gaussian, GaussianCloud, SynthShape, ATTR_DIM, COL_COLOR, COL_LOG_SCALE,
    COL_OPACITY, COL_POSITION, COL_ROTATION,
};
use hyper3dg::guidance::{NoisePredictor, OmegaMode, PointMassPredictor, ZeroPredictor};
use hyper3dg::hypergraph::{
    build_knn_hypergraph, concat_hypergraphs, hgnn_forward, HypergraphGroup, ThetaDiag,
};
use hyper3dg::patchify::{kmeans, patch_means};
use hyper3dg::pipeline::{
    hg_refine_step, optimize, InitSource, PhaseTimes, PipelineConfig, RefineCaches, RefineOperator,
};
use hyper3dg::ply::{load_ply, save_ply};
use hyper3dg::render::{export_png, load_png, render};

#[derive(Parser)]
#[command(
    name = "hyper3dg",
    version,
    about = "Patch-hypergraph refinement for 3D Gaussian clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a Gaussian cloud (or convert an existing PLY) to PLY.
    Init(InitArgs),
    /// Run the full optimization loop and write the final cloud.
    Optimize(OptimizeArgs),
    /// Apply one hypergraph refinement step and print increment statistics.
    RefineStep(RefineStepArgs),
    /// Render a cloud from sampled camera poses to PNG files.
    Render(RenderArgs),
    /// Cluster a cloud into patches; write labels CSV and centroids PLY.
    Patchify(PatchifyArgs),
    /// Time patchify + hypergraph construction + one convolution; print JSON.
    Bench(BenchArgs),
}

/// One optional flag per configuration field; omitted flags fall back to the
/// `--config` document and then to the defaults.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON document whose keys mirror the configuration field names exactly.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n0: Option<usize>,
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    k_pat: Option<usize>,
    #[arg(long)]
    k_spa: Option<usize>,
    #[arg(long)]
    k_lat: Option<usize>,
    #[arg(long)]
    position_lr: Option<f64>,
    #[arg(long)]
    color_lr: Option<f64>,
    #[arg(long)]
    opacity_lr: Option<f64>,
    #[arg(long)]
    theta_lr: Option<f64>,
    #[arg(long)]
    total_iterations: Option<usize>,
    #[arg(long)]
    cm_count: Option<usize>,
    #[arg(long)]
    refine_damping: Option<f64>,
    #[arg(long)]
    leaky_slope: Option<f64>,
    /// Convolution used by the refiner: `hgnn` (default) or `gcn`.
    #[arg(long)]
    convolution: Option<String>,
    #[arg(long)]
    w_spa: Option<f64>,
    #[arg(long)]
    w_lat: Option<f64>,
    #[arg(long)]
    feature_views: Option<usize>,
    #[arg(long)]
    kmeans_max_iter: Option<usize>,
    #[arg(long)]
    camera_radius: Option<f64>,
    #[arg(long)]
    image_width: Option<usize>,
    #[arg(long)]
    image_height: Option<usize>,
    #[arg(long)]
    fov_y: Option<f64>,
    /// Composite background as `r,g,b` in [0, 1].
    #[arg(long)]
    background: Option<String>,
    #[arg(long)]
    t_steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long)]
    ism_delta_t: Option<usize>,
    #[arg(long)]
    ism_delta_s: Option<usize>,
    #[arg(long)]
    ism_t_max: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    /// Guidance weight: `one-minus-alpha-bar` or `constant=VALUE`.
    #[arg(long)]
    omega: Option<String>,
    /// Patch feature extractor: `downsample-gray=GRID`, `rgb-hist=BINS`,
    /// or `external=COMMAND`.
    #[arg(long)]
    extractor: Option<String>,
    #[arg(long)]
    output_ply: Option<String>,
}

impl ConfigArgs {
    /// Resolve defaults → `--config` document → explicit flags.
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                    path: path.clone(),
                    source,
                })?;
                serde_json::from_str::<PipelineConfig>(&text).map_err(|e| {
                    Error::Config(format!(
                        "{}: not a valid configuration document: {e}",
                        path.display()
                    ))
                })?
            }
            None => PipelineConfig::default(),
        };
        macro_rules! take {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        take!(
            seed,
            n0,
            n1,
            k_pat,
            k_spa,
            k_lat,
            position_lr,
            color_lr,
            opacity_lr,
            theta_lr,
            total_iterations,
            cm_count,
            refine_damping,
            leaky_slope,
            w_spa,
            w_lat,
            feature_views,
            kmeans_max_iter,
            camera_radius,
            image_width,
            image_height,
            fov_y,
            t_steps,
            beta_start,
            beta_end,
            output_ply,
        );
        if let Some(v) = self.ism_delta_t {
            cfg.ism.delta_t = v;
        }
        if let Some(v) = self.ism_delta_s {
            cfg.ism.delta_s = v;
        }
        if let Some(v) = self.ism_t_max {
            cfg.ism.t_max = v;
        }
        if let Some(v) = self.cfg_scale {
            cfg.ism.cfg_scale = v;
        }
        if let Some(spec) = &self.omega {
            cfg.ism.omega_mode = parse_omega(spec)?;
        }
        if let Some(spec) = &self.convolution {
            cfg.use_gcn = match spec.as_str() {
                "hgnn" => false,
                "gcn" => true,
                other => {
                    return Err(Error::Config(format!(
                        "convolution must be `hgnn` or `gcn`, got `{other}`"
                    )))
                }
            };
        }
        if let Some(spec) = &self.background {
            cfg.background = parse_background(spec)?;
        }
        if let Some(spec) = &self.extractor {
            cfg.extractor = parse_extractor(spec)?;
        }
        cfg.validate()?;
        warn_k_pat(cfg.k_pat);
        Ok(cfg)
    }
}

/// Patch counts far from the working range produce visible artifacts.
fn warn_k_pat(k_pat: usize) {
    if !(10..=150).contains(&k_pat) {
        eprintln!(
            "warning: k_pat = {k_pat} is outside the recommended range [10, 150]; expect artifacts"
        );
    }
}

#[derive(Args)]
struct InitArgs {
    /// Existing PLY to round-trip instead of synthesizing.
    #[arg(long, conflicts_with_all = ["shape", "count"])]
    input: Option<PathBuf>,
    /// Synthetic shape: `sphere[=RADIUS]`, `box[=HX,HY,HZ]`,
    /// or `two-blobs[=SEPARATION,RADIUS]`.
    #[arg(long, default_value = "sphere=1.0")]
    shape: String,
    /// Number of Gaussians to synthesize.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination PLY path.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Initial cloud from a PLY file (default: synthesize).
    #[arg(long)]
    init_ply: Option<PathBuf>,
    /// Synthetic initial shape (when no `--init-ply`).
    #[arg(long, default_value = "sphere=1.0")]
    shape: String,
    /// Synthetic initial Gaussian count (when no `--init-ply`).
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Condition label associated with the guidance target.
    #[arg(long, default_value = "subject")]
    prompt: String,
    /// Guidance target as a PNG image (linearized on load).
    #[arg(long, conflicts_with = "target_ply")]
    target_png: Option<PathBuf>,
    /// Guidance target rendered from a reference PLY.
    #[arg(long)]
    target_ply: Option<PathBuf>,
    /// Pose seed for rendering the `--target-ply` reference.
    #[arg(long, default_value_t = 99)]
    target_view_seed: u64,
    /// Write the run report as JSON to this path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RefineStepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Input cloud (PLY).
    #[arg(long)]
    input: PathBuf,
    /// Refined cloud destination (PLY).
    #[arg(long)]
    output: PathBuf,
    /// Write the hypergraph incidence as a text edge list (`edge: v1 v2 …`).
    #[arg(long)]
    dump_edges: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Input cloud (PLY).
    #[arg(long)]
    input: PathBuf,
    /// Directory for `view_###.png` files (created if missing).
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of sampled poses.
    #[arg(long, default_value_t = 8)]
    views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 0.8)]
    fov_y: f64,
    /// Camera sphere radius.
    #[arg(long, default_value_t = 4.0)]
    radius: f64,
    /// Composite background as `r,g,b` in [0, 1].
    #[arg(long, default_value = "0,0,0")]
    background: String,
}

#[derive(Args)]
struct PatchifyArgs {
    /// Input cloud (PLY).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 50)]
    k_pat: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Labels CSV destination (`index,label` rows).
    #[arg(long, default_value = "labels.csv")]
    labels: PathBuf,
    /// Centroids PLY destination.
    #[arg(long, default_value = "centroids.ply")]
    centroids: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Synthetic cloud size.
    #[arg(long, default_value_t = 100_000)]
    m: usize,
    #[arg(long, default_value_t = 50)]
    k_pat: usize,
    #[arg(long, default_value_t = 13)]
    k_spa: usize,
    #[arg(long, default_value_t = 13)]
    k_lat: usize,
    /// Latent feature width used for the latent KNN and the convolution.
    #[arg(long, default_value_t = 64)]
    latent_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    kmeans_max_iter: usize,
}

fn parse_background(spec: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "background must be `r,g,b`, got `{spec}`"
        )));
    }
    let mut out = [0.0; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("background channel `{part}` is not a number")))?;
    }
    Ok(out)
}

fn parse_omega(spec: &str) -> Result<OmegaMode> {
    if spec == "one-minus-alpha-bar" {
        return Ok(OmegaMode::OneMinusAlphaBar);
    }
    if let Some(value) = spec.strip_prefix("constant=") {
        let value = value
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("omega constant `{value}` is not a number")))?;
        return Ok(OmegaMode::Constant { value });
    }
    Err(Error::Config(format!(
        "omega must be `one-minus-alpha-bar` or `constant=VALUE`, got `{spec}`"
    )))
}

fn parse_extractor(spec: &str) -> Result<ExtractorSpec> {
    let (kind, arg) = spec.split_once('=').unwrap_or((spec, ""));
    match kind {
        "downsample-gray" => {
            let grid = arg
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("downsample-gray needs `=GRID`, got `{spec}`")))?;
            Ok(ExtractorSpec::DownsampleGray { grid })
        }
        "rgb-hist" => {
            let bins = arg
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("rgb-hist needs `=BINS`, got `{spec}`")))?;
            Ok(ExtractorSpec::RgbHist { bins })
        }
        "external" if !arg.is_empty() => Ok(ExtractorSpec::External { command: arg.to_string() }),
        _ => Err(Error::Config(format!(
            "extractor must be `downsample-gray=GRID`, `rgb-hist=BINS`, or `external=COMMAND`, got `{spec}`"
        ))),
    }
}

fn parse_shape(spec: &str) -> Result<SynthShape> {
    let (kind, arg) = spec.split_once('=').unwrap_or((spec, ""));
    let floats = |s: &str, n: usize| -> Result<Vec<f64>> {
        let parts: Vec<&str> = if s.is_empty() {
            Vec::new()
        } else {
            s.split(',').collect()
        };
        if parts.len() != n {
            return Err(Error::Config(format!(
                "shape `{kind}` needs {n} parameter(s), got `{spec}`"
            )));
        }
        parts
            .iter()
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("shape parameter `{p}` is not a number")))
            })
            .collect()
    };
    match kind {
        "sphere" => {
            let radius = if arg.is_empty() {
                1.0
            } else {
                floats(arg, 1)?[0]
            };
            Ok(SynthShape::Sphere { radius })
        }
        "box" => {
            let v = if arg.is_empty() {
                vec![1.0; 3]
            } else {
                floats(arg, 3)?
            };
            Ok(SynthShape::Box {
                half_extents: [v[0], v[1], v[2]],
            })
        }
        "two-blobs" => {
            let v = if arg.is_empty() {
                vec![2.0, 0.8]
            } else {
                floats(arg, 2)?
            };
            Ok(SynthShape::TwoBlobs {
                separation: v[0],
                radius: v[1],
            })
        }
        other => Err(Error::Config(format!(
            "shape must be `sphere`, `box`, or `two-blobs`, got `{other}`"
        ))),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run_init(args: InitArgs) -> Result<()> {
    let cloud = match &args.input {
        Some(path) => load_ply(path)?,
        None => synth_init(parse_shape(&args.shape)?, args.count, args.seed)?,
    };
    save_ply(&cloud, &args.output)?;
    println!(
        "wrote {} Gaussians to {}",
        cloud.len(),
        args.output.display()
    );
    Ok(())
}

fn run_optimize(args: OptimizeArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let init = match &args.init_ply {
        Some(path) => InitSource::Ply(path.clone()),
        None => InitSource::Synth {
            shape: parse_shape(&args.shape)?,
            count: args.count,
        },
    };

    // Guidance target: explicit PNG, a rendered reference cloud, or none
    // (zero guidance; the loop still runs and the cloud stays put).
    let target = match (&args.target_png, &args.target_ply) {
        (Some(path), _) => Some(load_png(path)?.rgb),
        (None, Some(path)) => {
            let reference = load_ply(path)?;
            let pose = sample_poses(
                1,
                cfg.camera_radius,
                args.target_view_seed,
                &cfg.intrinsics(),
            )?
            .remove(0);
            Some(render(&reference, &pose, cfg.background)?.rgb)
        }
        (None, None) => None,
    };
    let (predictor, y): (Box<dyn NoisePredictor>, Option<String>) = match target {
        Some(image) => {
            let mut targets = BTreeMap::new();
            targets.insert(args.prompt.clone(), image);
            (
                Box::new(PointMassPredictor::new(cfg.schedule()?, targets)?),
                Some(args.prompt.clone()),
            )
        }
        None => (Box::new(ZeroPredictor), None),
    };

    let report = optimize(&cfg, init, y.as_deref(), predictor.as_ref())?;
    let first = report.loss_trace.first().copied().unwrap_or(0.0);
    let last = report.loss_trace.last().copied().unwrap_or(0.0);
    println!(
        "ran {} iterations (loss {first:.6} -> {last:.6}), {} structure rebuilds, {} cache hits, converged: {}",
        report.loss_trace.len(),
        report.structure_rebuilds,
        report.structure_cache_hits,
        report.converged,
    );
    println!("final cloud: {}", report.final_cloud_path);
    if let Some(path) = &args.report {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("could not serialize the run report: {e}")))?;
        write_text(path, &json)?;
        println!("report: {}", path.display());
    }
    Ok(())
}

/// Per-attribute-group statistics of the refinement increment.
fn increment_stats(delta: &DMatrix<f64>) -> serde_json::Value {
    let group = |cols: std::ops::Range<usize>| {
        let mut max_abs = 0.0f64;
        let mut sum_abs = 0.0f64;
        let mut count = 0usize;
        for col in cols {
            for row in 0..delta.nrows() {
                let v = delta[(row, col)].abs();
                max_abs = max_abs.max(v);
                sum_abs += v;
                count += 1;
            }
        }
        serde_json::json!({
            "max_abs": max_abs,
            "mean_abs": if count == 0 { 0.0 } else { sum_abs / count as f64 },
        })
    };
    serde_json::json!({
        "gaussians": delta.nrows(),
        "frobenius_norm": delta.iter().map(|v| v * v).sum::<f64>().sqrt(),
        "position": group(COL_POSITION),
        "opacity": group(COL_OPACITY..COL_OPACITY + 1),
        "log_scale": group(COL_LOG_SCALE),
        "rotation": group(COL_ROTATION),
        "color": group(COL_COLOR),
    })
}

fn run_refine_step(args: RefineStepArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let cloud = load_ply(&args.input)?;
    let mut caches = RefineCaches::new();
    let mut theta = None;
    let mut times = PhaseTimes::default();
    let outcome = hg_refine_step(&cloud, &mut caches, &cfg, &mut theta, &mut times)?;
    save_ply(&outcome.cloud, &args.output)?;

    if let Some(path) = &args.dump_edges {
        match caches.operator.as_ref() {
            Some(RefineOperator::Hyper(h)) => write_text(path, &h.dump_edge_list())?,
            _ => {
                return Err(Error::Config(
                    "--dump-edges needs the hypergraph convolution (got `gcn`)".into(),
                ))
            }
        }
    }
    let stats = increment_stats(&outcome.delta);
    println!(
        "{}",
        serde_json::to_string_pretty(&stats).expect("static JSON shape")
    );
    Ok(())
}

fn run_render(args: RenderArgs) -> Result<()> {
    let cloud = load_ply(&args.input)?;
    let background = parse_background(&args.background)?;
    let lens = hyper3dg::camera::CameraIntrinsics {
        fov_y: args.fov_y,
        width: args.width,
        height: args.height,
    };
    std::fs::create_dir_all(&args.out_dir).map_err(|source| Error::Io {
        path: args.out_dir.clone(),
        source,
    })?;
    let poses = sample_poses(args.views, args.radius, args.seed, &lens)?;
    for (i, pose) in poses.iter().enumerate() {
        let image = render(&cloud, pose, background)?;
        let path = args.out_dir.join(format!("view_{i:03}.png"));
        export_png(&image, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run_patchify(args: PatchifyArgs) -> Result<()> {
    warn_k_pat(args.k_pat);
    let cloud = load_ply(&args.input)?;
    let assignment = kmeans(&cloud.positions(), args.k_pat, args.seed, args.max_iter)?;

    let mut csv = String::from("index,label\n");
    for (i, label) in assignment.labels.iter().enumerate() {
        csv.push_str(&format!("{i},{label}\n"));
    }
    write_text(&args.labels, &csv)?;

    // Centroids as a point-style cloud: neutral appearance, position only.
    let centroid_cloud = GaussianCloud::new(
        assignment
            .centroids
            .iter()
            .map(|c| Gaussian {
                position: *c,
                opacity_logit: 0.0,
                log_scale: Vector3::from_element((0.05f64).ln()),
                rotation: [1.0, 0.0, 0.0, 0.0],
                color: Vector3::from_element(0.5),
            })
            .collect(),
    )?;
    save_ply(&centroid_cloud, &args.centroids)?;
    println!(
        "{} Gaussians into {} patches; labels: {}, centroids: {}",
        cloud.len(),
        assignment.k(),
        args.labels.display(),
        args.centroids.display()
    );
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let cloud = synth_init(SynthShape::Sphere { radius: 1.0 }, args.m, args.seed)?;

    let t0 = Instant::now();
    let assignment = kmeans(
        &cloud.positions(),
        args.k_pat,
        args.seed,
        args.kmeans_max_iter,
    )?;
    let patchify_s = t0.elapsed().as_secs_f64();

    let k = assignment.k();
    let mut centroids = DMatrix::zeros(k, 3);
    for (p, c) in assignment.centroids.iter().enumerate() {
        centroids[(p, 0)] = c.x;
        centroids[(p, 1)] = c.y;
        centroids[(p, 2)] = c.z;
    }
    // Latent features stand in for extractor output: the construction and
    // convolution costs under measurement do not depend on feature content.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    let latent = DMatrix::from_fn(k, args.latent_dim, |_, _| rng.gen_range(0.0..1.0));
    let latent = standardize_columns(&latent, 1e-8)?;

    let t0 = Instant::now();
    let h_spa = build_knn_hypergraph(&centroids, args.k_spa, HypergraphGroup::Spatial)?;
    let spatial_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let h_lat = build_knn_hypergraph(&latent, args.k_lat, HypergraphGroup::Latent)?;
    let latent_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let h = concat_hypergraphs(&h_spa, &h_lat, 1.0, 1.0)?;
    let concat_s = t0.elapsed().as_secs_f64();

    let attrs = cloud.to_attribute_matrix();
    let v_bar = patch_means(&attrs, &assignment)?;
    let mut x = DMatrix::zeros(k, ATTR_DIM + args.latent_dim);
    x.view_mut((0, 0), (k, ATTR_DIM)).copy_from(&v_bar);
    x.view_mut((0, ATTR_DIM), (k, args.latent_dim))
        .copy_from(&latent);
    let theta = ThetaDiag::ones(x.ncols());

    let t0 = Instant::now();
    let _ = hgnn_forward(&x, &h, &theta, 0.01)?;
    let forward_s = t0.elapsed().as_secs_f64();

    let report = serde_json::json!({
        "m": args.m,
        "k_pat": args.k_pat,
        "patchify_s": patchify_s,
        "spatial_construction_s": spatial_s,
        "latent_construction_s": latent_s,
        "concat_s": concat_s,
        "forward_s": forward_s,
        "total_s": patchify_s + spatial_s + latent_s + concat_s + forward_s,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("static JSON shape")
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init(args) => run_init(args),
        Command::Optimize(args) => run_optimize(args),
        Command::RefineStep(args) => run_refine_step(args),
        Command::Render(args) => run_render(args),
        Command::Patchify(args) => run_patchify(args),
        Command::Bench(args) => run_bench(args),
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
