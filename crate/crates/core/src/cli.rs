//! Command-line surface.
//!
//! Exit codes: 0 success, 1 usage, 2 model/format error, 3 numeric
//! validation failure. Output files are written atomically and only after
//! every computation has succeeded.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::cam::{
    contrast_sweep, explain_seed, patch_regression_explanation, why_explanation, CamOptions, PatchOptions,
    DEFAULT_VARIANCE_BOOST,
};
use crate::contrast::{contrast_seed, ContrastTarget};
use crate::engine::gradcheck::{gradcheck_model, DEFAULT_EPS, GRADCHECK_TOLERANCE};
use crate::engine::{forward, predict, Prediction};
use crate::error::Error;
use crate::model::{infer_shapes, load_model, ModelGraph, ModelManifest, Task};
use crate::tensor::{bilinear_resize, Tensor};
use crate::visual::{
    decode_image, encode_png, image_tensor, load_and_preprocess, orient_regression_map, render, write_atomic,
    ImageBuffer, RenderMode, RenderSpec,
};

#[derive(Debug, Parser)]
#[command(
    name = "contrastcam",
    version,
    about = "Contrastive Grad-CAM explanations: why P, rather than Q?",
    after_help = "Exit codes: 0 success, 1 usage error, 2 model/format error, 3 numeric validation failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Model manifest (JSON)
    #[arg(long, global = true, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Tensor blob store (CTSB)
    #[arg(long, global = true, value_name = "PATH")]
    blobs: Option<PathBuf>,
    /// Input image (PNG or binary PPM); the distorted image for `iqa`
    #[arg(long, global = true, value_name = "PATH")]
    image: Option<PathBuf>,
    /// Reference image stacked before `--image` channels (`iqa` only)
    #[arg(long, global = true, value_name = "PATH")]
    reference: Option<PathBuf>,
    /// Contrast target: class label, class index, `self`, or a scalar for regression models
    #[arg(long, global = true, value_name = "TARGET", allow_hyphen_values = true)]
    target: Option<String>,
    /// Output PNG path (`sweep` writes <stem>_mean.png and <stem>_variance.png)
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Overlay opacity in [0, 1]
    #[arg(long, global = true, default_value_t = 0.5)]
    alpha: f32,
    /// Map gain before rendering (default 1; 5 for the sweep variance map)
    #[arg(long, global = true)]
    boost: Option<f32>,
    /// Keep negative combined values in classification maps
    #[arg(long, global = true)]
    no_rectify: bool,
    /// Patch stride for `iqa`
    #[arg(long, global = true, default_value_t = 4)]
    stride: usize,
    /// Divide overlapping patch contributions by their coverage (`iqa`)
    #[arg(long, global = true)]
    average_overlap: bool,
    /// Worker threads for sweeps and patches
    #[arg(long, global = true, env = "CONTRASTCAM_WORKERS", default_value_t = 1)]
    workers: usize,
    /// Seed for the random gradcheck input when no image is given
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Grad-CAM overlay for the predicted class (or --target class)
    Explain,
    /// Contrastive overlay: why P, rather than --target?
    Contrast,
    /// Mean and variance of contrast maps over every Q != P
    Sweep,
    /// Patch-wise signed contrast map of a quality regressor against a scalar --target
    Iqa,
    /// Compare analytic gradients with finite differences
    Gradcheck,
    /// Print the manifest summary and inferred shapes
    Inspect,
}

/// A validated invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub command: Command,
    pub manifest: PathBuf,
    pub blobs: PathBuf,
    pub image: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub target: Option<ContrastTarget>,
    pub out: Option<PathBuf>,
    pub alpha: f32,
    pub boost: Option<f32>,
    pub rectify: bool,
    pub stride: usize,
    pub average_overlap: bool,
    pub workers: usize,
    pub seed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// `--help` / `--version` output; not a failure.
    #[error("{0}")]
    Info(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Model(Error),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Info(_) => 0,
            CliError::Usage(_) => 1,
            CliError::Model(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Target(_) | Error::Task(_) => CliError::Usage(e.to_string()),
            other => CliError::Model(other),
        }
    }
}

/// What a successful command printed and wrote.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub lines: Vec<String>,
    pub written: Vec<PathBuf>,
    pub exit_code: i32,
}

fn require<T: Clone>(value: &Option<T>, flag: &str, command: Command) -> Result<T, CliError> {
    value.clone().ok_or_else(|| {
        CliError::Usage(format!(
            "missing required flag --{flag} for `{}`",
            command_name(command)
        ))
    })
}

fn command_name(c: Command) -> &'static str {
    match c {
        Command::Explain => "explain",
        Command::Contrast => "contrast",
        Command::Sweep => "sweep",
        Command::Iqa => "iqa",
        Command::Gradcheck => "gradcheck",
        Command::Inspect => "inspect",
    }
}

/// Resolves a textual target against the manifest: class labels match
/// case-sensitively first, then `self`, then a class index or scalar.
pub fn resolve_target(text: &str, manifest: &ModelManifest) -> Result<ContrastTarget, CliError> {
    match manifest.task {
        Task::Classification => {
            let labels = manifest.class_labels.as_deref().unwrap_or(&[]);
            if let Some(i) = labels.iter().position(|l| l == text) {
                return Ok(ContrastTarget::Class(i));
            }
            if text == "self" {
                return Ok(ContrastTarget::Predicted);
            }
            match text.parse::<usize>() {
                Ok(i) if i < labels.len() => Ok(ContrastTarget::Class(i)),
                Ok(i) => Err(CliError::Usage(format!(
                    "target {i} is outside the {} classes of this model",
                    labels.len()
                ))),
                Err(_) => Err(CliError::Usage(format!("unknown class name `{text}`"))),
            }
        }
        Task::Regression => {
            if text == "self" {
                return Ok(ContrastTarget::Predicted);
            }
            let q: f32 = text
                .parse()
                .map_err(|_| CliError::Usage(format!("target `{text}` is not a number")))?;
            let [lo, hi] = manifest.output_range.unwrap_or([f32::NEG_INFINITY, f32::INFINITY]);
            if !(q >= lo && q <= hi) {
                return Err(CliError::Usage(format!(
                    "target {q} is outside the output range [{lo}, {hi}]"
                )));
            }
            Ok(ContrastTarget::Scalar(q))
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses and validates `argv` (including the program name).
pub fn parse_request<I, T>(argv: I) -> Result<Request, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| {
        use clap::error::ErrorKind;
        match e.kind() {
            ErrorKind::DisplayHelp
            | ErrorKind::DisplayVersion
            | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => CliError::Info(e.render().to_string()),
            _ => CliError::Usage(e.render().to_string()),
        }
    })?;
    let command = cli.command;
    let manifest = require(&cli.model, "model", command)?;
    let blobs = require(&cli.blobs, "blobs", command)?;
    match command {
        Command::Explain | Command::Sweep => {
            require(&cli.image, "image", command)?;
            require(&cli.out, "out", command)?;
        }
        Command::Contrast | Command::Iqa => {
            require(&cli.image, "image", command)?;
            require(&cli.target, "target", command)?;
            require(&cli.out, "out", command)?;
        }
        Command::Gradcheck | Command::Inspect => {}
    }
    if cli.reference.is_some() && command != Command::Iqa {
        return Err(CliError::Usage("--reference only applies to `iqa`".into()));
    }
    if !(0.0..=1.0).contains(&cli.alpha) {
        return Err(CliError::Usage(format!("--alpha {} is outside [0, 1]", cli.alpha)));
    }
    if let Some(b) = cli.boost {
        if !(b > 0.0) || !b.is_finite() {
            return Err(CliError::Usage(format!("--boost {b} must be positive")));
        }
    }
    if cli.stride == 0 {
        return Err(CliError::Usage("--stride must be at least 1".into()));
    }
    if cli.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }

    let target = match &cli.target {
        None => None,
        Some(text) => {
            let m = ModelManifest::from_json(&read(&manifest)?)?;
            let t = resolve_target(text, &m)?;
            if command == Command::Iqa && !matches!(t, ContrastTarget::Scalar(_)) {
                return Err(CliError::Usage("`iqa` needs a numeric --target".into()));
            }
            Some(t)
        }
    };

    Ok(Request {
        command,
        manifest,
        blobs,
        image: cli.image,
        reference: cli.reference,
        target,
        out: cli.out,
        alpha: cli.alpha,
        boost: cli.boost,
        rectify: !cli.no_rectify,
        stride: cli.stride,
        average_overlap: cli.average_overlap,
        workers: cli.workers,
        seed: cli.seed,
    })
}

fn load_graph(req: &Request) -> Result<ModelGraph, Error> {
    load_model(&read(&req.manifest)?, &read(&req.blobs)?)
}

fn describe_prediction(graph: &ModelGraph, p: Prediction) -> String {
    match p {
        Prediction::Class { index, .. } => class_name(graph, index),
        Prediction::Value(v) => format!("{v:.6}"),
    }
}

fn class_name(graph: &ModelGraph, index: usize) -> String {
    graph
        .class_labels()
        .and_then(|l| l.get(index))
        .cloned()
        .unwrap_or_else(|| index.to_string())
}

fn describe_target(graph: &ModelGraph, t: ContrastTarget) -> String {
    match t {
        ContrastTarget::Class(q) => class_name(graph, q),
        ContrastTarget::Scalar(q) => format!("{q}"),
        ContrastTarget::Predicted => "P".into(),
    }
}

fn overlay(map: &Tensor, base: &ImageBuffer, mode: RenderMode, alpha: f32, boost: f32) -> Result<Vec<u8>, Error> {
    let full = bilinear_resize(map, base.height(), base.width())?;
    let img = render(&full, base, &RenderSpec { mode, alpha, boost })?;
    encode_png(&img)
}

/// Writes every encoded image, removing earlier ones if a later write fails.
fn write_all(files: &[(PathBuf, Vec<u8>)]) -> Result<Vec<PathBuf>, Error> {
    let mut done: Vec<PathBuf> = Vec::new();
    for (path, bytes) in files {
        if let Err(e) = write_atomic(path, bytes) {
            for p in &done {
                let _ = std::fs::remove_file(p);
            }
            return Err(e);
        }
        done.push(path.clone());
    }
    Ok(done)
}

fn with_suffix(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}_{suffix}.png"))
}

/// Runs a validated request.
pub fn execute(req: &Request) -> Result<Outcome, CliError> {
    let graph = load_graph(req)?;
    let mut lines = Vec::new();
    let mut files = Vec::new();
    let mut exit_code = 0;
    let cam_opts = CamOptions {
        rectify: req.rectify,
        workers: req.workers,
    };

    match req.command {
        Command::Inspect => lines = inspect_lines(&graph),
        Command::Explain | Command::Contrast | Command::Sweep => {
            let image_path = req.image.as_ref().expect("validated");
            let bytes = read(image_path)?;
            let base = decode_image(&bytes)?;
            let input = load_and_preprocess(&bytes, graph.input_spec())?;
            let trace = forward(&graph, &input)?;
            let p = predict(&trace);
            let out = req.out.clone().expect("validated");
            match req.command {
                Command::Explain => {
                    let class = match (req.target, p) {
                        (Some(ContrastTarget::Class(c)), _) => c,
                        (None | Some(ContrastTarget::Predicted), Prediction::Class { index, .. }) => index,
                        (_, Prediction::Value(_)) => 0,
                        (Some(ContrastTarget::Scalar(_)), _) => {
                            return Err(CliError::Usage("`explain` takes a class target".into()))
                        }
                    };
                    let map = why_explanation(&trace, class)?;
                    let png = overlay(
                        &map.values,
                        &base,
                        RenderMode::Sequential,
                        req.alpha,
                        req.boost.unwrap_or(1.0),
                    )?;
                    lines.push(format!(
                        "P={} score={:.6} explained={}",
                        describe_prediction(&graph, p),
                        p.score(),
                        class_name(&graph, class)
                    ));
                    files.push((out, png));
                }
                Command::Contrast => {
                    let seeded = contrast_seed(&trace, req.target.expect("validated"))?;
                    let map = explain_seed(&trace, &seeded, &cam_opts)?;
                    let (mode, values) = match seeded.target {
                        ContrastTarget::Scalar(q) if map.signed => (
                            RenderMode::Signed,
                            orient_regression_map(&map.values, p.score() as f64, q as f64),
                        ),
                        _ if map.normalized && !map.signed => (RenderMode::Sequential, map.values.clone()),
                        _ => (RenderMode::Signed, map.values.clone()),
                    };
                    let png = overlay(&values, &base, mode, req.alpha, req.boost.unwrap_or(1.0))?;
                    lines.push(format!(
                        "P={} Q={} J={:.6}",
                        describe_prediction(&graph, p),
                        describe_target(&graph, seeded.target),
                        seeded.seed.loss
                    ));
                    files.push((out, png));
                }
                Command::Sweep => {
                    let boost = req.boost.unwrap_or(DEFAULT_VARIANCE_BOOST);
                    let stats = contrast_sweep(&trace, &cam_opts, boost)?;
                    let mean_png = overlay(&stats.display_mean(), &base, RenderMode::Sequential, req.alpha, 1.0)?;
                    let var_png = overlay(
                        &stats.display_variance(),
                        &base,
                        RenderMode::Sequential,
                        req.alpha,
                        boost,
                    )?;
                    lines.push(format!(
                        "P={} targets={} scale={:.6} variance_boost={}",
                        describe_prediction(&graph, p),
                        stats.targets_covered,
                        stats.scale,
                        boost
                    ));
                    files.push((with_suffix(&out, "mean"), mean_png));
                    files.push((with_suffix(&out, "variance"), var_png));
                }
                _ => unreachable!(),
            }
        }
        Command::Iqa => {
            if graph.task() != Task::Regression {
                return Err(CliError::Usage("`iqa` needs a regression model".into()));
            }
            let Some(ContrastTarget::Scalar(q)) = req.target else {
                return Err(CliError::Usage("`iqa` needs a numeric --target".into()));
            };
            let dist_bytes = read(req.image.as_ref().expect("validated"))?;
            let base = decode_image(&dist_bytes)?;
            let input = iqa_input(&graph, req.reference.as_deref(), &dist_bytes)?;
            let opts = PatchOptions {
                stride: req.stride,
                average_overlap: req.average_overlap,
                workers: req.workers,
            };
            let result = patch_regression_explanation(&graph, &input, q, &opts)?;
            let png = encode_png(&render(
                &orient_regression_map(&result.map.values, result.mean_score(), q as f64),
                &base,
                &RenderSpec {
                    mode: RenderMode::Signed,
                    alpha: req.alpha,
                    boost: req.boost.unwrap_or(1.0),
                },
            )?)?;
            lines.push(format!(
                "P={:.6} Q={} J={:.6} patches={}",
                result.mean_score(),
                q,
                result.mean_loss(),
                result.positions.len()
            ));
            files.push((req.out.clone().expect("validated"), png));
        }
        Command::Gradcheck => {
            let input = match &req.image {
                Some(path) => load_and_preprocess(&read(path)?, graph.input_spec())?,
                None => {
                    let mut r = crate::toy::rng(req.seed);
                    crate::toy::uniform(&mut r, graph.input_shape().dims(), 1.0)
                }
            };
            let mut rng = crate::toy::rng(req.seed.wrapping_add(1));
            let report = gradcheck_model(&graph, &input, &mut rng, DEFAULT_EPS)?;
            for (kind, c) in &report.per_kind {
                lines.push(format!(
                    "{kind}: max_rel_error={:.3e} checked={} skipped={}",
                    c.max_rel_error, c.checked, c.skipped
                ));
            }
            if let Some(c) = report.target_layer {
                lines.push(format!(
                    "target_layer({}): max_rel_error={:.3e} checked={} skipped={}",
                    graph.target_layer(),
                    c.max_rel_error,
                    c.checked,
                    c.skipped
                ));
            }
            let ok = report.passes();
            lines.push(format!(
                "max_rel_error={:.3e} tolerance={:.0e} {}",
                report.max_rel_error(),
                GRADCHECK_TOLERANCE,
                if ok { "PASS" } else { "FAIL" }
            ));
            if !ok {
                exit_code = 3;
            }
        }
    }

    let written = write_all(&files)?;
    Ok(Outcome {
        lines,
        written,
        exit_code,
    })
}

/// Stacks the reference image's channels before the distorted image's when
/// a reference is given; otherwise the distorted image alone.
fn iqa_input(graph: &ModelGraph, reference: Option<&Path>, dist_bytes: &[u8]) -> Result<Tensor, Error> {
    let spec = graph.input_spec();
    let c = spec.channels();
    let Some(reference) = reference else {
        return image_tensor(dist_bytes, &spec.mean, &spec.std, None);
    };
    if !c.is_multiple_of(2) {
        return Err(Error::shape(format!(
            "a reference image needs an even channel count, model has {c}"
        )));
    }
    let half = c / 2;
    let r = image_tensor(&read(reference)?, &spec.mean[..half], &spec.std[..half], None)?;
    let d = image_tensor(dist_bytes, &spec.mean[half..], &spec.std[half..], None)?;
    if r.dims()[2..] != d.dims()[2..] {
        return Err(Error::shape(format!(
            "reference {} and distorted {} images differ in size",
            r.shape(),
            d.shape()
        )));
    }
    let (h, w) = (d.dims()[2], d.dims()[3]);
    let mut data = r.into_data();
    data.extend(d.into_data());
    Tensor::new([1, c, h, w], data)
}

fn inspect_lines(graph: &ModelGraph) -> Vec<String> {
    let spec = graph.input_spec();
    let mut lines = vec![
        format!("name: {}", graph.name()),
        format!("task: {:?}", graph.task()).to_lowercase(),
        format!(
            "input: {}×{}×{} mean={:?} std={:?}",
            spec.channels(),
            spec.height(),
            spec.width(),
            spec.mean,
            spec.std
        ),
    ];
    match graph.task() {
        Task::Classification => {
            let labels = graph.class_labels().unwrap_or(&[]);
            lines.push(format!("classes: {} [{}]", labels.len(), labels.join(", ")));
        }
        Task::Regression => {
            let (lo, hi) = graph.output_range().unwrap_or((0.0, 0.0));
            lines.push(format!("output_range: [{lo}, {hi}]"));
        }
    }
    lines.push(format!("nodes: {}", graph.nodes().len()));
    let shapes = infer_shapes(graph);
    for node in graph.nodes() {
        let mut line = String::new();
        let inputs: Vec<&str> = node.inputs.iter().map(|&s| graph.slot_name(s)).collect();
        let _ = write!(
            line,
            "  {:<12} {:<15} <- {:<16} -> {}",
            node.id,
            node.op.kind(),
            inputs.join(", "),
            shapes[node.id.as_str()]
        );
        lines.push(line);
    }
    lines.push(format!(
        "target_layer: {} ({})",
        graph.target_layer(),
        shapes[graph.target_layer()]
    ));
    lines
}

/// Parses, executes, and prints; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let result = parse_request(argv).and_then(|req| execute(&req));
    match result {
        Ok(outcome) => {
            for line in &outcome.lines {
                println!("{line}");
            }
            outcome.exit_code
        }
        Err(CliError::Info(text)) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
