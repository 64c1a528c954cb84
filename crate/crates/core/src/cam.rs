//! Gradient-weighted activation maps.
//!
//! A seed gradient is propagated to the target layer, averaged per channel
//! into importance weights, and used to weight that layer's activations.
//! The mean over channels is resized to the input resolution. Classification
//! maps are rectified and min-max normalized. Regression maps keep their
//! sign and scale.

use crate::contrast::{class_score_seed, contrast_seed, cross_entropy_seed, ContrastTarget, SeedAt};
use crate::engine::{backward_between, forward, predict, ForwardTrace};
use crate::error::{Error, Result};
use crate::model::{ModelGraph, Task};
use crate::parallel::map_ordered;
use crate::tensor::{bilinear_resize, minmax_normalize, spatial_mean, Tensor};

/// Per-channel weights: spatial means of the target-layer gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights {
    pub alpha: Vec<f32>,
}

/// What a map explains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MapTarget {
    /// "Why P?" for a class (plain Grad-CAM).
    Why(usize),
    /// "Why P, rather than Q?"
    Contrast(ContrastTarget),
    /// Summary over many contrast targets.
    Sweep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// `H × W` values at input resolution.
    pub values: Tensor,
    /// `false` guarantees every value is ≥ 0.
    pub signed: bool,
    /// `true` guarantees every value lies in `[0, 1]`.
    pub normalized: bool,
    pub target: MapTarget,
    pub layer: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CamOptions {
    /// Clamp negative combined values to zero (classification only).
    pub rectify: bool,
    pub workers: usize,
}

impl Default for CamOptions {
    fn default() -> Self {
        CamOptions {
            rectify: true,
            workers: 1,
        }
    }
}

/// Variance gain used for sweep rendering.
pub const DEFAULT_VARIANCE_BOOST: f32 = 5.0;

pub fn importance_weights(grad_maps: &Tensor) -> Result<ImportanceWeights> {
    let (n, _, _, _) = grad_maps.nchw().map_err(|_| {
        Error::shape(format!(
            "importance_weights: expected rank 4, got rank {} (shape {})",
            grad_maps.rank(),
            grad_maps.shape()
        ))
    })?;
    if n != 1 {
        return Err(Error::shape(format!("importance_weights: batch must be 1, got {n}")));
    }
    Ok(ImportanceWeights {
        alpha: spatial_mean(grad_maps)?.into_data(),
    })
}

/// `mean_k alpha[k] · A[k]`, optionally clamped at zero.
pub fn combine_maps(alpha: &ImportanceWeights, activations: &Tensor, rectify: bool) -> Result<Tensor> {
    let (n, k, h, w) = activations.nchw()?;
    if n != 1 || k != alpha.alpha.len() {
        return Err(Error::shape(format!(
            "combine_maps: {} weights for activations of shape {}",
            alpha.alpha.len(),
            activations.shape()
        )));
    }
    let plane = h * w;
    let mut acc = vec![0.0f64; plane];
    for (a, chan) in alpha.alpha.iter().zip(activations.data().chunks_exact(plane)) {
        let a = *a as f64;
        for (dst, &v) in acc.iter_mut().zip(chan) {
            *dst += a * v as f64;
        }
    }
    let out = acc
        .into_iter()
        .map(|s| {
            let m = s / k as f64;
            (if rectify { m.max(0.0) } else { m }) as f32
        })
        .collect();
    Tensor::new([h, w], out)
}

/// Seed → target-layer gradient → weights → combined map, resized to the
/// input resolution. No normalization.
pub fn raw_cam(trace: &ForwardTrace<'_>, seed_slot: usize, seed_grad: &Tensor, rectify: bool) -> Result<Tensor> {
    let graph = trace.graph();
    let layer = graph.target_slot();
    let grads = backward_between(trace, seed_slot, seed_grad, layer)?;
    let alpha = importance_weights(&grads)?;
    let combined = combine_maps(&alpha, trace.value(layer), rectify)?;
    let spec = graph.input_spec();
    bilinear_resize(&combined, spec.height(), spec.width())
}

/// Plain Grad-CAM for `class`: one-hot on the pre-softmax score, rectified
/// and normalized. For regression models `class` must be 0.
pub fn why_explanation(trace: &ForwardTrace<'_>, class: usize) -> Result<SaliencyMap> {
    let graph = trace.graph();
    let slot = graph.logits_slot();
    let seed = class_score_seed(trace.value(slot), class)?;
    let raw = raw_cam(trace, slot, &seed.output_grad, true)?;
    Ok(SaliencyMap {
        values: minmax_normalize(&raw),
        signed: false,
        normalized: true,
        target: MapTarget::Why(class),
        layer: graph.target_layer().to_string(),
    })
}

/// Map for an already-computed seed, post-processed per task.
pub fn explain_seed(trace: &ForwardTrace<'_>, seeded: &SeedAt, opts: &CamOptions) -> Result<SaliencyMap> {
    let graph = trace.graph();
    let layer = graph.target_layer().to_string();
    let target = MapTarget::Contrast(seeded.target);
    match graph.task() {
        Task::Classification => {
            let raw = raw_cam(trace, seeded.slot, &seeded.seed.output_grad, opts.rectify)?;
            Ok(SaliencyMap {
                values: minmax_normalize(&raw),
                signed: !opts.rectify,
                normalized: true,
                target,
                layer,
            })
        }
        Task::Regression => Ok(SaliencyMap {
            values: raw_cam(trace, seeded.slot, &seeded.seed.output_grad, false)?,
            signed: true,
            normalized: false,
            target,
            layer,
        }),
    }
}

/// "Why P, rather than Q?" map.
pub fn contrast_explanation(
    trace: &ForwardTrace<'_>,
    target: ContrastTarget,
    opts: &CamOptions,
) -> Result<SaliencyMap> {
    let seeded = contrast_seed(trace, target)?;
    explain_seed(trace, &seeded, opts)
}

/// Per-pixel mean and population variance over every contrast map Q ≠ P.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastStats {
    pub mean_map: SaliencyMap,
    pub variance_map: SaliencyMap,
    pub boost: f32,
    pub targets_covered: usize,
    /// Largest magnitude over all swept maps; the shared display scale.
    pub scale: f32,
}

impl ContrastStats {
    /// Mean map divided by the shared scale.
    pub fn display_mean(&self) -> Tensor {
        self.rescale(&self.mean_map.values, self.scale as f64)
    }

    /// Variance map divided by the squared shared scale, before boost.
    pub fn display_variance(&self) -> Tensor {
        self.rescale(&self.variance_map.values, (self.scale as f64).powi(2))
    }

    fn rescale(&self, t: &Tensor, by: f64) -> Tensor {
        if by == 0.0 {
            return t.with_data(vec![0.0; t.numel()]);
        }
        t.with_data(t.data().iter().map(|&v| (v as f64 / by) as f32).collect())
    }
}

/// Contrast maps for all Q ≠ P, summarized before any normalization.
pub fn contrast_sweep(trace: &ForwardTrace<'_>, opts: &CamOptions, boost: f32) -> Result<ContrastStats> {
    let graph = trace.graph();
    if graph.task() != Task::Classification {
        return Err(Error::Task("contrast sweep needs a classification model".into()));
    }
    let n = graph.num_outputs();
    if n < 2 {
        return Err(Error::Task(format!("contrast sweep needs at least 2 classes, got {n}")));
    }
    let p = predict(trace).class_index().expect("classification prediction");
    let slot = graph.logits_slot();
    let logits = trace.value(slot);
    let targets: Vec<usize> = (0..n).filter(|&q| q != p).collect();

    let maps = map_ordered(opts.workers, targets.len(), |i| -> Result<Tensor> {
        let seed = cross_entropy_seed(logits, targets[i])?;
        raw_cam(trace, slot, &seed.output_grad, opts.rectify)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let count = maps.len() as f64;
    let pixels = maps[0].numel();
    let mut mean = vec![0.0f64; pixels];
    for m in &maps {
        for (acc, &v) in mean.iter_mut().zip(m.data()) {
            *acc += v as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= count);
    let mut var = vec![0.0f64; pixels];
    for m in &maps {
        for ((acc, &v), mu) in var.iter_mut().zip(m.data()).zip(&mean) {
            let d = v as f64 - mu;
            *acc += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let scale = maps.iter().fold(0.0f32, |s, m| s.max(m.max_abs()));

    let template = &maps[0];
    let layer = graph.target_layer().to_string();
    let summary = |data: Vec<f64>, signed: bool| SaliencyMap {
        values: template.with_data(data.into_iter().map(|v| v as f32).collect()),
        signed,
        normalized: false,
        target: MapTarget::Sweep,
        layer: layer.clone(),
    };
    Ok(ContrastStats {
        mean_map: summary(mean, !opts.rectify),
        variance_map: summary(var, false),
        boost,
        targets_covered: targets.len(),
        scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchOptions {
    pub stride: usize,
    /// Divide each canvas pixel by the number of patches covering it.
    pub average_overlap: bool,
    pub workers: usize,
}

impl Default for PatchOptions {
    fn default() -> Self {
        PatchOptions {
            stride: 4,
            average_overlap: false,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchExplanation {
    /// Signed, unnormalized canvas at image resolution.
    pub map: SaliencyMap,
    /// Top-left corner of every patch, row-major.
    pub positions: Vec<(usize, usize)>,
    pub patch_scores: Vec<f32>,
    pub patch_losses: Vec<f64>,
}

impl PatchExplanation {
    pub fn mean_score(&self) -> f64 {
        self.patch_scores.iter().map(|&v| v as f64).sum::<f64>() / self.patch_scores.len() as f64
    }

    pub fn mean_loss(&self) -> f64 {
        self.patch_losses.iter().sum::<f64>() / self.patch_losses.len() as f64
    }
}

/// Row-major top-left corners of `ph × pw` patches stepped by `stride`.
pub fn patch_positions(h: usize, w: usize, ph: usize, pw: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if stride == 0 {
        return Err(Error::shape("patch stride must be at least 1"));
    }
    if h < ph || w < pw {
        return Err(Error::shape(format!("image {h}×{w} is smaller than patch {ph}×{pw}")));
    }
    Ok((0..=h - ph)
        .step_by(stride)
        .flat_map(|y| (0..=w - pw).step_by(stride).map(move |x| (y, x)))
        .collect())
}

/// Sums patch maps into an `h × w` canvas in position order.
pub fn accumulate_patches(
    h: usize,
    w: usize,
    positions: &[(usize, usize)],
    maps: &[Tensor],
    average: bool,
) -> Result<Tensor> {
    let mut canvas = vec![0.0f64; h * w];
    let mut coverage = vec![0u32; h * w];
    for (&(y0, x0), m) in positions.iter().zip(maps) {
        let (ph, pw) = m.hw()?;
        if y0 + ph > h || x0 + pw > w {
            return Err(Error::shape(format!(
                "patch at ({y0}, {x0}) of size {ph}×{pw} leaves the {h}×{w} canvas"
            )));
        }
        for dy in 0..ph {
            for dx in 0..pw {
                let i = (y0 + dy) * w + x0 + dx;
                canvas[i] += m.data()[dy * pw + dx] as f64;
                coverage[i] += 1;
            }
        }
    }
    if average {
        for (v, &c) in canvas.iter_mut().zip(&coverage) {
            if c > 0 {
                *v /= c as f64;
            }
        }
    }
    Tensor::new([h, w], canvas.into_iter().map(|v| v as f32).collect())
}

fn crop(image: &Tensor, y0: usize, x0: usize, ph: usize, pw: usize) -> Result<Tensor> {
    let (_, c, h, w) = image.nchw()?;
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..][..h * w];
        for y in y0..y0 + ph {
            out.extend_from_slice(&plane[y * w + x0..][..pw]);
        }
    }
    Tensor::new([1, c, ph, pw], out)
}

/// Slides the regression network over `image` and sums each patch's signed
/// contrast map for target `q` into a full-size canvas.
pub fn patch_regression_explanation(
    graph: &ModelGraph,
    image: &Tensor,
    q: f32,
    opts: &PatchOptions,
) -> Result<PatchExplanation> {
    if graph.task() != Task::Regression {
        return Err(Error::Task("patch explanations need a regression model".into()));
    }
    let spec = graph.input_spec();
    let (ph, pw) = (spec.height(), spec.width());
    let (n, c, h, w) = image.nchw()?;
    if n != 1 || c != spec.channels() {
        return Err(Error::shape(format!(
            "image shape {} does not match {} model channels",
            image.shape(),
            spec.channels()
        )));
    }
    let positions = patch_positions(h, w, ph, pw, opts.stride)?;
    let cam = CamOptions {
        rectify: false,
        workers: 1,
    };
    let results = map_ordered(opts.workers, positions.len(), |i| -> Result<(Tensor, f32, f64)> {
        let (y0, x0) = positions[i];
        let patch = crop(image, y0, x0, ph, pw)?;
        let trace = forward(graph, &patch)?;
        let seeded = contrast_seed(&trace, ContrastTarget::Scalar(q))?;
        let map = explain_seed(&trace, &seeded, &cam)?;
        Ok((map.values, predict(&trace).score(), seeded.seed.loss))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut maps = Vec::with_capacity(results.len());
    let mut patch_scores = Vec::with_capacity(results.len());
    let mut patch_losses = Vec::with_capacity(results.len());
    for (m, s, l) in results {
        maps.push(m);
        patch_scores.push(s);
        patch_losses.push(l);
    }
    let canvas = accumulate_patches(h, w, &positions, &maps, opts.average_overlap)?;
    Ok(PatchExplanation {
        map: SaliencyMap {
            values: canvas,
            signed: true,
            normalized: false,
            target: MapTarget::Contrast(ContrastTarget::Scalar(q)),
            layer: graph.target_layer().to_string(),
        },
        positions,
        patch_scores,
        patch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(k: usize, h: usize, w: usize, data: &[f32]) -> Tensor {
        Tensor::new([1, k, h, w], data.to_vec()).unwrap()
    }

    #[test]
    fn weights_are_channel_means() {
        let a = importance_weights(&t4(1, 2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(a.alpha, vec![2.5]);
        let z = importance_weights(&Tensor::zeros([1, 3, 2, 2]).unwrap()).unwrap();
        assert_eq!(z.alpha, vec![0.0; 3]);
        assert!(importance_weights(&Tensor::zeros([3, 2]).unwrap()).is_err());
        assert!(importance_weights(&Tensor::zeros([2, 1, 2, 2]).unwrap()).is_err());
    }

    #[test]
    fn combine_examples() {
        let alpha = ImportanceWeights { alpha: vec![1.0, -1.0] };
        let acts = t4(2, 2, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 0.0]);
        let r = combine_maps(&alpha, &acts, true).unwrap();
        assert_eq!(r.data(), &[0.5, 0.0, 0.0, 0.5]);
        let u = combine_maps(&alpha, &acts, false).unwrap();
        assert_eq!(u.data(), &[0.5, -1.0, 0.0, 0.5]);
        let zero = ImportanceWeights { alpha: vec![0.0, 0.0] };
        assert!(combine_maps(&zero, &acts, false)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let bad = ImportanceWeights { alpha: vec![1.0] };
        assert!(matches!(combine_maps(&bad, &acts, true), Err(Error::Shape(_))));
    }

    #[test]
    fn one_dimensional_coverage() {
        let pos = patch_positions(1, 6, 1, 4, 2).unwrap();
        assert_eq!(pos, vec![(0, 0), (0, 2)]);
        let ones = vec![Tensor::filled([1, 4], 1.0).unwrap(); 2];
        let canvas = accumulate_patches(1, 6, &pos, &ones, false).unwrap();
        assert_eq!(canvas.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0]);
        let avg = accumulate_patches(1, 6, &pos, &ones, true).unwrap();
        assert_eq!(avg.data(), &[1.0; 6]);
    }

    #[test]
    fn patch_positions_errors() {
        assert!(patch_positions(3, 3, 4, 4, 1).is_err());
        assert!(patch_positions(8, 8, 4, 4, 0).is_err());
        assert_eq!(patch_positions(8, 8, 4, 4, 4).unwrap().len(), 4);
    }
}
