//! Coarse-to-fine orchestration: painting, coarse segmentation, offset
//! learning, mid fusion and refinement, plus the training and evaluation
//! loops used by the CLI and the ablation runs.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseArray, Tape, Var};
use crate::context::{owner_cameras, paint_projected, project_cameras, CameraProjection, PaintedCloud, DEFAULT_WINDOW};
use crate::data_model::FrameBundle;
use crate::dataio::Checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{ConfusionMatrix, MeanMode};
use crate::losses::{semantic_loss, total_loss, LossWeights, DEFAULT_ALPHA};
use crate::networks::{
    stack_images, Bound, CoarseSegmenter, GridPoolSegmenter, GridShape, ImageSegmenter, OffsetHead, PixelConvSegmenter,
};
use crate::offset::{compute_targets, fuse, plain_gather, rectified_gather, scatter_coarse, OffsetTargets, TargetOptions};
use crate::scalar::Real;

/// Ablation variants, from no fusion at all to the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Raw points only.
    Baseline,
    /// Painted with a 1x1 window.
    C1x1,
    /// Painted with a 3x3 window.
    C3x3,
    /// Painted with a 5x5 window.
    C5x5,
    /// 3x3 painting plus unrectified image features.
    Mid,
    /// 3x3 painting plus rectified image features.
    Full,
}

/// Which stages a variant runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub painting: bool,
    pub mid_fusion: bool,
    pub offset_stage: bool,
    pub window: usize,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::C1x1,
        Variant::C3x3,
        Variant::C5x5,
        Variant::Mid,
        Variant::Full,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::C1x1 => "c1x1",
            Variant::C3x3 => "c3x3",
            Variant::C5x5 => "c5x5",
            Variant::Mid => "mid",
            Variant::Full => "full",
        }
    }

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::C1x1 => "C+1x1",
            Variant::C3x3 => "C+3x3",
            Variant::C5x5 => "C+5x5",
            Variant::Mid => "C+3x3+Mid",
            Variant::Full => "C+3x3+Mid+Ref",
        }
    }

    pub fn toggles(self) -> Toggles {
        let t = |painting, mid_fusion, offset_stage, window| Toggles {
            painting,
            mid_fusion,
            offset_stage,
            window,
        };
        match self {
            Variant::Baseline => t(false, false, false, DEFAULT_WINDOW),
            Variant::C1x1 => t(true, false, false, 1),
            Variant::C3x3 => t(true, false, false, 3),
            Variant::C5x5 => t(true, false, false, 5),
            Variant::Mid => t(true, true, false, 3),
            Variant::Full => t(true, true, true, 3),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts the short tags and the long labels from `label()`,
    /// case-insensitively, with `x` or `×` and an optional trailing `.` on
    /// each part.
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .trim()
            .to_lowercase()
            .replace('×', "x")
            .chars()
            .filter(|c| !matches!(c, '.' | ' ' | '-' | '_'))
            .collect();
        Ok(match norm.as_str() {
            "baseline" => Variant::Baseline,
            "c1x1" | "c+1x1" => Variant::C1x1,
            "c3x3" | "c+3x3" => Variant::C3x3,
            "c5x5" | "c+5x5" => Variant::C5x5,
            "mid" | "c+3x3+mid" => Variant::Mid,
            "full" | "c+3x3+mid+ref" | "lifseg" => Variant::Full,
            _ => return Err(Error::InvalidConfig(format!("unknown variant {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub painting: bool,
    pub mid_fusion: bool,
    pub offset_stage: bool,
    /// Context window `w`.
    pub window: usize,
    /// Number of classes `C`.
    pub classes: usize,
    /// `C0`; must equal `classes`.
    pub coarse_channels: usize,
    /// `C1`.
    pub image_channels: usize,
    pub coarse_hidden: usize,
    pub image_hidden: usize,
    pub offset_hidden: usize,
    pub refine_hidden: usize,
    pub grid: GridShape,
    pub alpha: f64,
    pub lr: f64,
    /// Step size for the offset head.
    pub offset_lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Factor applied to x, y, z before they enter the point network.
    pub xyz_scale: f64,
    pub targets: TargetOptions,
    pub mean_mode: MeanMode,
    /// Add `L_sem` on the coarse logits to the objective.
    pub supervise_coarse: bool,
    /// Replace the predicted offset field with zeros.
    pub force_zero_offset: bool,
}

impl PipelineConfig {
    pub fn for_variant(variant: Variant, classes: usize) -> Self {
        let t = variant.toggles();
        Self {
            variant,
            painting: t.painting,
            mid_fusion: t.mid_fusion,
            offset_stage: t.offset_stage,
            window: t.window,
            classes,
            coarse_channels: classes,
            image_channels: 16,
            coarse_hidden: 32,
            image_hidden: 16,
            offset_hidden: 32,
            refine_hidden: 32,
            grid: GridShape::default(),
            alpha: DEFAULT_ALPHA,
            lr: 0.05,
            offset_lr: 5.0,
            epochs: 10,
            seed: 0,
            xyz_scale: 0.1,
            targets: TargetOptions::default(),
            mean_mode: MeanMode::PresentClasses,
            supervise_coarse: true,
            force_zero_offset: false,
        }
    }

    /// The same config with another variant's stage toggles.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let t = variant.toggles();
        Self {
            variant,
            painting: t.painting,
            mid_fusion: t.mid_fusion,
            offset_stage: t.offset_stage,
            window: t.window,
            ..self.clone()
        }
    }

    pub fn toggles(&self) -> Toggles {
        Toggles {
            painting: self.painting,
            mid_fusion: self.mid_fusion,
            offset_stage: self.offset_stage,
            window: self.window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let expected = self.variant.toggles();
        let got = self.toggles();
        let window_matters = expected.painting;
        if got.painting != expected.painting
            || got.mid_fusion != expected.mid_fusion
            || got.offset_stage != expected.offset_stage
            || (window_matters && got.window != expected.window)
        {
            return bad(format!("stage toggles {got:?} do not match variant {}", self.variant));
        }
        if self.coarse_channels != self.classes {
            return bad(format!("C0 = {} must equal C = {}", self.coarse_channels, self.classes));
        }
        if self.classes < 2 {
            return bad("C ≥ 2".into());
        }
        let sizes = [
            self.image_channels,
            self.coarse_hidden,
            self.image_hidden,
            self.offset_hidden,
            self.refine_hidden,
            self.grid.x,
            self.grid.y,
            self.grid.z,
        ];
        if sizes.contains(&0) {
            return bad("layer widths and grid dimensions must be ≥ 1".into());
        }
        for (name, v) in [("alpha", self.alpha), ("lr", self.lr), ("offset_lr", self.offset_lr)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and ≥ 0"));
            }
        }
        if !(self.xyz_scale.is_finite() && self.xyz_scale > 0.0) {
            return bad("xyz_scale must be finite and > 0".into());
        }
        Ok(())
    }

    /// Width of the rows fed to the coarse segmenter.
    pub fn input_dims(&self, source_dims: usize) -> usize {
        if self.painting {
            source_dims + 3 * self.window * self.window
        } else {
            source_dims
        }
    }

    fn weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha }
    }
}

/// The four trainable parts. All four exist for every variant so that
/// variants sharing a seed also share initial weights; stages a variant
/// does not run are left untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct Models<T: Real> {
    pub coarse: GridPoolSegmenter<T>,
    pub image: PixelConvSegmenter<T>,
    pub offset: OffsetHead<T>,
    pub refine: GridPoolSegmenter<T>,
}

impl<T: Real> Models<T> {
    /// Fresh weights drawn from `config.seed`.
    pub fn new(config: &PipelineConfig, source_dims: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (c0, c1) = (config.coarse_channels, config.image_channels);
        let coarse = GridPoolSegmenter::new(
            "coarse",
            config.input_dims(source_dims),
            config.coarse_hidden,
            c0,
            config.grid,
            &mut rng,
        );
        let image = PixelConvSegmenter::new(config.image_hidden, c1, &mut rng);
        let offset = OffsetHead::new(c1 + c0, config.offset_hidden, &mut rng);
        let refine = GridPoolSegmenter::new("refine", c0 + c1, config.refine_hidden, config.classes, config.grid, &mut rng);
        Ok(Self {
            coarse,
            image,
            offset,
            refine,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.coarse.parameters().size()
            + self.image.parameters().size()
            + self.offset.parameters().size()
            + self.refine.parameters().size()
    }
}

impl Models<f64> {
    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        let sets = [
            self.coarse.parameters(),
            self.image.parameters(),
            self.offset.parameters(),
            self.refine.parameters(),
        ];
        let tensors = sets
            .iter()
            .flat_map(|p| p.iter().map(|(n, a)| (n.to_string(), a.clone())))
            .collect();
        Checkpoint { metadata, tensors }
    }

    /// Builds models for `config` and loads every tensor from `ckpt`.
    pub fn from_checkpoint(config: &PipelineConfig, source_dims: usize, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(config, source_dims)?;
        let mut parts: [Vec<(String, DenseArray<f64>)>; 4] = Default::default();
        for (name, t) in &ckpt.tensors {
            let slot = match name.split('.').next() {
                Some("coarse") => 0,
                Some("image") => 1,
                Some("offset") => 2,
                Some("refine") => 3,
                _ => return Err(Error::InvalidConfig(format!("unknown tensor {name}"))),
            };
            parts[slot].push((name.clone(), t.clone()));
        }
        let [c, i, o, r] = parts;
        m.coarse.parameters_mut().load(c)?;
        m.image.parameters_mut().load(i)?;
        m.offset.parameters_mut().load(o)?;
        m.refine.parameters_mut().load(r)?;
        Ok(m)
    }
}

/// Per-frame inputs that do not depend on the weights.
#[derive(Debug, Clone)]
pub struct Prepared<T: Real> {
    pub features: DenseArray<T>,
    pub xyz: Vec<[T; 3]>,
    pub projections: Vec<CameraProjection<T>>,
    pub owners: Vec<Option<usize>>,
    /// `[n, H, W, 3]`, present when mid fusion is on.
    pub images: Option<DenseArray<T>>,
    pub targets: OffsetTargets<T>,
    pub labels: Option<Vec<usize>>,
    pub gt_offsets: Option<Vec<[T; 2]>>,
    pub height: usize,
    pub width: usize,
}

/// Projects, paints and scales one frame for `config`.
pub fn prepare<T: Real>(config: &PipelineConfig, bundle: &FrameBundle<T>) -> Result<Prepared<T>> {
    crate::data_model::validate(bundle)?;
    if bundle.class_count != config.classes {
        return Err(Error::InvalidConfig(format!(
            "frame has {} classes, config expects {}",
            bundle.class_count, config.classes
        )));
    }
    let cloud = &bundle.cloud;
    let projections = project_cameras(cloud, bundle)?;
    let owners = owner_cameras(&projections);
    let painted = if config.painting {
        paint_projected(cloud, bundle, &projections, config.window)?
    } else {
        PaintedCloud::passthrough(cloud)
    };
    let width = painted.width();
    let scale = T::lit(config.xyz_scale);
    let mut rows = painted.into_rows();
    for row in rows.chunks_mut(width) {
        row[..3].iter_mut().for_each(|v| *v = *v * scale);
    }
    let features = DenseArray::new(vec![cloud.len(), width], rows)?;
    let xyz = (0..cloud.len()).map(|i| cloud.xyz(i)).collect();
    let images = if config.mid_fusion {
        Some(stack_images(&bundle.cameras.iter().map(|c| &c.image).collect::<Vec<_>>())?)
    } else {
        None
    };
    let targets = compute_targets(bundle, &projections, &owners, config.targets)?;
    let (height, width) = bundle.image_size();
    Ok(Prepared {
        features,
        xyz,
        projections,
        owners,
        images,
        targets,
        labels: cloud.labels().map(<[usize]>::to_vec),
        gt_offsets: bundle.gt_offsets.clone(),
        height,
        width,
    })
}

struct Bindings {
    coarse: Bound,
    image: Option<Bound>,
    offset: Option<Bound>,
    refine: Bound,
}

/// Tape handles of one forward pass.
pub struct ForwardVars {
    /// `S`, `[N, C]` refined logits.
    pub logits: Var,
    /// `F_coarse`, `[N, C0]`.
    pub coarse: Var,
    /// `F'_image`, `[N, C1]`.
    pub image_points: Var,
    /// `O`, `[N, 2]`, when the offset stage runs.
    pub offsets: Option<Var>,
    /// Cell each point's image features were read from.
    pub cells: Vec<Option<usize>>,
    bindings: Bindings,
}

/// Records the forward pass of [`prepare`]d inputs on `tape`.
pub fn forward_on_tape<T: Real>(
    config: &PipelineConfig,
    prep: &Prepared<T>,
    models: &Models<T>,
    tape: &mut Tape<T>,
) -> Result<ForwardVars> {
    let n_points = prep.xyz.len();
    if prep.features.shape()[1] != models.coarse.input_dims() {
        return Err(Error::shape("pipeline input", prep.features.shape(), &[n_points, models.coarse.input_dims()]));
    }
    let coarse_b = models.coarse.parameters().bind(tape);
    let refine_b = models.refine.parameters().bind(tape);
    let x = tape.constant(prep.features.clone());
    let coarse = models.coarse.forward(tape, &coarse_b, x, &prep.xyz)?;
    let c1 = models.image.output_dims();
    let mut image_b = None;
    let mut offset_b = None;
    let mut offsets = None;
    let mut cells = vec![None; n_points];
    let image_points = if config.mid_fusion {
        let images = prep
            .images
            .clone()
            .ok_or_else(|| Error::InvalidConfig("prepared frame lacks images for mid fusion".into()))?;
        let ib = models.image.parameters().bind(tape);
        let img = tape.constant(images);
        let f_image = models.image.forward(tape, &ib, img)?;
        image_b = Some(ib);
        if config.offset_stage {
            let ob = models.offset.parameters().bind(tape);
            let f_points = scatter_coarse(tape, coarse, &prep.projections, prep.height, prep.width)?;
            let f_offset = tape.concat_lastdim(f_image, f_points)?;
            let mut field = models.offset.forward(tape, &ob, f_offset)?;
            if config.force_zero_offset {
                field = tape.constant(DenseArray::zeros(tape.shape(field).to_vec()));
            }
            offset_b = Some(ob);
            let r = rectified_gather(tape, f_image, field, &prep.projections, &prep.owners)?;
            offsets = Some(r.offsets);
            cells = r.cells;
            r.features
        } else {
            cells = crate::offset::point_cells(&prep.projections, &prep.owners, prep.height, prep.width);
            plain_gather(tape, f_image, &prep.projections, &prep.owners)?
        }
    } else {
        tape.constant(DenseArray::zeros(vec![n_points, c1]))
    };
    let fused = fuse(tape, coarse, image_points)?;
    let logits = models.refine.forward(tape, &refine_b, fused, &prep.xyz)?;
    Ok(ForwardVars {
        logits,
        coarse,
        image_points,
        offsets,
        cells,
        bindings: Bindings {
            coarse: coarse_b,
            image: image_b,
            offset: offset_b,
            refine: refine_b,
        },
    })
}

/// Values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T: Real> {
    /// `S`, `[N, C]`.
    pub scores: DenseArray<T>,
    /// `O`, `[N, 2]`; zero when the offset stage is off.
    pub offsets: DenseArray<T>,
    pub coarse: DenseArray<T>,
    pub image_points: DenseArray<T>,
    pub cells: Vec<Option<usize>>,
}

impl<T: Real> ForwardOutput<T> {
    /// Arg-max class of every point; ties go to the lower class.
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.scores)
    }
}

fn argmax_rows<T: Real>(scores: &DenseArray<T>) -> Vec<usize> {
    let c = scores.last_dim();
    scores
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn run_forward<T: Real>(config: &PipelineConfig, bundle: &FrameBundle<T>, models: &Models<T>) -> Result<ForwardOutput<T>> {
    let prep = prepare(config, bundle)?;
    forward_prepared(config, &prep, models)
}

pub fn forward_prepared<T: Real>(config: &PipelineConfig, prep: &Prepared<T>, models: &Models<T>) -> Result<ForwardOutput<T>> {
    let mut tape = Tape::new();
    let v = forward_on_tape(config, prep, models, &mut tape)?;
    let offsets = match v.offsets {
        Some(o) => tape.value(o).clone(),
        None => DenseArray::zeros(vec![prep.xyz.len(), 2]),
    };
    Ok(ForwardOutput {
        scores: tape.value(v.logits).clone(),
        offsets,
        coarse: tape.value(v.coarse).clone(),
        image_points: tape.value(v.image_points).clone(),
        cells: v.cells,
    })
}

/// Loss values of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    /// Everything that was differentiated.
    pub objective: f64,
    /// `L_sem` on the refined logits.
    pub semantic: f64,
    /// `L_sem` on the coarse logits.
    pub coarse: f64,
    /// `L_reg + L_dir`, when the offset stage runs.
    pub auxiliary: Option<f64>,
}

/// One SGD step on one frame. The refined logits are supervised with
/// `L_sem`, the coarse logits too unless `supervise_coarse` is off; the
/// auxiliary term enters with weight `alpha`.
pub fn train_step<T: Real>(config: &PipelineConfig, prep: &Prepared<T>, models: &mut Models<T>) -> Result<StepLosses> {
    let labels = prep
        .labels
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("training frames need labels".into()))?;
    let mut tape = Tape::new();
    let v = forward_on_tape(config, prep, models, &mut tape)?;
    let total = total_loss(&mut tape, v.logits, labels, v.offsets.map(|o| (o, &prep.targets)), config.weights())?;
    let coarse = semantic_loss(&mut tape, v.coarse, labels)?;
    let objective = if config.supervise_coarse {
        tape.add(total.total, coarse)?
    } else {
        total.total
    };
    let grads = tape.backward(objective)?;
    let lr = T::lit(config.lr);
    let b = &v.bindings;
    models.coarse.parameters_mut().sgd(&tape, &grads, &b.coarse, lr)?;
    models.refine.parameters_mut().sgd(&tape, &grads, &b.refine, lr)?;
    if let Some(ib) = &b.image {
        models.image.parameters_mut().sgd(&tape, &grads, ib, lr)?;
    }
    if let Some(ob) = &b.offset {
        models.offset.parameters_mut().sgd(&tape, &grads, ob, T::lit(config.offset_lr))?;
    }
    let item = |v: Var| tape.value(v).item().map(T::as_f64).unwrap_or(f64::NAN);
    let losses = StepLosses {
        objective: item(objective),
        semantic: item(total.semantic),
        coarse: item(coarse),
        auxiliary: total.auxiliary.map(item),
    };
    if !losses.objective.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "loss diverged to {} (lower the learning rate)",
            losses.objective
        )));
    }
    Ok(losses)
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub objective: f64,
    pub semantic: f64,
    pub coarse: f64,
    pub auxiliary: Option<f64>,
}

/// Held-out metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frames: usize,
    pub points: usize,
    pub confusion: ConfusionMatrix,
    /// Per-class IoU, `None` for classes that never occur.
    pub class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    /// Points with an offset target and a ground-truth offset.
    pub masked_points: usize,
    /// Mean `‖O − gt‖` over masked points.
    pub offset_error: Option<f64>,
    /// Mean `‖gt‖` over the same points, the error of predicting zero.
    pub zero_offset_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub seed: u64,
    pub parameters: usize,
    pub epochs: Vec<EpochLosses>,
    pub metrics: Option<Metrics>,
    /// The only field that differs between identical runs.
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn miou(&self) -> Option<f64> {
        self.metrics.as_ref().and_then(|m| m.miou)
    }
}

/// SGD over `frames` for `config.epochs` epochs, one step per frame in a
/// seeded order.
pub fn train<T: Real>(config: &PipelineConfig, frames: &[FrameBundle<T>]) -> Result<(Models<T>, RunReport)> {
    let start = Instant::now();
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidConfig("training needs at least one frame".into()))?;
    let mut models = Models::new(config, first.cloud.dims())?;
    let prepared = frames.iter().map(|f| prepare(config, f)).collect::<Result<Vec<_>>>()?;
    let epochs = train_prepared(config, &prepared, &mut models)?;
    let report = RunReport {
        variant: config.variant,
        seed: config.seed,
        parameters: models.parameter_count(),
        epochs,
        metrics: None,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((models, report))
}

/// Training loop over already prepared frames.
pub fn train_prepared<T: Real>(
    config: &PipelineConfig,
    prepared: &[Prepared<T>],
    models: &mut Models<T>,
) -> Result<Vec<EpochLosses>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = [0.0; 4];
        let mut aux_seen = false;
        for &k in &order {
            let s = train_step(config, &prepared[k], models)?;
            sum[0] += s.objective;
            sum[1] += s.semantic;
            sum[2] += s.coarse;
            if let Some(a) = s.auxiliary {
                sum[3] += a;
                aux_seen = true;
            }
        }
        let n = prepared.len().max(1) as f64;
        epochs.push(EpochLosses {
            epoch,
            objective: sum[0] / n,
            semantic: sum[1] / n,
            coarse: sum[2] / n,
            auxiliary: aux_seen.then_some(sum[3] / n),
        });
    }
    Ok(epochs)
}

/// Accumulates the confusion matrix and offset errors over `frames`.
pub fn evaluate<T: Real>(models: &Models<T>, frames: &[FrameBundle<T>], config: &PipelineConfig) -> Result<RunReport> {
    let start = Instant::now();
    let prepared = frames.iter().map(|f| prepare(config, f)).collect::<Result<Vec<_>>>()?;
    let metrics = evaluate_prepared(models, &prepared, config)?;
    Ok(RunReport {
        variant: config.variant,
        seed: config.seed,
        parameters: models.parameter_count(),
        epochs: Vec::new(),
        metrics: Some(metrics),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn evaluate_prepared<T: Real>(models: &Models<T>, prepared: &[Prepared<T>], config: &PipelineConfig) -> Result<Metrics> {
    let mut confusion = ConfusionMatrix::new(config.classes);
    let (mut err, mut zero, mut masked) = (0.0f64, 0.0f64, 0usize);
    let mut points = 0;
    for prep in prepared {
        let out = forward_prepared(config, prep, models)?;
        points += prep.xyz.len();
        if let Some(labels) = &prep.labels {
            confusion.accumulate(labels, &out.predictions())?;
        }
        if let Some(gt) = &prep.gt_offsets {
            let o = out.offsets.data();
            for (i, g) in gt.iter().enumerate() {
                if !prep.targets.mask[i] {
                    continue;
                }
                let (g0, g1) = (g[0].as_f64(), g[1].as_f64());
                let (d0, d1) = (o[2 * i].as_f64() - g0, o[2 * i + 1].as_f64() - g1);
                err += (d0 * d0 + d1 * d1).sqrt();
                zero += (g0 * g0 + g1 * g1).sqrt();
                masked += 1;
            }
        }
    }
    let (offset_error, zero_offset_error) = if masked > 0 {
        (Some(err / masked as f64), Some(zero / masked as f64))
    } else {
        (None, None)
    };
    let miou = if confusion.total() > 0 {
        Some(confusion.miou(config.mean_mode)?)
    } else {
        None
    };
    Ok(Metrics {
        frames: prepared.len(),
        points,
        class_iou: confusion.iou(),
        miou,
        confusion,
        masked_points: masked,
        offset_error,
        zero_offset_error,
    })
}

/// Trains on `train_frames`, then evaluates on `held_out`.
pub fn run_variant<T: Real>(
    config: &PipelineConfig,
    train_frames: &[FrameBundle<T>],
    held_out: &[FrameBundle<T>],
) -> Result<(Models<T>, RunReport)> {
    let start = Instant::now();
    let (models, mut report) = train(config, train_frames)?;
    let eval = evaluate(&models, held_out, config)?;
    report.metrics = eval.metrics;
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok((models, report))
}

/// Comparison table, one row per run: `variant,label,seed,miou,offset_error,zero_offset_error`.
pub fn comparison_csv(reports: &[RunReport]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| v.to_string());
    let mut out = String::from("variant,label,seed,miou,offset_error,zero_offset_error\n");
    for r in reports {
        let m = r.metrics.as_ref();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.variant.tag(),
            r.variant.label(),
            r.seed,
            opt(r.miou()),
            opt(m.and_then(|m| m.offset_error)),
            opt(m.and_then(|m| m.zero_offset_error)),
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SceneSpec, CLASS_NAMES};

    fn small_spec(frame: u64) -> SceneSpec {
        let mut spec = SceneSpec {
            frame,
            seed: 3,
            height: 24,
            width: 24,
            ..SceneSpec::default()
        };
        for c in &mut spec.cameras {
            c.focal = 27.0;
        }
        spec.lidar.azimuth_steps = 30;
        spec.lidar.elevation_steps = 8;
        spec
    }

    fn frame(k: u64) -> FrameBundle<f64> {
        generate(&small_spec(k)).unwrap().bundle
    }

    fn config(v: Variant) -> PipelineConfig {
        let mut c = PipelineConfig::for_variant(v, CLASS_NAMES.len());
        c.grid = GridShape { x: 8, y: 8, z: 4 };
        c.epochs = 1;
        c
    }

    #[test]
    fn variant_tags_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("C+3×3+Mid.+Ref.".parse::<Variant>().unwrap(), Variant::Full);
        assert!("c7x7".parse::<Variant>().is_err());
    }

    #[test]
    fn config_checks() {
        let mut c = config(Variant::Full);
        c.validate().unwrap();
        c.coarse_channels = 5;
        assert!(c.validate().is_err());
        let mut c = config(Variant::C3x3);
        c.offset_stage = true;
        assert!(c.validate().is_err());
        let mut c = config(Variant::C1x1);
        c.window = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn painted_widths() {
        let f = frame(0);
        let d = f.cloud.dims();
        for (v, extra) in [(Variant::Baseline, 0), (Variant::C1x1, 3), (Variant::C3x3, 27), (Variant::C5x5, 75)] {
            let p = prepare(&config(v), &f).unwrap();
            assert_eq!(p.features.shape(), &[f.cloud.len(), d + extra]);
        }
    }

    #[test]
    fn shapes_do_not_depend_on_toggles() {
        let f = frame(1);
        for v in Variant::ALL {
            let c = config(v);
            let m = Models::new(&c, f.cloud.dims()).unwrap();
            let out = run_forward(&c, &f, &m).unwrap();
            assert_eq!(out.scores.shape(), &[f.cloud.len(), 4], "{v}");
            assert_eq!(out.offsets.shape(), &[f.cloud.len(), 2]);
            assert_eq!(out.image_points.shape(), &[f.cloud.len(), 16]);
            assert!(out.scores.is_finite());
        }
    }

    #[test]
    fn baseline_ignores_images() {
        let mut f = frame(2);
        let c = config(Variant::Baseline);
        let m = Models::new(&c, f.cloud.dims()).unwrap();
        let a = run_forward(&c, &f, &m).unwrap();
        for cam in &mut f.cameras {
            let (h, w) = (cam.image.height(), cam.image.width());
            cam.image = crate::data_model::CameraImage::filled(h, w, [0.0, 1.0, 0.0], cam.image.timestamp);
        }
        assert_eq!(run_forward(&c, &f, &m).unwrap().scores, a.scores);
    }

    #[test]
    fn untrained_full_matches_mid() {
        let f = frame(3);
        let full = config(Variant::Full);
        let m = Models::new(&full, f.cloud.dims()).unwrap();
        let a = run_forward(&full, &f, &m).unwrap();
        let b = run_forward(&full.with_variant(Variant::Mid), &f, &m).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn zero_offset_full_matches_mid_after_training() {
        let frames: Vec<_> = (0..2).map(frame).collect();
        let full = config(Variant::Full);
        let (m, _) = train(&full, &frames).unwrap();
        let moved = run_forward(&full, &frames[0], &m).unwrap();
        assert!(moved.offsets.data().iter().any(|v| *v != 0.0));
        let zeroed = PipelineConfig {
            force_zero_offset: true,
            ..full.clone()
        };
        for f in &frames {
            let a = run_forward(&zeroed, f, &m).unwrap();
            let b = run_forward(&full.with_variant(Variant::Mid), f, &m).unwrap();
            assert_eq!(a.scores, b.scores);
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let frames: Vec<_> = (0..2).map(frame).collect();
        let c = config(Variant::Full);
        let (m1, r1) = train(&c, &frames).unwrap();
        let (m2, r2) = train(&c, &frames).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1.epochs, r2.epochs);
        assert_eq!(run_forward(&c, &frames[0], &m1).unwrap(), run_forward(&c, &frames[0], &m2).unwrap());
    }

    #[test]
    fn alpha_zero_leaves_offset_head_unchanged() {
        let frames: Vec<_> = (0..2).map(frame).collect();
        let mut c = config(Variant::Full);
        c.alpha = 0.0;
        c.epochs = 2;
        let init = Models::<f64>::new(&c, frames[0].cloud.dims()).unwrap();
        let (m, _) = train(&c, &frames).unwrap();
        assert_eq!(m.offset, init.offset);
        assert_ne!(m.coarse, init.coarse);
        assert_ne!(m.image, init.image);
    }

    #[test]
    fn coarse_supervision_is_optional() {
        let f = frame(1);
        let mut c = config(Variant::C3x3);
        let prep = prepare::<f64>(&c, &f).unwrap();
        let mut m = Models::<f64>::new(&c, f.cloud.dims()).unwrap();
        let both = train_step(&c, &prep, &mut m.clone()).unwrap();
        assert_eq!(both.objective, both.semantic + both.coarse);
        c.supervise_coarse = false;
        let refined = train_step(&c, &prep, &mut m).unwrap();
        assert_eq!(refined.objective, refined.semantic);
    }

    #[test]
    fn overfits_one_frame() {
        let f = frame(4);
        let mut c = config(Variant::Full);
        c.epochs = 200;
        // the default step is sized for many frames per epoch
        c.lr = 0.2;
        let (_, r) = train(&c, std::slice::from_ref(&f)).unwrap();
        let (first, last) = (r.epochs[0].objective, r.epochs.last().unwrap().objective);
        assert!(last <= 0.5 * first, "loss {first} -> {last}");
    }

    #[test]
    fn untrained_miou_is_low() {
        let frames: Vec<_> = (0..2).map(frame).collect();
        let c = config(Variant::C3x3);
        let m = Models::new(&c, frames[0].cloud.dims()).unwrap();
        let r = evaluate(&m, &frames, &c).unwrap();
        assert!(r.miou().unwrap() < 0.4, "{:?}", r.miou());
    }

    #[test]
    fn zero_skew_has_zero_gt_offset() {
        let frames: Vec<_> = (0..2).map(|k| generate(&small_spec(k).with_skew(0.0)).unwrap().bundle).collect();
        let c = config(Variant::Full);
        let m = Models::new(&c, frames[0].cloud.dims()).unwrap();
        let metrics = evaluate(&m, &frames, &c).unwrap().metrics.unwrap();
        assert!(metrics.masked_points > 0);
        assert_eq!(metrics.zero_offset_error, Some(0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let f = frame(5);
        let c = config(Variant::Full);
        let (m, _) = train(&c, std::slice::from_ref(&f)).unwrap();
        let ck = m.to_checkpoint(serde_json::json!({"note": 1}));
        let bytes = crate::dataio::encode_checkpoint(&ck);
        let back = crate::dataio::decode_checkpoint(std::path::Path::new("x"), &bytes).unwrap();
        let m2 = Models::from_checkpoint(&c, f.cloud.dims(), &back).unwrap();
        assert_eq!(m, m2);
        let other = config(Variant::Baseline);
        assert!(Models::from_checkpoint(&other, f.cloud.dims(), &back).is_err());
    }

    #[test]
    fn unlabeled_frames_cannot_train() {
        let mut f = frame(0);
        f.cloud = crate::data_model::PointCloud::new(f.cloud.dims(), f.cloud.data().to_vec(), None).unwrap();
        f.gt_offsets = None;
        assert!(train(&config(Variant::C3x3), &[f]).is_err());
    }
}
