//! The complete detector: per-modality backbones feeding one or more
//! streams, each with fusion, optional global context, part attention, and
//! the detection head.
//!
//! With cross-modal fusion a single stream sees both modalities. Without
//! it, RGB and depth get independent streams whose class scores and box
//! offsets are averaged at test time.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::bbox::BBox;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::global_attention::{GlobalContext, GlobalContextDims, GlobalContextRun};
use crate::head::{batch_loss, decode_box, DetectionHead, RoiSample, BOX_CODE};
use crate::nn::{Conv, Init};
use crate::params::ParamStore;
use crate::part_attention::{PartAttention, PartAttentionDims, PartRun};
use crate::roi::{fuse, pool_global, roi_pool, ContextEmbedding};
use crate::synth::DetectionSample;
use crate::tensor::Tensor;

/// Feature map stride of the backbone.
pub const SPATIAL_SCALE: f64 = 0.25;

/// Per-coordinate scales applied to regression targets when target
/// normalisation is switched on.
pub const TARGET_SCALES: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Depth,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
        }
    }

    pub fn image(self, sample: &DetectionSample) -> &Tensor {
        match self {
            Modality::Rgb => &sample.rgb,
            Modality::Depth => &sample.geo,
        }
    }
}

/// Two strided convolutions with relu: `3×H×W → C×H/4×W/4`.
#[derive(Clone, Copy, Debug)]
pub struct Backbone {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, group: &str, channels: usize, init: Init, rng: &mut R) -> Self {
        Backbone {
            conv1: Conv::new(store, group, "conv1", 3, channels, 5, 2, 2, init, rng),
            conv2: Conv::new(store, group, "conv2", channels, channels, 3, 2, 1, init, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let a = self.conv1.forward(g, store, image)?;
        let a = g.relu(a);
        let b = self.conv2.forward(g, store, a)?;
        Ok(g.relu(b))
    }
}

#[derive(Clone, Debug)]
pub struct Stream {
    pub modalities: Vec<Modality>,
    pub embed: ContextEmbedding,
    pub global: Option<GlobalContext>,
    pub part: PartAttention,
    pub head: DetectionHead,
}

/// Graph handles for one stream on one image.
#[derive(Clone, Debug)]
pub struct StreamRun {
    /// `R×(C+1)`.
    pub probs: Var,
    /// `R×4C`.
    pub offsets: Var,
    pub local_feature: Var,
    pub global_feature: Option<Var>,
    pub global_run: Option<GlobalContextRun>,
    pub part_run: PartRun,
}

#[derive(Clone, Debug)]
pub struct CmacModel {
    pub backbones: Vec<(Modality, Backbone)>,
    pub streams: Vec<Stream>,
    pub classes: usize,
    pub grid: usize,
    pub roi: usize,
    pub steps: usize,
    pub normalize_targets: bool,
}

/// Test-time output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    /// `R×(C+1)` averaged over streams.
    pub probs: Tensor,
    /// `R×4C` averaged over streams, in target units.
    pub offsets: Tensor,
}

impl CmacModel {
    /// Builds the model and registers its parameters. Backbones use the
    /// xavier scheme; new layers use the configured Gaussian widths.
    pub fn new<R: Rng>(cfg: &RunConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let fc_init = Init::Gaussian(cfg.fc_init_std);
        let conv_init = Init::Gaussian(cfg.conv_init_std);
        let mut modalities = vec![Modality::Rgb];
        if cfg.use_depth_stream {
            modalities.push(Modality::Depth);
        }
        let backbones: Vec<(Modality, Backbone)> = modalities
            .iter()
            .map(|&m| {
                let group = format!("backbone-{}", m.name());
                (m, Backbone::new(store, &group, cfg.backbone_channels, Init::Xavier, rng))
            })
            .collect();
        let layout: Vec<Vec<Modality>> = if cfg.use_cross_modal_fusion || modalities.len() == 1 {
            vec![modalities.clone()]
        } else {
            modalities.iter().map(|&m| vec![m]).collect()
        };
        let scoped = layout.len() > 1;
        let mut streams = Vec::with_capacity(layout.len());
        for mods in layout {
            if scoped {
                store.set_scope(&format!("{}:", mods[0].name()));
            }
            let fused = mods.len() * cfg.backbone_channels;
            let embed = ContextEmbedding::new(store, "fusion-embed", fused, cfg.embed, conv_init, rng);
            let global = cfg.use_global_attention.then(|| {
                let dims = GlobalContextDims {
                    grid: cfg.grid,
                    embed: cfg.embed,
                    hidden: cfg.hidden,
                    fc: cfg.fc,
                };
                GlobalContext::new(store, dims, fc_init, rng)
            });
            let part_dims = PartAttentionDims {
                embed: cfg.embed,
                hidden: cfg.hidden,
                grid: cfg.roi,
                fc: cfg.fc,
                transformers: cfg.parts(),
            };
            let part = PartAttention::new(store, part_dims, fc_init, conv_init, rng);
            let cls_inputs = if global.is_some() { 2 * cfg.fc } else { cfg.fc };
            let head = DetectionHead::new(store, "heads", cls_inputs, cfg.fc, cfg.classes, fc_init, rng);
            streams.push(Stream {
                modalities: mods,
                embed,
                global,
                part,
                head,
            });
        }
        store.set_scope("");
        Ok(CmacModel {
            backbones,
            streams,
            classes: cfg.classes,
            grid: cfg.grid,
            roi: cfg.roi,
            steps: cfg.steps,
            normalize_targets: cfg.normalize_targets,
        })
    }

    /// Backbone feature maps of one image, one per modality.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, sample: &DetectionSample) -> Result<Vec<(Modality, Var)>> {
        self.backbones
            .iter()
            .map(|(m, b)| {
                let image = g.input(m.image(sample).clone());
                Ok((*m, b.forward(g, store, image)?))
            })
            .collect()
    }

    fn run_stream(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stream: &Stream,
        maps: &[(Modality, Var)],
        rois: &[BBox],
    ) -> Result<StreamRun> {
        let mut locals = Vec::with_capacity(stream.modalities.len());
        let mut globals = Vec::with_capacity(stream.modalities.len());
        for m in &stream.modalities {
            let (_, map) = maps
                .iter()
                .find(|(mm, _)| mm == m)
                .ok_or_else(|| Error::Contract(format!("no feature map for {}", m.name())))?;
            locals.push(roi_pool(g, *map, rois, SPATIAL_SCALE, self.roi)?);
            globals.push(pool_global(g, *map, self.grid)?);
        }
        let local = fuse(g, &locals)?;
        let global = fuse(g, &globals)?;
        let feats = stream.embed.embed_context(g, store, global, local)?;
        let (global_feature, global_run) = match &stream.global {
            Some(gc) => {
                let run = gc.run(g, store, feats.global_slices, feats.z, self.steps)?;
                (Some(gc.project(g, store, run.raw)?), Some(run))
            }
            None => (None, None),
        };
        let part_run = stream.part.forward(g, store, feats.local_embedded)?;
        let local_feature = part_run.local_feature;
        let probs = stream.head.classify(g, store, local_feature, global_feature)?;
        let offsets = stream.head.regress(g, store, local_feature)?;
        Ok(StreamRun {
            probs,
            offsets,
            local_feature,
            global_feature,
            global_run,
            part_run,
        })
    }

    /// All streams on one image's proposals.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sample: &DetectionSample,
        rois: &[BBox],
    ) -> Result<Vec<StreamRun>> {
        let maps = self.features(g, store, sample)?;
        self.streams
            .iter()
            .map(|s| self.run_stream(g, store, s, &maps, rois))
            .collect()
    }

    /// Regression target for a sampled ROI in the units the head predicts.
    pub fn head_target(&self, roi: &RoiSample) -> [f64; 4] {
        if self.normalize_targets {
            let mut t = roi.target;
            for (v, s) in t.iter_mut().zip(TARGET_SCALES) {
                *v /= s;
            }
            t
        } else {
            roi.target
        }
    }

    /// Summed classification and localisation losses of every stream over
    /// one image's sampled ROIs. Returns `(cls, loc)`.
    pub fn image_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sample: &DetectionSample,
        rois: &[RoiSample],
    ) -> Result<(Var, Var)> {
        let boxes: Vec<BBox> = rois.iter().map(|r| r.proposal).collect();
        let labels: Vec<usize> = rois.iter().map(|r| r.label).collect();
        let targets: Vec<[f64; 4]> = rois.iter().map(|r| self.head_target(r)).collect();
        let runs = self.forward(g, store, sample, &boxes)?;
        let mut cls = Vec::new();
        let mut loc = Vec::new();
        for run in &runs {
            let l = batch_loss(g, run.probs, run.offsets, &labels, &targets)?;
            cls.push(l.cls);
            loc.push(l.loc);
        }
        Ok((sum_all(g, &cls)?, sum_all(g, &loc)?))
    }

    /// Class probabilities and offsets averaged over streams.
    pub fn score(&self, store: &ParamStore, sample: &DetectionSample, rois: &[BBox]) -> Result<(ImageScores, Graph, Vec<StreamRun>)> {
        let mut g = Graph::new();
        let runs = self.forward(&mut g, store, sample, rois)?;
        let n = runs.len() as f64;
        let mut probs = g.value(runs[0].probs).clone();
        let mut offsets = g.value(runs[0].offsets).clone();
        for run in &runs[1..] {
            probs = probs.zip_map(g.value(run.probs), |a, b| a + b)?;
            offsets = offsets.zip_map(g.value(run.offsets), |a, b| a + b)?;
        }
        let probs = probs.map(|v| v / n);
        let offsets = offsets.map(|v| v / n);
        Ok((ImageScores { probs, offsets }, g, runs))
    }

    /// Box for proposal `r` using the offsets of its most probable
    /// foreground class, clipped to the image.
    pub fn decode(&self, scores: &ImageScores, r: usize, proposal: &BBox, width: f64, height: f64) -> BBox {
        let c = self.classes;
        let p = &scores.probs.data()[r * (c + 1)..(r + 1) * (c + 1)];
        let best = (1..=c).fold(1, |b, k| if p[k] > p[b] { k } else { b });
        let start = r * BOX_CODE * c + (best - 1) * BOX_CODE;
        let mut o = [0.0; 4];
        o.copy_from_slice(&scores.offsets.data()[start..start + BOX_CODE]);
        if self.normalize_targets {
            for (v, s) in o.iter_mut().zip(TARGET_SCALES) {
                *v *= s;
            }
        }
        decode_box(proposal, &o).clip(width, height)
    }
}

fn sum_all(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}
