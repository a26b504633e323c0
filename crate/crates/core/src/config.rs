//! Run configuration: model dimensions, training schedule, ablation
//! switches, and paths. Read from `key = value` lines (with `#` comments)
//! and overridden by `key=value` strings from the command line.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::ApMethod;

/// How the per-ROI losses of one step are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossReduction {
    Sum,
    /// Divide by the number of ROIs in the step.
    Mean,
}

impl FromStr for LossReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(LossReduction::Sum),
            "mean" => Ok(LossReduction::Mean),
            _ => Err(Error::Config(format!("loss_reduction must be sum or mean, got {:?}", s))),
        }
    }
}

impl fmt::Display for LossReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossReduction::Sum => "sum",
            LossReduction::Mean => "mean",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Global grid side `K`.
    pub grid: usize,
    /// ROI grid side `S`.
    pub roi: usize,
    /// Embedded channels `D`.
    pub embed: usize,
    /// LSTM and MLP width `d`.
    pub hidden: usize,
    /// Width of `F_L` and `F_G`.
    pub fc: usize,
    pub steps: usize,
    pub transformers: usize,
    pub classes: usize,
    /// Channels of each backbone layer.
    pub backbone_channels: usize,

    pub batch_size: usize,
    pub fg_fraction: f64,
    pub images_per_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub decay_every_epochs: usize,
    pub epochs: usize,
    pub flip_prob: f64,
    pub seed: u64,
    pub fc_init_std: f64,
    pub conv_init_std: f64,
    /// Divide regression targets by fixed per-coordinate scales.
    pub normalize_targets: bool,
    pub loss_reduction: LossReduction,

    pub use_global_attention: bool,
    pub use_part_attention: bool,
    pub use_depth_stream: bool,
    pub use_cross_modal_fusion: bool,

    pub train_scenes: usize,
    pub test_scenes: usize,
    pub proposals_per_gt: usize,
    pub background_proposals: usize,
    pub nms_thresh: f64,
    pub ap_method: ApMethod,

    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: 8,
            roi: 4,
            embed: 32,
            hidden: 32,
            fc: 64,
            steps: 4,
            transformers: 2,
            classes: 3,
            backbone_channels: 16,
            batch_size: 128,
            fg_fraction: 0.25,
            images_per_batch: 2,
            lr: 0.001,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            decay_every_epochs: 4,
            epochs: 10,
            flip_prob: 0.5,
            seed: 0,
            fc_init_std: 0.1,
            conv_init_std: 0.1,
            normalize_targets: false,
            loss_reduction: LossReduction::Sum,
            use_global_attention: true,
            use_part_attention: true,
            use_depth_stream: true,
            use_cross_modal_fusion: true,
            train_scenes: 200,
            test_scenes: 50,
            proposals_per_gt: 8,
            background_proposals: 16,
            nms_thresh: 0.3,
            ap_method: ApMethod::AllPoint,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {:?} for {}", value, key)))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {:?} for {}", value, key))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "grid" | "K" => self.grid = parse(key, v)?,
            "roi" | "S" => self.roi = parse(key, v)?,
            "embed" | "D" => self.embed = parse(key, v)?,
            "hidden" | "d" => self.hidden = parse(key, v)?,
            "fc" | "d_fc" => self.fc = parse(key, v)?,
            "steps" | "T_steps" => self.steps = parse(key, v)?,
            "transformers" | "N_stn" => self.transformers = parse(key, v)?,
            "classes" | "C" => self.classes = parse(key, v)?,
            "backbone_channels" => self.backbone_channels = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "fg_fraction" => self.fg_fraction = parse(key, v)?,
            "images_per_batch" => self.images_per_batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, v)?,
            "decay_every_epochs" => self.decay_every_epochs = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "flip_prob" => self.flip_prob = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "fc_init_std" => self.fc_init_std = parse(key, v)?,
            "conv_init_std" => self.conv_init_std = parse(key, v)?,
            "normalize_targets" => self.normalize_targets = parse_bool(key, v)?,
            "loss_reduction" => self.loss_reduction = v.parse()?,
            "use_global_attention" => self.use_global_attention = parse_bool(key, v)?,
            "use_part_attention" => self.use_part_attention = parse_bool(key, v)?,
            "use_depth_stream" => self.use_depth_stream = parse_bool(key, v)?,
            "use_cross_modal_fusion" => self.use_cross_modal_fusion = parse_bool(key, v)?,
            "train_scenes" => self.train_scenes = parse(key, v)?,
            "test_scenes" => self.test_scenes = parse(key, v)?,
            "proposals_per_gt" => self.proposals_per_gt = parse(key, v)?,
            "background_proposals" => self.background_proposals = parse(key, v)?,
            "nms_thresh" => self.nms_thresh = parse(key, v)?,
            "ap_method" => self.ap_method = v.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key {:?}", other))),
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {:?}", assignment)))?;
        self.set(k, v)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply_override(line)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("grid", self.grid),
            ("roi", self.roi),
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("fc", self.fc),
            ("steps", self.steps),
            ("classes", self.classes),
            ("backbone_channels", self.backbone_channels),
            ("batch_size", self.batch_size),
            ("images_per_batch", self.images_per_batch),
            ("decay_every_epochs", self.decay_every_epochs),
            ("proposals_per_gt", self.proposals_per_gt),
        ];
        if let Some((k, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{} must be positive", k)));
        }
        if self.use_part_attention && self.transformers == 0 {
            return Err(Error::Config("transformers must be positive with part attention on".to_string()));
        }
        if self.batch_size % self.images_per_batch != 0 {
            return Err(Error::Config(format!(
                "batch_size {} is not a multiple of images_per_batch {}",
                self.batch_size, self.images_per_batch
            )));
        }
        for (k, p) in [("fg_fraction", self.fg_fraction), ("flip_prob", self.flip_prob), ("momentum", self.momentum)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{} = {} outside [0, 1]", k, p)));
            }
        }
        if !(self.nms_thresh > 0.0 && self.nms_thresh < 1.0) {
            return Err(Error::Config(format!("nms_thresh {} outside (0, 1)", self.nms_thresh)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        Ok(())
    }

    /// Learning rate during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = (epoch / self.decay_every_epochs) as i32;
        // Dividing by 10^k keeps 0.001 → 1e-4 → 1e-5 exact in the log.
        let inverse = 1.0 / self.lr_decay_factor;
        if (inverse - inverse.round()).abs() < 1e-12 {
            self.lr / inverse.round().powi(k)
        } else {
            self.lr * self.lr_decay_factor.powi(k)
        }
    }

    /// Effective number of transformers.
    pub fn parts(&self) -> usize {
        if self.use_part_attention {
            self.transformers
        } else {
            0
        }
    }

    /// ROIs drawn from each image of a minibatch.
    pub fn rois_per_image(&self) -> usize {
        self.batch_size / self.images_per_batch
    }

    /// The configuration as `key = value` lines, readable by
    /// [`RunConfig::parse_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let ap = match self.ap_method {
            ApMethod::AllPoint => "all-point",
            ApMethod::ElevenPoint => "11-point",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("grid", self.grid.to_string()),
            ("roi", self.roi.to_string()),
            ("embed", self.embed.to_string()),
            ("hidden", self.hidden.to_string()),
            ("fc", self.fc.to_string()),
            ("steps", self.steps.to_string()),
            ("transformers", self.transformers.to_string()),
            ("classes", self.classes.to_string()),
            ("backbone_channels", self.backbone_channels.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("fg_fraction", format!("{:?}", self.fg_fraction)),
            ("images_per_batch", self.images_per_batch.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("momentum", format!("{:?}", self.momentum)),
            ("lr_decay_factor", format!("{:?}", self.lr_decay_factor)),
            ("decay_every_epochs", self.decay_every_epochs.to_string()),
            ("epochs", self.epochs.to_string()),
            ("flip_prob", format!("{:?}", self.flip_prob)),
            ("seed", self.seed.to_string()),
            ("fc_init_std", format!("{:?}", self.fc_init_std)),
            ("conv_init_std", format!("{:?}", self.conv_init_std)),
            ("normalize_targets", self.normalize_targets.to_string()),
            ("loss_reduction", self.loss_reduction.to_string()),
            ("use_global_attention", self.use_global_attention.to_string()),
            ("use_part_attention", self.use_part_attention.to_string()),
            ("use_depth_stream", self.use_depth_stream.to_string()),
            ("use_cross_modal_fusion", self.use_cross_modal_fusion.to_string()),
            ("train_scenes", self.train_scenes.to_string()),
            ("test_scenes", self.test_scenes.to_string()),
            ("proposals_per_gt", self.proposals_per_gt.to_string()),
            ("background_proposals", self.background_proposals.to_string()),
            ("nms_thresh", format!("{:?}", self.nms_thresh)),
            ("ap_method", ap.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        for (k, v) in pairs {
            writeln!(out, "{} = {}", k, v).unwrap();
        }
        out
    }
}
