//! Dataset preparation, the SGD training loop, and test-set evaluation.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::bbox::BBox;
use crate::config::{LossReduction, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{self, export_attention_map, nms, part_window, Detection};
use crate::head::sample_rois;
use crate::model::CmacModel;
use crate::optim::OptimizerState;
use crate::params::{GradBuffer, ParamStore};
use crate::synth::{flip_augment, generate_scene, load_dataset, make_proposals, save_dataset, DetectionSample, Jitter, SceneSpec};

/// Seed of the `index`-th scene of a split.
pub fn scene_seed(data_seed: u64, test: bool, index: usize) -> u64 {
    data_seed * 1_000_000 + if test { 500_000 } else { 0 } + index as u64
}

/// Writes `train/` and `test/` splits under `cfg.data_dir`.
pub fn synthesize(cfg: &RunConfig, spec: &SceneSpec) -> Result<(usize, usize)> {
    if spec.classes != cfg.classes {
        return Err(Error::Config(format!(
            "the scene generator has {} classes, config asks for {}",
            spec.classes, cfg.classes
        )));
    }
    for (split, count, test) in [("train", cfg.train_scenes, false), ("test", cfg.test_scenes, true)] {
        let samples = (0..count)
            .map(|i| generate_scene(spec, scene_seed(cfg.seed, test, i)))
            .collect::<Result<Vec<_>>>()?;
        save_dataset(&samples, &cfg.data_dir.join(split))?;
    }
    Ok((cfg.train_scenes, cfg.test_scenes))
}

/// A scene with its fixed proposal set.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sample: DetectionSample,
    pub proposals: Vec<BBox>,
}

fn id_seed(id: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn prepare(samples: Vec<DetectionSample>, cfg: &RunConfig) -> Result<Vec<Prepared>> {
    samples
        .into_iter()
        .map(|sample| {
            let proposals = make_proposals(
                &sample.gt_boxes(),
                cfg.proposals_per_gt,
                Jitter::default(),
                cfg.background_proposals,
                sample.width(),
                id_seed(&sample.id),
            )?;
            Ok(Prepared { sample, proposals })
        })
        .collect()
}

pub fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<Prepared>> {
    let dir = cfg.data_dir.join(split);
    if !dir.join("manifest").exists() {
        return Err(Error::Config(format!(
            "no dataset at {} (run `cmac synth` first)",
            dir.display()
        )));
    }
    prepare(load_dataset(&dir)?, cfg)
}

/// One optimisation step as logged.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub iter: usize,
    pub epoch: usize,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_loc: f64,
    pub lr: f64,
    pub fg: usize,
    pub bg: usize,
    pub images: usize,
    pub flipped: usize,
}

pub const LOG_HEADER: &str = "# iter epoch loss loss_cls loss_loc lr fg bg images flipped";

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {:.6} {:.6} {:.6} {:e} {} {} {} {}",
            self.iter, self.epoch, self.loss, self.loss_cls, self.loss_loc, self.lr, self.fg, self.bg, self.images, self.flipped
        )
    }
}

impl std::str::FromStr for StepLog {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Config(format!("bad log line {:?}", line));
        if f.len() != 10 {
            return Err(bad());
        }
        let u = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
        let r = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(StepLog {
            iter: u(0)?,
            epoch: u(1)?,
            loss: r(2)?,
            loss_cls: r(3)?,
            loss_loc: r(4)?,
            lr: r(5)?,
            fg: u(6)?,
            bg: u(7)?,
            images: u(8)?,
            flipped: u(9)?,
        })
    }
}

/// Reads the step lines of a training log, skipping comments.
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(str::parse)
        .collect()
}

pub struct TrainOutcome {
    pub model: CmacModel,
    pub store: ParamStore,
    pub log: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

/// Builds a freshly initialised model from the config seed.
pub fn init_model(cfg: &RunConfig) -> Result<(CmacModel, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = CmacModel::new(cfg, &mut store, &mut rng)?;
    Ok((model, store))
}

/// SGD with momentum over `train`. Writes `train.log` and one checkpoint per
/// epoch into `out` when given.
pub fn train(cfg: &RunConfig, train: &[Prepared], out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.len() < cfg.images_per_batch {
        return Err(Error::Config(format!(
            "{} training images for batches of {}",
            train.len(),
            cfg.images_per_batch
        )));
    }
    let (model, mut store) = init_model(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a41);
    let mut opt = OptimizerState::new(&store, cfg.lr, cfg.momentum)?;
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train.log");
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", LOG_HEADER).map_err(|e| Error::io(&path, e))?;
            writeln!(
                f,
                "# sgd lr0={:e} momentum={} decay={} every={} flip_prob={}",
                cfg.lr, cfg.momentum, cfg.lr_decay_factor, cfg.decay_every_epochs, cfg.flip_prob
            )
            .map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let per_image = cfg.rois_per_image();
    let fg_fraction = cfg.fg_fraction;
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.images_per_batch) {
            let mut g = Graph::new();
            let mut cls_terms = Vec::new();
            let mut loc_terms = Vec::new();
            let (mut fg, mut bg, mut flipped) = (0, 0, 0);
            for &i in batch {
                let p = &train[i];
                let (sample, proposals, did_flip) = flip_augment(&p.sample, &p.proposals, cfg.flip_prob, &mut rng)?;
                flipped += usize::from(did_flip);
                let rois = sample_rois(&sample.id, &proposals, &sample.gts, per_image, fg_fraction, &mut rng)?;
                fg += rois.iter().filter(|r| r.is_foreground()).count();
                bg += rois.iter().filter(|r| !r.is_foreground()).count();
                let (c, l) = model.image_loss(&mut g, &store, &sample, &rois)?;
                cls_terms.push(c);
                loc_terms.push(l);
            }
            let norm = match cfg.loss_reduction {
                LossReduction::Sum => 1.0,
                LossReduction::Mean => 1.0 / (fg + bg) as f64,
            };
            let mut cls = cls_terms[0];
            let mut loc = loc_terms[0];
            for k in 1..cls_terms.len() {
                cls = g.add(cls, cls_terms[k])?;
                loc = g.add(loc, loc_terms[k])?;
            }
            let cls = g.scale(cls, norm);
            let loc = g.scale(loc, norm);
            let loss = g.add(cls, loc)?;
            let grads = g.backward(loss)?;
            let mut buffer = GradBuffer::zeros_like(&store);
            buffer.accumulate(&grads.params());
            opt.step(&mut store, &buffer)?;
            let entry = StepLog {
                iter,
                epoch,
                loss: g.value(loss).item(),
                loss_cls: g.value(cls).item(),
                loss_loc: g.value(loc).item(),
                lr: opt.lr,
                fg,
                bg,
                images: batch.len(),
                flipped,
            };
            if !entry.loss.is_finite() {
                return Err(Error::Contract(format!("loss diverged at iteration {}", iter)));
            }
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(f, "{}", entry).map_err(|e| Error::io(path.as_path(), e))?;
            }
            log::debug!("{}", entry);
            log.push(entry);
            iter += 1;
        }
        if let Some(dir) = out {
            let path = dir.join(format!("epoch-{:02}.ckpt", epoch + 1));
            store.save(&path)?;
            checkpoints.push(path);
        }
    }
    if let Some(dir) = out {
        let path = dir.join("final.ckpt");
        store.save(&path)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        model,
        store,
        log,
        checkpoints,
    })
}

/// Mean loss of each epoch.
pub fn epoch_means(log: &[StepLog]) -> Vec<f64> {
    let epochs = log.iter().map(|l| l.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let v: Vec<f64> = log.iter().filter(|l| l.epoch == e).map(|l| l.loss).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

pub struct EvalOutcome {
    pub detections: Vec<Detection>,
    pub per_class: std::collections::BTreeMap<usize, Option<f64>>,
    pub map: f64,
    pub exported: usize,
}

/// Scores every test proposal, applies per-class NMS per image, and
/// computes AP. With `export` set, writes one attention graymap per
/// proposal (and its part windows) into that directory.
pub fn evaluate(
    model: &CmacModel,
    store: &ParamStore,
    test: &[Prepared],
    cfg: &RunConfig,
    export: Option<&Path>,
) -> Result<EvalOutcome> {
    if let Some(dir) = export {
        if !model.streams.iter().any(|s| s.global.is_some()) {
            return Err(Error::Config("attention export needs the global attention module".to_string()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let c = model.classes;
    let mut detections = Vec::new();
    let mut exported = 0;
    for (i, p) in test.iter().enumerate() {
        let (w, h) = (p.sample.width() as f64, p.sample.height() as f64);
        let (scores, g, runs) = model.score(store, &p.sample, &p.proposals)?;
        let mut image_dets = Vec::with_capacity(p.proposals.len() * c);
        for (r, proposal) in p.proposals.iter().enumerate() {
            let bbox = model.decode(&scores, r, proposal, w, h);
            for class in 1..=c {
                image_dets.push(Detection {
                    image: i,
                    bbox,
                    class,
                    score: scores.probs.data()[r * (c + 1) + class],
                });
            }
        }
        detections.extend(nms(&image_dets, cfg.nms_thresh));
        if let Some(dir) = export {
            let run = runs.iter().find(|r| r.global_run.is_some()).unwrap();
            let traces = run.global_run.as_ref().unwrap().traces(&g);
            let shifts = run.part_run.translations(&g);
            for (r, proposal) in p.proposals.iter().enumerate() {
                let parts: Vec<BBox> = shifts[r].iter().map(|&(tx, ty)| part_window(proposal, tx, ty)).collect();
                let path = dir.join(format!("{}-{:03}.pgm", p.sample.id, r));
                export_attention_map(&traces[r], w as usize, h as usize, &parts, &path)?;
                exported += 1;
            }
        }
    }
    let gts: Vec<Vec<(BBox, usize)>> = test.iter().map(|p| p.sample.gts.clone()).collect();
    let (per_class, map) = eval::evaluate(&detections, &gts, c, cfg.ap_method)?;
    Ok(EvalOutcome {
        detections,
        per_class,
        map,
        exported,
    })
}
