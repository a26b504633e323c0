//! Central-difference gradient estimates used to verify the tape, and the
//! per-group check of the complete detector.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::RunConfig;
use crate::error::Result;
use crate::head::{sample_rois, RoiSample};
use crate::model::CmacModel;
use crate::params::{ParamId, ParamStore};
use crate::synth::{generate_scene, make_proposals, DetectionSample, Jitter, SceneSpec};

/// Default step for central differences.
pub const DEFAULT_EPS: f64 = 1e-3;

/// Acceptance threshold on [`relative_error`].
pub const DEFAULT_RTOL: f64 = 1e-4;

/// `(f(p + eps·e_i) − f(p − eps·e_i)) / (2·eps)` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let plus = f(&p);
            p[i] = orig - eps;
            let minus = f(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Worst coordinate error scaled by the largest gradient magnitude in the
/// set: `max_i |a_i − n_i| / max(max_i |a_i|, max_i |n_i|)`. Sets whose
/// gradients are all below `1e-300` compare as exact zeros.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale < 1e-300 {
        worst
    } else {
        worst / scale
    }
}


/// Outcome for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    /// Coordinates skipped because `±eps` crossed a kink (relu, max-pool
    /// argmax, sampler cell, smooth-L1 piece).
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude among checked coordinates.
    pub scale: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOptions {
    pub eps: f64,
    pub rtol: f64,
    /// Coordinates compared per group.
    pub per_group: usize,
    /// ROIs drawn from the synthetic image.
    pub rois: usize,
    /// Standard deviation for the Gaussian-initialised layers during the
    /// check; `None` keeps the configured init. At 0.01 / 0.001 the
    /// attention-path gradients fall to ~1e-16, below what central
    /// differences resolve on a loss of order 1.
    pub init_std: Option<f64>,
    /// Scales the analytic gradient of this group, to show the check
    /// catches a broken rule.
    pub corrupt_group: Option<String>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: DEFAULT_EPS,
            rtol: DEFAULT_RTOL,
            per_group: 24,
            rois: 8,
            init_std: Some(0.3),
            corrupt_group: None,
        }
    }
}

/// Mean multi-task loss of the model over a fixed ROI batch.
fn model_loss(model: &CmacModel, store: &ParamStore, sample: &DetectionSample, rois: &[RoiSample]) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let (cls, loc) = model.image_loss(&mut g, store, sample, rois)?;
    let total = g.add(cls, loc)?;
    let loss = g.scale(total, 1.0 / rois.len() as f64);
    Ok((g, loss))
}

/// Compares backward against central differences on a random subset of
/// every parameter group of a freshly initialised model.
pub fn check_model(cfg: &RunConfig, seed: u64, opts: &CheckOptions) -> Result<Vec<GroupReport>> {
    let mut cfg = RunConfig { seed, ..cfg.clone() };
    if let Some(std) = opts.init_std {
        cfg.fc_init_std = std;
        cfg.conv_init_std = std;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = CmacModel::new(&cfg, &mut store, &mut rng)?;
    let spec = SceneSpec::default();
    let sample = generate_scene(&spec, seed)?;
    let proposals = make_proposals(&sample.gt_boxes(), 4, Jitter::default(), 8, sample.width(), seed)?;
    let rois = sample_rois(&sample.id, &proposals, &sample.gts, opts.rois, 0.5, &mut rng)?;

    let (g, loss) = model_loss(&model, &store, &sample, &rois)?;
    let base_sig = g.branch_signature();
    let grads = g.backward(loss)?;
    let analytic: Vec<(ParamId, Vec<f64>)> = grads.params().into_iter().map(|(id, t)| (id, t.into_data())).collect();
    let analytic_of = |id: ParamId| &analytic.iter().find(|(i, _)| *i == id).unwrap().1;

    let mut reports = Vec::new();
    for group in store.groups() {
        let coords: Vec<(ParamId, usize)> = store
            .ids()
            .filter(|&id| store.group(id) == group)
            .flat_map(|id| (0..store.get(id).len()).map(move |k| (id, k)))
            .collect();
        let order = sample_indices(&mut rng, coords.len(), coords.len());
        let (mut a, mut n) = (Vec::new(), Vec::new());
        let mut skipped = 0;
        for idx in order {
            if a.len() == opts.per_group {
                break;
            }
            let (id, k) = coords[idx];
            let orig = store.get(id).data()[k];
            let eval_at = |v: f64, store: &mut ParamStore| -> Result<(f64, u64)> {
                store.get_mut(id).data_mut()[k] = v;
                let (g, loss) = model_loss(&model, store, &sample, &rois)?;
                Ok((g.value(loss).item(), g.branch_signature()))
            };
            let (plus, sp) = eval_at(orig + opts.eps, &mut store)?;
            let (minus, sm) = eval_at(orig - opts.eps, &mut store)?;
            store.get_mut(id).data_mut()[k] = orig;
            if sp != base_sig || sm != base_sig {
                skipped += 1;
                continue;
            }
            let mut value = analytic_of(id)[k];
            if opts.corrupt_group.as_deref() == Some(group.as_str()) {
                value *= 1.5;
            }
            a.push(value);
            n.push((plus - minus) / (2.0 * opts.eps));
        }
        let err = relative_error(&a, &n);
        reports.push(GroupReport {
            passed: err < opts.rtol && !a.is_empty(),
            group,
            checked: a.len(),
            skipped,
            max_rel_error: err,
            scale: a.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
        });
    }
    Ok(reports)
}
