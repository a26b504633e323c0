//! Parallel spatial transformers restricted to a half-scale window with a
//! learned translation, and assembly of the enhanced local feature `F_L`.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::instrument;
use crate::kernels;
use crate::nn::{Conv, FcStack, Init, Mlp};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Fixed scale of the sampling window relative to the proposal.
pub const PART_SCALE: f64 = 0.5;

/// Largest translation the localizer can emit; keeps the half-scale window
/// inside `[-1, 1]²`.
pub const MAX_SHIFT: f64 = 0.5;

/// `S×S` source points in normalised `[-1, 1]` coordinates, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    pub size: usize,
    pub points: Vec<(f64, f64)>,
}

/// Source lattice of `A = [[0.5, 0, t_x], [0, 0.5, t_y]]` applied to a
/// uniform `S×S` target lattice over `[-1, 1]²`.
pub fn build_affine_grid(tx: f64, ty: f64, size: usize) -> Result<SampleGrid> {
    if tx.abs() > MAX_SHIFT || ty.abs() > MAX_SHIFT {
        return Err(Error::Contract(format!(
            "translation ({tx}, {ty}) exceeds ±{MAX_SHIFT}"
        )));
    }
    Ok(SampleGrid {
        size,
        points: kernels::affine_lattice(tx, ty, PART_SCALE, size),
    })
}

/// Samples `U` (`D×S×S`) at the grid with bilinear weights
/// `max(0, 1 − |x_p − m|)·max(0, 1 − |y_p − n|)`.
pub fn bilinear_sample(u: &Tensor, grid: &SampleGrid) -> Result<Tensor> {
    kernels::bilinear_sample_grid(u, &grid.points)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartAttentionDims {
    pub embed: usize,
    pub hidden: usize,
    pub grid: usize,
    pub fc: usize,
    /// Number of transformers `N`; zero disables part sampling.
    pub transformers: usize,
}

#[derive(Clone, Debug)]
pub struct PartAttention {
    pub dims: PartAttentionDims,
    /// One localization network per transformer, `D → 2`.
    pub localizers: Vec<Mlp>,
    /// 1×1 reduction of `(N+1)·D` channels back to `D`.
    pub reduce: Conv,
    pub fc: FcStack,
}

/// Graph handles of one part-attention pass.
#[derive(Clone, Debug)]
pub struct PartRun {
    /// `R×d_fc`.
    pub local_feature: Var,
    /// One `R×2` translation block per transformer.
    pub offsets: Vec<Var>,
    /// One `R×D×S×S` sampled part per transformer.
    pub parts: Vec<Var>,
}

impl PartRun {
    /// Translations `(t_x, t_y)` per proposal, one entry per transformer.
    pub fn translations(&self, g: &Graph) -> Vec<Vec<(f64, f64)>> {
        let rows = g.shape(self.local_feature)[0];
        (0..rows)
            .map(|r| {
                self.offsets
                    .iter()
                    .map(|&t| {
                        let d = g.value(t).data();
                        (d[2 * r], d[2 * r + 1])
                    })
                    .collect()
            })
            .collect()
    }
}

impl PartAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        dims: PartAttentionDims,
        fc_init: Init,
        conv_init: Init,
        rng: &mut R,
    ) -> Self {
        let localizers = (0..dims.transformers)
            .map(|i| Mlp::new(store, &format!("stn-{i}"), "loc", dims.embed, dims.hidden, 2, fc_init, rng))
            .collect();
        let channels = (dims.transformers + 1) * dims.embed;
        PartAttention {
            dims,
            localizers,
            reduce: Conv::new(store, "local-proj", "reduce", channels, dims.embed, 1, 1, 0, conv_init, rng),
            fc: FcStack::new(
                store,
                "local-proj",
                "proj",
                dims.embed * dims.grid * dims.grid,
                dims.fc,
                fc_init,
                rng,
            ),
        }
    }

    /// `0.5·tanh(MLP_i(mean over space of U))`: `R×D×S×S → R×2`.
    pub fn localize(&self, g: &mut Graph, store: &ParamStore, local_embedded: Var, index: usize) -> Result<Var> {
        let mlp = self.localizers.get(index).ok_or_else(|| {
            Error::Contract(format!(
                "transformer index {} with {} transformers",
                index,
                self.localizers.len()
            ))
        })?;
        let pooled = g.global_avg_pool(local_embedded)?;
        let raw = mlp.forward(g, store, pooled)?;
        let bounded = g.tanh(raw);
        Ok(g.scale(bounded, MAX_SHIFT))
    }

    /// Scales each input (per proposal) to unit L2 norm.
    pub fn normalize_parts(g: &mut Graph, tensors: &[Var]) -> Result<Vec<Var>> {
        tensors.iter().map(|&t| g.normalize_items(t)).collect()
    }

    /// `F_L` from the local embedding and sampled parts: normalise, concat on
    /// channels, 1×1 reduce to `D`, flatten, two relu layers.
    pub fn assemble_local(&self, g: &mut Graph, store: &ParamStore, local_embedded: Var, parts: &[Var]) -> Result<Var> {
        if parts.len() != self.dims.transformers {
            return Err(Error::dim(format!(
                "{} parts for {} transformers",
                parts.len(),
                self.dims.transformers
            )));
        }
        let shape = g.shape(local_embedded).to_vec();
        for &p in parts {
            if g.shape(p) != shape.as_slice() {
                return Err(Error::dim(format!(
                    "part shape {:?} differs from local feature {:?}",
                    g.shape(p),
                    shape
                )));
            }
        }
        let mut blocks = vec![local_embedded];
        blocks.extend_from_slice(parts);
        let normed = Self::normalize_parts(g, &blocks)?;
        let mid = if normed.len() == 1 { normed[0] } else { g.concat(&normed, 1)? };
        let reduced = self.reduce.forward(g, store, mid)?;
        let rows = shape[0];
        let flat = g.reshape(reduced, &[rows, shape[1] * shape[2] * shape[3]])?;
        self.fc.forward(g, store, flat)
    }

    /// Full pass. With zero transformers no part is sampled and `F_L` comes
    /// from the local feature alone.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, local_embedded: Var) -> Result<PartRun> {
        let mut offsets = Vec::new();
        let mut parts = Vec::new();
        if self.dims.transformers > 0 {
            instrument::record_part_attention();
            for i in 0..self.dims.transformers {
                let t = self.localize(g, store, local_embedded, i)?;
                parts.push(g.bilinear_shift(local_embedded, t, PART_SCALE)?);
                offsets.push(t);
            }
        }
        let local_feature = self.assemble_local(g, store, local_embedded, &parts)?;
        Ok(PartRun {
            local_feature,
            offsets,
            parts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn centred_grid_corners() {
        let grid = build_affine_grid(0.0, 0.0, 2).unwrap();
        assert_eq!(grid.points, vec![(-0.5, -0.5), (0.5, -0.5), (-0.5, 0.5), (0.5, 0.5)]);
        let one = build_affine_grid(0.5, 0.5, 1).unwrap();
        assert_eq!(one.points, vec![(0.5, 0.5)]);
        assert!(build_affine_grid(0.6, 0.0, 2).is_err());
    }

    #[test]
    fn shifted_grid_matches_hand_evaluation() {
        let grid = build_affine_grid(0.25, -0.25, 3).unwrap();
        let xs = [-0.25, 0.25, 0.75];
        let ys = [-0.75, -0.25, 0.25];
        let expected: Vec<(f64, f64)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
        assert_eq!(grid.points, expected);
    }

    #[test]
    fn constant_map_samples_to_constant() {
        let u = Tensor::full(&[2, 4, 4], 0.3);
        let grid = build_affine_grid(0.37, -0.11, 4).unwrap();
        let q = bilinear_sample(&u, &grid).unwrap();
        assert!(q.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn identity_lattice_reproduces_input_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = Tensor::uniform(&[3, 5, 5], -1.0, 1.0, &mut rng);
        let grid = SampleGrid {
            size: 5,
            points: kernels::affine_lattice(0.0, 0.0, 1.0, 5),
        };
        assert_eq!(bilinear_sample(&u, &grid).unwrap(), u);
    }

    fn module(n: usize) -> (ParamStore, PartAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = PartAttentionDims { embed: 3, hidden: 4, grid: 2, fc: 5, transformers: n };
        let m = PartAttention::new(&mut store, dims, Init::Gaussian(0.5), Init::Gaussian(0.5), &mut rng);
        (store, m)
    }

    #[test]
    fn zero_localizer_centres_window() {
        let (mut store, m) = module(1);
        for lin in [m.localizers[0].hidden, m.localizers[0].output] {
            for id in [lin.weight, lin.bias] {
                let s = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::zeros(&s);
            }
        }
        let mut g = Graph::new();
        let u = g.input(Tensor::uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4)));
        let t = m.localize(&mut g, &store, u, 0).unwrap();
        assert_eq!(g.value(t).data(), &[0.0; 4]);
        assert!(m.localize(&mut g, &store, u, 1).is_err());
    }

    #[test]
    fn normalize_cases() {
        let mut g = Graph::new();
        let twos = g.input(Tensor::full(&[1, 1, 2, 2], 2.0));
        let zeros = g.input(Tensor::zeros(&[1, 1, 2, 2]));
        let out = PartAttention::normalize_parts(&mut g, &[twos, zeros]).unwrap();
        assert_eq!(g.value(out[0]).data(), &[0.5; 4]);
        assert_eq!(g.value(out[1]).data(), &[0.0; 4]);
    }

    #[test]
    fn output_width_is_independent_of_transformer_count() {
        for n in 0..4 {
            let (store, m) = module(n);
            let mut g = Graph::new();
            let u = g.input(Tensor::uniform(&[3, 3, 2, 2], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5)));
            let run = m.forward(&mut g, &store, u).unwrap();
            assert_eq!(g.shape(run.local_feature), &[3, 5]);
            assert_eq!(run.parts.len(), n);
        }
    }

    #[test]
    fn assemble_rejects_mismatched_parts() {
        let (store, m) = module(1);
        let mut g = Graph::new();
        let u = g.input(Tensor::zeros(&[1, 3, 2, 2]));
        let bad = g.input(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(m.assemble_local(&mut g, &store, u, &[bad]).is_err());
        assert!(m.assemble_local(&mut g, &store, u, &[]).is_err());
    }
}
