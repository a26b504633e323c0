mod common;

use cmac::bbox::BBox;
use cmac::eval::{average_precision, nms, ApMethod, Detection};
use cmac::global_attention::{GlobalContext, GlobalContextDims};
use cmac::head::{decode_box, encode_targets};
use cmac::kernels::{adaptive_max_pool, affine_lattice, bilinear_sample_grid};
use cmac::nn::Init;
use cmac::part_attention::{bilinear_sample, build_affine_grid, MAX_SHIFT};
use cmac::roi::roi_pool_tensor;
use cmac::synth::{flip, generate_scene, make_proposals, Jitter, SceneSpec};
use cmac::{Graph, ParamStore};
use common::{adaptive_oracle, ap_oracle, interpolation_oracle, random_tensor, roi_oracle};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn sampler_matches_brute_force_interpolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let s = rng.gen_range(2..7);
        let d = rng.gen_range(1..4);
        let u = random_tensor(&[d, s, s], &mut rng);
        let grid: Vec<(f64, f64)> = (0..s * s).map(|_| (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0))).collect();
        let v = bilinear_sample_grid(&u, &grid).unwrap();
        for c in 0..d {
            let plane = &u.data()[c * s * s..(c + 1) * s * s];
            for (k, &(xs, ys)) in grid.iter().enumerate() {
                let want = interpolation_oracle(plane, s, xs, ys);
                assert!((v.data()[c * s * s + k] - want).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn identity_grid_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for s in 1..8 {
        let u = random_tensor(&[3, s, s], &mut rng);
        let v = bilinear_sample_grid(&u, &affine_lattice(0.0, 0.0, 1.0, s)).unwrap();
        assert_eq!(v.data(), u.data());
    }
}

#[test]
fn half_scale_centre_grid_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let u = random_tensor(&[2, 5, 5], &mut rng);
    let grid = build_affine_grid(0.0, 0.0, 5).unwrap();
    let v = bilinear_sample(&u, &grid).unwrap();
    for c in 0..2 {
        for (k, &(xs, ys)) in grid.points.iter().enumerate() {
            let want = interpolation_oracle(&u.data()[c * 25..(c + 1) * 25], 5, xs, ys);
            assert!((v.data()[c * 25 + k] - want).abs() <= 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn bounded_translations_stay_in_bounds(tx in -MAX_SHIFT..=MAX_SHIFT, ty in -MAX_SHIFT..=MAX_SHIFT, s in 1usize..9) {
        let grid = build_affine_grid(tx, ty, s).unwrap();
        for &(x, y) in &grid.points {
            prop_assert!((-1.0..=1.0).contains(&x) && (-1.0..=1.0).contains(&y));
        }
    }

    #[test]
    fn encode_decode_round_trip(
        px in 0.0..100.0f64, py in 0.0..100.0f64, pw in 1.0..60.0f64, ph in 1.0..60.0f64,
        gx in 0.0..100.0f64, gy in 0.0..100.0f64, gw in 1.0..60.0f64, gh in 1.0..60.0f64,
    ) {
        let p = BBox::new(px, py, px + pw, py + ph);
        let gt = BBox::new(gx, gy, gx + gw, gy + gh);
        let back = decode_box(&p, &encode_targets(&p, &gt).unwrap());
        for (a, b) in [(back.x1, gt.x1), (back.y1, gt.y1), (back.x2, gt.x2), (back.y2, gt.y2)] {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn nms_is_order_independent(seed in 0u64..500, n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dets: Vec<Detection> = (0..n)
            .map(|k| {
                let x = rng.gen_range(0.0..30.0);
                let y = rng.gen_range(0.0..30.0);
                Detection {
                    image: 0,
                    bbox: BBox::new(x, y, x + rng.gen_range(5.0..20.0), y + rng.gen_range(5.0..20.0)),
                    class: rng.gen_range(1..3),
                    // distinct scores
                    score: (k as f64 + rng.gen_range(0.0..0.5)) / n as f64,
                }
            })
            .collect();
        let mut a = nms(&dets, 0.3);
        dets.reverse();
        let mut b = nms(&dets, 0.3);
        a.sort_by(|x, y| x.score.total_cmp(&y.score));
        b.sort_by(|x, y| x.score.total_cmp(&y.score));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn flip_is_an_involution(seed in 0u64..200) {
        let spec = SceneSpec::default();
        let sample = generate_scene(&spec, seed).unwrap();
        let props = make_proposals(&sample.gt_boxes(), 4, Jitter::default(), 8, spec.image_size, seed).unwrap();
        let (once, p1) = flip(&sample, &props);
        let (twice, p2) = flip(&once, &p1);
        prop_assert_eq!(twice, sample);
        prop_assert_eq!(p2, props);
    }
}

#[test]
fn adaptive_max_pool_bit_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let (oh, ow) = (rng.gen_range(1..=h), rng.gen_range(1..=w));
        let x = random_tensor(&[2, h, w], &mut rng);
        let (y, _) = adaptive_max_pool(&x, oh, ow).unwrap();
        assert_eq!(y.data(), adaptive_oracle(&x, oh, ow).as_slice());
    }
}

#[test]
fn roi_pool_bit_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..300 {
        let (h, w) = (rng.gen_range(2..17), rng.gen_range(2..17));
        let x = random_tensor(&[3, h, w], &mut rng);
        let x1 = rng.gen_range(0.0..(4 * w) as f64);
        let y1 = rng.gen_range(0.0..(4 * h) as f64);
        let roi = BBox::new(x1, y1, x1 + rng.gen_range(0.5..40.0), y1 + rng.gen_range(0.5..40.0));
        let s = rng.gen_range(1..6);
        let y = roi_pool_tensor(&x, &roi, 0.25, s).unwrap();
        assert_eq!(y.data(), roi_oracle(&x, &roi, 0.25, s).as_slice());
    }
}

#[test]
fn average_precision_matches_enumeration() {
    let gt_box = |j: usize| BBox::new(20.0 * j as f64, 0.0, 20.0 * j as f64 + 10.0, 10.0);
    let miss = BBox::new(200.0, 200.0, 210.0, 210.0);
    let mut configs = 0;
    for n_gt in 1..=4usize {
        for n_det in 0..=4usize {
            // each detection targets one ground truth or nothing
            let choices = (n_gt + 1).pow(n_det as u32);
            for code in 0..choices {
                let mut rest = code;
                let mut targets = Vec::new();
                for _ in 0..n_det {
                    targets.push(rest % (n_gt + 1));
                    rest /= n_gt + 1;
                }
                let dets: Vec<Detection> = targets
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| Detection {
                        image: 0,
                        bbox: if t == 0 { miss } else { gt_box(t - 1) },
                        class: 1,
                        score: 1.0 - k as f64 / 10.0,
                    })
                    .collect();
                let gts = vec![(0..n_gt).map(|j| (gt_box(j), 1)).collect::<Vec<_>>()];
                let mut claimed = vec![false; n_gt + 1];
                let hits: Vec<bool> = targets
                    .iter()
                    .map(|&t| t > 0 && !std::mem::replace(&mut claimed[t], true))
                    .collect();
                let ap = average_precision(&dets, &gts, 1, 0.5, ApMethod::AllPoint).unwrap();
                assert!((ap - ap_oracle(&hits, n_gt)).abs() <= 1e-12, "targets {:?}", targets);
                configs += 1;
            }
        }
    }
    assert!(configs > 1000);
}

#[test]
fn attention_weights_are_convex_over_slices() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let dims = GlobalContextDims { grid: 4, embed: 6, hidden: 5, fc: 4 };
    let mut checked = 0;
    for _ in 0..10 {
        let mut store = ParamStore::new();
        let module = GlobalContext::new(&mut store, dims, Init::Gaussian(1.0), &mut rng);
        let mut g = Graph::new();
        let slices_t = random_tensor(&[16, 6], &mut rng);
        let slices = g.input(slices_t.clone());
        let z = g.input(random_tensor(&[100, 6], &mut rng));
        let run = module.run(&mut g, &store, slices, z, 3).unwrap();
        for trace in run.traces(&g) {
            for (alpha, x) in trace.alphas.iter().zip(&trace.contexts) {
                assert!(alpha.iter().all(|&a| a >= 0.0));
                assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                for ch in 0..6 {
                    let column = (0..16).map(|i| slices_t.data()[i * 6 + ch]);
                    let lo = column.clone().fold(f64::INFINITY, f64::min);
                    let hi = column.fold(f64::NEG_INFINITY, f64::max);
                    assert!(x[ch] >= lo - 1e-12 && x[ch] <= hi + 1e-12);
                }
            }
            checked += 1;
        }
    }
    assert_eq!(checked, 1000);
}
