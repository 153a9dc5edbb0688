use matnet::grid::Mask;
use matnet::loss::*;
use matnet::tensor::{grad_check, Tape, Tensor};
use proptest::prelude::*;
use std::f64::consts::LN_2;

fn plane(h: usize, w: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![h, w], data).unwrap()
}

fn pred_var(tape: &mut Tape, h: usize, w: usize, data: Vec<f64>) -> matnet::tensor::Var {
    tape.param(Tensor::new(vec![1, 1, h, w], data).unwrap())
}

/// Plain per-pixel weighted BCE, written out independently.
fn bce_oracle(m: &[f64], g: &[f64], w: &[f64]) -> f64 {
    let n = m.len() as f64;
    m.iter()
        .zip(g)
        .zip(w)
        .map(|((&m, &g), &w)| {
            let m = m.clamp(CLIP_EPS, 1.0 - CLIP_EPS);
            -w * (g * m.ln() + (1.0 - g) * (1.0 - m).ln())
        })
        .sum::<f64>()
        / n
}

fn loss_value(m: &[f64], g: &[f64], w: &[f64], h: usize, wd: usize) -> f64 {
    let mut tape = Tape::new();
    let p = pred_var(&mut tape, h, wd, m.to_vec());
    let weights = HemWeightMap {
        weights: plane(h, wd, w.to_vec()),
    };
    let l = boundary_loss(&mut tape, p, &plane(h, wd, g.to_vec()), &weights).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn hem_weight_cases() {
    // Object is the left 4 columns of a 1x40 strip; radius 5 covers columns 0..=8.
    let mask = Mask::from_fn(1, 40, |_, x| x < 4);
    let mut e = vec![0.0; 40];
    e[30] = 0.5;
    e[35] = 0.15;
    e[6] = 0.9;
    e[20] = 0.2;
    let w = hem_weights(&plane(1, 40, e), &mask, 5).unwrap();
    let d = w.weights.data();
    assert_eq!(d[30], 1.5);
    assert_eq!(d[35], 1.0);
    assert_eq!(d[6], 1.0);
    // The threshold is strict.
    assert_eq!(d[20], 1.0);
    assert!(d.iter().enumerate().all(|(i, &v)| i == 30 || v == 1.0));
}

#[test]
fn hem_rejects_shape_mismatch() {
    assert!(hem_weights(&Tensor::zeros([2, 3]), &Mask::empty(3, 2), 1).is_err());
}

#[test]
#[allow(clippy::approx_constant)]
fn boundary_loss_examples() {
    assert!((loss_value(&[0.5], &[1.0], &[1.0], 1, 1) - 0.6931).abs() < 1e-4);
    assert!((loss_value(&[0.5], &[1.0], &[2.0], 1, 1) - 1.3863).abs() < 1e-4);
    assert!((loss_value(&[0.5], &[0.0], &[1.0], 1, 1) - LN_2).abs() < 1e-12);
}

#[test]
fn perfect_prediction_is_bounded_by_clip() {
    let (h, w) = (5, 7);
    let g: Vec<f64> = (0..h * w).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let l = loss_value(&g, &g, &vec![1.0; h * w], h, w);
    assert!(l <= 2.0 * CLIP_EPS * (h * w) as f64, "{l}");
    assert!(l >= 0.0);
}

#[test]
fn loss_stays_finite_at_saturated_wrong_predictions() {
    let l = loss_value(&[0.0, 1.0], &[1.0, 0.0], &[1.0, 1.0], 1, 2);
    assert!(l.is_finite());
    assert!((l + CLIP_EPS.ln()).abs() < 1e-6);
}

fn half_targets(h: usize, w: usize) -> Vec<BoundaryTarget> {
    let g = plane(h, w, (0..h * w).map(|i| (i % 2) as f64).collect());
    vec![
        BoundaryTarget {
            boundary: g,
            weights: HemWeightMap::uniform(h, w),
        };
        4
    ]
}

#[test]
fn total_of_constant_half_is_two_ln2() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::full([1, 1, 4, 4], 0.5));
    let g = plane(4, 4, (0..16).map(|i| ((i / 3) % 2) as f64).collect());
    let parts = total_loss(&mut tape, p, &g, &[p; 4], &half_targets(4, 4)).unwrap();
    assert!((tape.value(parts.total).data()[0] - 2.0 * LN_2).abs() < 1e-12);
    assert!((tape.value(parts.ce).data()[0] - LN_2).abs() < 1e-12);
    assert!((tape.value(parts.boundary).data()[0] - LN_2).abs() < 1e-12);
}

#[test]
fn total_rejects_wrong_map_count() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::full([1, 1, 2, 2], 0.5));
    let g = plane(2, 2, vec![0.0; 4]);
    let t = half_targets(2, 2);
    assert!(total_loss(&mut tape, p, &g, &[p; 5], &[t.clone(), t[..1].to_vec()].concat()).is_err());
    assert!(total_loss(&mut tape, p, &g, &[p; 4], &t[..3]).is_err());
}

#[test]
fn doubling_weights_doubles_only_the_boundary_term() {
    let run = |scale: f64| {
        let mut tape = Tape::new();
        let mask = tape.param(Tensor::new(vec![1, 1, 2, 2], vec![0.2, 0.7, 0.4, 0.9]).unwrap());
        let bnd = tape.param(Tensor::new(vec![1, 1, 2, 2], vec![0.3, 0.6, 0.1, 0.8]).unwrap());
        let g = plane(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let w = plane(2, 2, vec![1.0, 1.5, 1.0, 1.25]).map(|v| v * scale);
        let t = BoundaryTarget {
            boundary: g.clone(),
            weights: HemWeightMap { weights: w },
        };
        let parts = total_loss(&mut tape, mask, &g, &[bnd; 4], &vec![t; 4]).unwrap();
        (tape.value(parts.ce).data()[0], tape.value(parts.boundary).data()[0])
    };
    let (ce1, b1) = run(1.0);
    let (ce2, b2) = run(2.0);
    assert_eq!(ce1, ce2);
    assert!((b2 - 2.0 * b1).abs() < 1e-12);
}

#[test]
fn downsampled_targets_match_stage_sizes() {
    let mask = Mask::from_fn(16, 16, |y, x| (4..12).contains(&y) && (4..12).contains(&x));
    let bnd = matnet::synthdata::boundary_gt(&mask);
    let hem = HemWeightMap::uniform(16, 16);
    let ts = stage_targets(&bnd, &hem, &[2, 4, 8, 8], BoundarySupervision::DownsampleTargets).unwrap();
    let sizes: Vec<_> = ts.iter().map(|t| t.boundary.shape().to_vec()).collect();
    assert_eq!(sizes, [vec![8, 8], vec![4, 4], vec![2, 2], vec![2, 2]]);
    assert!(ts.iter().all(|t| t.boundary.data().contains(&1.0)));
    let up = stage_targets(&bnd, &hem, &[2, 4, 8, 8], BoundarySupervision::UpsamplePredictions).unwrap();
    assert!(up.iter().all(|t| t.boundary.shape() == [16, 16]));
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let g = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
    let w = vec![1.0, 1.3, 1.0, 1.9, 1.0, 1.0];
    let m = Tensor::new(vec![1, 1, 2, 3], vec![0.2, 0.35, 0.8, 0.6, 0.45, 0.1]).unwrap();
    let check = grad_check(
        |tape, vars| {
            let weights = HemWeightMap {
                weights: plane(2, 3, w.clone()),
            };
            boundary_loss(tape, vars[0], &plane(2, 3, g.clone()), &weights)
        },
        &[m],
        1e-6,
    )
    .unwrap();
    assert!(check.max_relative_error <= 1e-6, "{check:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unit_weights_equal_unweighted_bce(
        cells in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..40),
    ) {
        let m: Vec<f64> = cells.iter().map(|c| c.0).collect();
        let g: Vec<f64> = cells.iter().map(|c| f64::from(u8::from(c.1))).collect();
        let n = m.len();
        let l = loss_value(&m, &g, &vec![1.0; n], 1, n);
        let mut tape = Tape::new();
        let p = pred_var(&mut tape, 1, n, m.clone());
        let ce = mask_loss(&mut tape, p, &plane(1, n, g.clone())).unwrap();
        prop_assert!((l - bce_oracle(&m, &g, &vec![1.0; n])).abs() <= 1e-12);
        prop_assert_eq!(l, tape.value(ce).data()[0]);
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn weighted_loss_matches_oracle_and_is_nonnegative(
        cells in prop::collection::vec((0.0f64..=1.0, any::<bool>(), 1.0f64..2.0), 1..40),
    ) {
        let m: Vec<f64> = cells.iter().map(|c| c.0).collect();
        let g: Vec<f64> = cells.iter().map(|c| f64::from(u8::from(c.1))).collect();
        let w: Vec<f64> = cells.iter().map(|c| c.2).collect();
        let n = m.len();
        let l = loss_value(&m, &g, &w, 1, n);
        prop_assert!(l >= 0.0);
        prop_assert!((l - bce_oracle(&m, &g, &w)).abs() <= 1e-12 * l.max(1.0));
    }

    #[test]
    fn raising_a_weight_never_lowers_the_loss(
        cells in prop::collection::vec((0.0f64..=1.0, any::<bool>(), 1.0f64..2.0), 1..20),
        pick in any::<prop::sample::Index>(),
        bump in 0.0f64..1.0,
    ) {
        let m: Vec<f64> = cells.iter().map(|c| c.0).collect();
        let g: Vec<f64> = cells.iter().map(|c| f64::from(u8::from(c.1))).collect();
        let mut w: Vec<f64> = cells.iter().map(|c| c.2).collect();
        let n = m.len();
        let before = loss_value(&m, &g, &w, 1, n);
        w[pick.index(n)] += bump;
        prop_assert!(loss_value(&m, &g, &w, 1, n) >= before);
    }

    #[test]
    fn moving_away_from_target_raises_the_loss(
        m in 0.01f64..0.99,
        step in 0.001f64..0.5,
        positive in any::<bool>(),
    ) {
        let g = if positive { 1.0 } else { 0.0 };
        let farther = if positive { (m - step).max(0.0) } else { (m + step).min(1.0) };
        prop_assert!(loss_value(&[farther], &[g], &[1.0], 1, 1) > loss_value(&[m], &[g], &[1.0], 1, 1));
    }

    #[test]
    fn gradient_vanishes_at_the_target(
        cells in prop::collection::vec((0.05f64..0.95, 1.0f64..2.0), 1..20),
    ) {
        // For a soft target t the per-pixel loss is stationary at m = t.
        let t: Vec<f64> = cells.iter().map(|c| c.0).collect();
        let w: Vec<f64> = cells.iter().map(|c| c.1).collect();
        let n = t.len();
        let mut tape = Tape::new();
        let p = pred_var(&mut tape, 1, n, t.clone());
        let l = boundary_loss(&mut tape, p, &plane(1, n, t.clone()), &HemWeightMap { weights: plane(1, n, w) }).unwrap();
        tape.backward(l).unwrap();
        prop_assert!(tape.grad(p).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn saturated_correct_prediction_has_clip_scale_gradient(bits in prop::collection::vec(any::<bool>(), 1..20)) {
        let g: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
        let n = g.len();
        let m: Vec<f64> = g.iter().map(|&v| if v == 1.0 { 1.0 - 1e-3 } else { 1e-3 }).collect();
        let mut tape = Tape::new();
        let p = pred_var(&mut tape, 1, n, m);
        let l = boundary_loss(&mut tape, p, &plane(1, n, g), &HemWeightMap::uniform(1, n)).unwrap();
        tape.backward(l).unwrap();
        let gr = tape.grad(p).unwrap().max_abs();
        prop_assert!(gr <= 1.0 / ((1.0 - 1e-3) * n as f64) + 1e-12);
    }
}
