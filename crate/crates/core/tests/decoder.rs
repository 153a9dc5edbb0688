use matnet::decoder::*;
use matnet::encoder::BackboneConfig;
use matnet::model::{MatNet, ModelConfig};
use matnet::params::{Bound, Group, ParamStore};
use matnet::selfcheck;
use matnet::synthdata::{gen_sequence, ObjectSpec, SceneSpec};
use matnet::tensor::{grad_check, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn probe(tape: &mut Tape, y: Var, seed: u64) -> matnet::Result<Var> {
    let r = tape.constant(Tensor::uniform(tape.shape(y).to_vec(), -1.0, 1.0, &mut rng(seed)));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn bar(in_channels: usize, width: usize, seed: u64) -> (BarParams, ParamStore) {
    let mut store = ParamStore::new();
    let params = BarParams::new(&mut store, "bar", in_channels, width, &mut rng(seed));
    (params, store)
}

#[test]
fn zero_head_predicts_one_half() {
    let (params, mut store) = bar(4, 3, 1);
    for e in store.entries_mut() {
        e.tensor = Tensor::zeros(e.tensor.shape().to_vec());
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let f = tape.constant(Tensor::randn([1, 3, 5, 6], 1.0, &mut rng(2)));
    let m = boundary_head(&mut tape, &bound, &params, f).unwrap();
    assert_eq!(tape.shape(m), &[1, 1, 5, 6]);
    assert!(tape.value(m).data().iter().all(|&v| v == 0.5));
}

#[test]
fn boundary_head_gradients() {
    assert!(selfcheck::boundary_head_check(3).unwrap().passed());
}

#[test]
fn aspp_rates_agree_on_constant_input() {
    let (params, mut store) = bar(2, 3, 4);
    for conv in &params.aspp_branches[..3] {
        store.get_mut(conv.weight).data_mut().fill(1.0);
        store.get_mut(conv.bias).data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let z = tape.constant(Tensor::full([1, 2, 12, 12], 0.5));
    let branches = aspp_branches(&mut tape, &bound, &params, z).unwrap();
    let expected = 9.0 * 2.0 * 0.5;
    for (rate, &b) in ASPP_RATES.iter().zip(&branches) {
        assert_eq!(tape.shape(b), &[1, 3, 12, 12], "rate {rate}");
        let v = tape.value(b).data();
        for c in 0..3 {
            for y in 4..8 {
                for x in 4..8 {
                    assert_eq!(v[c * 144 + y * 12 + x], expected, "rate {rate}");
                }
            }
        }
    }
    let out = aspp(&mut tape, &bound, &params, z).unwrap();
    assert_eq!(&tape.shape(out)[2..], &[12, 12]);
}

#[test]
fn aspp_gradients() {
    let (params, store) = bar(4, 3, 5);
    let z = Tensor::randn([1, 4, 6, 6], 1.0, &mut rng(6));
    let values: Vec<Tensor> = store.entries().iter().map(|e| e.tensor.clone()).collect();
    let check = grad_check(
        |tape, vars| {
            let bound = Bound::new(vars.to_vec());
            let zv = tape.constant(z.clone());
            let y = aspp(tape, &bound, &params, zv)?;
            probe(tape, y, 7)
        },
        &values,
        1e-6,
    )
    .unwrap();
    assert!(check.max_relative_error <= 1e-6, "{check:?}");
}

#[test]
fn bar_rejects_spatial_mismatch() {
    let (params, store) = bar(4, 3, 8);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let z = tape.constant(Tensor::zeros([1, 4, 4, 4]));
    let f = tape.constant(Tensor::zeros([1, 3, 8, 8]));
    assert!(bar_forward(&mut tape, &bound, &params, z, f, 2).is_err());
}

#[test]
fn bar_upsamples_by_factor() {
    let (params, store) = bar(4, 3, 9);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let z = tape.constant(Tensor::randn([1, 4, 4, 4], 1.0, &mut rng(10)));
    let f = tape.constant(Tensor::randn([1, 3, 4, 4], 1.0, &mut rng(11)));
    let (next, m) = bar_forward(&mut tape, &bound, &params, z, f, 2).unwrap();
    assert_eq!(tape.shape(next), &[1, 3, 8, 8]);
    assert_eq!(tape.shape(m), &[1, 1, 4, 4]);
    let (same, _) = bar_forward(&mut tape, &bound, &params, z, f, 1).unwrap();
    assert_eq!(tape.shape(same), &[1, 3, 4, 4]);
}

#[test]
fn bar_factors_follow_strides() {
    let mut store = ParamStore::new();
    let dec = Decoder::new(&BackboneConfig::default(), 4, &mut store, &mut rng(12)).unwrap();
    // Index 0 is BAR_2; BAR_5 -> BAR_4 keeps resolution.
    assert_eq!(dec.bar_factors(), [1, 2, 2, 1]);
}

fn default_net_forward(h: usize) -> (Tape, matnet::model::Forward) {
    let net = MatNet::new(ModelConfig::default(), 13).unwrap();
    let mut r = rng(14);
    let frame = Tensor::uniform([3, h, h], 0.0, 1.0, &mut r);
    let flow = Tensor::uniform([3, h, h], 0.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let bound = net.bind_constant(&mut tape);
    let fwd = net.forward(&mut tape, &bound, &frame, &flow).unwrap();
    (tape, fwd)
}

#[test]
fn decode_shapes_at_64() {
    let (tape, fwd) = default_net_forward(64);
    let out = &fwd.decoder;
    assert_eq!(tape.shape(out.mask), &[1, 1, 64, 64]);
    assert_eq!(out.boundaries.len(), 4);
    let res: Vec<usize> = out.boundaries.iter().map(|&b| tape.shape(b)[2]).collect();
    assert_eq!(res, [32, 16, 8, 8]);
    // With strides [2,2,2,1] the finest stage sits at 1/2 of the input.
    assert_eq!(tape.shape(out.finest)[2], 32);
    for &v in std::iter::once(&out.mask).chain(&out.boundaries) {
        assert!(tape.value(v).data().iter().all(|x| (0.0..=1.0).contains(x)));
    }
}

fn micro_sample() -> matnet::synthdata::Sample {
    let spec = SceneSpec {
        height: 16,
        width: 16,
        num_frames: 1,
        object: ObjectSpec {
            size: 4.0,
            ..SceneSpec::default().object
        },
        hem_radius: 2,
        ..SceneSpec::default()
    };
    gen_sequence(&spec).unwrap().remove(0)
}

#[test]
fn every_group_and_kernel_receives_gradient() {
    let net = MatNet::new(ModelConfig::micro(), 15).unwrap();
    let sample = micro_sample();
    let mut tape = Tape::new();
    let bound = net.store.bind(&mut tape);
    let loss = net.sample_loss(&mut tape, &bound, &sample).unwrap();
    tape.backward(loss.total).unwrap();
    let grads = net.store.grads(&tape, &bound);
    for group in [Group::Encoder, Group::Bridge, Group::Decoder] {
        let reached = net
            .store
            .entries()
            .iter()
            .zip(&grads)
            .any(|(e, g)| e.group == group && g.max_abs() > 0.0);
        assert!(reached, "{group:?}");
    }
    for (e, g) in net.store.entries().iter().zip(&grads) {
        assert!(g.data().iter().all(|v| v.is_finite()), "{}", e.name);
        if e.name.starts_with("decoder.bar") && e.name.ends_with(".weight") {
            assert!(g.max_abs() > 0.0, "{} has no gradient", e.name);
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let net = MatNet::new(ModelConfig::micro(), 16).unwrap();
    let sample = micro_sample();
    let run = || {
        let p = net.predict(&sample.frame, &sample.flow_image()).unwrap();
        p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn outputs_stay_in_unit_interval_for_large_parameters() {
    let mut net = MatNet::new(ModelConfig::micro(), 17).unwrap();
    for e in net.store.entries_mut() {
        e.tensor = e.tensor.map(|v| 25.0 * v);
    }
    let sample = micro_sample();
    let mut tape = Tape::new();
    let bound = net.bind_constant(&mut tape);
    let fwd = net.forward(&mut tape, &bound, &sample.frame, &sample.flow_image()).unwrap();
    for &v in std::iter::once(&fwd.decoder.mask).chain(&fwd.decoder.boundaries) {
        assert!(tape.value(v).data().iter().all(|x| (0.0..=1.0).contains(x)));
    }
}
