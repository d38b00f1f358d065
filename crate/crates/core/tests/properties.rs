use demenscan::data::{ClassLabel, SampleLoader};
use demenscan::model::layers::{relu_backward, ReluRule};
use demenscan::model::network::{forward, Mode};
use demenscan::rng::Distribution;
use demenscan::synthetic::{constant_intensity_corpus, phantom_corpus};
use demenscan::train::{evaluate, train, TrainConfig};
use demenscan::{xai, ModelSpec, Parameters, SeededRng, Tensor};
use proptest::prelude::*;

fn small_spec() -> ModelSpec {
    ModelSpec::with_filters(16, &[4, 4, 8, 4])
}

fn input(seed: u64, spec: &ModelSpec) -> Tensor {
    SeededRng::new(seed)
        .fill(Distribution::Uniform { lo: 0.0, hi: 1.0 }, &spec.input_dims())
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn guided_relu_only_zeroes_entries(
        pairs in proptest::collection::vec((-2.0f32..2.0, -2.0f32..2.0), 1..64),
    ) {
        let (act, up): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
        let activation = Tensor::from_vec(act).relu();
        let upstream = Tensor::from_vec(up);
        let guided = relu_backward(&activation, &upstream, ReluRule::Guided).unwrap();
        let vanilla = relu_backward(&activation, &upstream, ReluRule::Vanilla).unwrap();
        for (g, v) in guided.data().iter().zip(vanilla.data()) {
            prop_assert!(*g >= 0.0 && *g <= v.abs());
            prop_assert!(*g == 0.0 || g == v);
        }
    }

    #[test]
    fn saliency_is_nonnegative(param_seed in 0u64..1000, x_seed in any::<u64>(), class in 0usize..4) {
        let spec = small_spec();
        let params = Parameters::seeded(&spec, param_seed).unwrap();
        let map = xai::guided_backprop(&spec, &params, &input(x_seed, &spec), class).unwrap();
        prop_assert_eq!(map.values.len(), 16 * 16);
        prop_assert!(map.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn feature_maps_are_trace_slices(param_seed in 0u64..1000, x_seed in any::<u64>(), layer in 1usize..=4) {
        let spec = small_spec();
        let params = Parameters::seeded(&spec, param_seed).unwrap();
        let x = input(x_seed, &spec);
        let trace = forward(&spec, &params, &x, Mode::Eval).unwrap();
        let set = xai::feature_maps(&spec, &params, &x, layer, 4).unwrap();
        let activation = &trace.blocks[layer - 1].activation;
        let [_, h, w] = spec.block_activation_dims(layer - 1);
        for m in &set.maps {
            let slice = &activation.data()[m.filter * h * w..(m.filter + 1) * h * w];
            prop_assert!(m.values.iter().zip(slice).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn tensor_ops_leave_inputs_unmodified(a in proptest::collection::vec(-3.0f32..3.0, 12), b in proptest::collection::vec(-3.0f32..3.0, 12)) {
        let ta = Tensor::new(&[3, 4], a.clone()).unwrap();
        let tb = Tensor::new(&[3, 4], b.clone()).unwrap();
        let _ = (ta.add(&tb), ta.sub(&tb), ta.mul(&tb), ta.relu(), ta.scale(2.0));
        let _ = ta.matmul(&tb.clone().reshape(&[4, 3]).unwrap());
        prop_assert_eq!(ta.data(), &a[..]);
        prop_assert_eq!(tb.data(), &b[..]);
    }
}

#[test]
fn confusion_trace_matches_independent_accuracy() {
    let spec = ModelSpec::with_filters(16, &[4, 4, 4, 4]);
    let (index, loader) = phantom_corpus(6, 16, 2);
    for seed in 0..4 {
        let params = Parameters::seeded(&spec, seed).unwrap();
        let report = evaluate(&spec, &params, &index, &loader).unwrap();
        let mut correct = 0;
        for s in index.samples() {
            let logits = forward(&spec, &params, &loader.load(s).unwrap(), Mode::Eval).unwrap().logits;
            let best = (0..4).fold(0, |b, i| if logits.data()[i] > logits.data()[b] { i } else { b });
            correct += (best == s.label.index()) as usize;
        }
        let independent = correct as f64 / index.len() as f64;
        let c = &report.confusion;
        assert_eq!(c.trace() as f64 / c.total() as f64, independent);
        assert_eq!(report.accuracy, independent);
        assert_eq!(c.row_sums(), [6, 6, 6, 6]);
    }
}

#[test]
fn training_is_bit_reproducible() {
    let (index, loader) = phantom_corpus(4, 16, 9);
    let config = TrainConfig {
        epochs: 2,
        batch_size: 5,
        seed: 17,
        spec: small_spec(),
        ..TrainConfig::default()
    };
    let (p1, m1) = train(&config, &index, &index, &loader).unwrap();
    let (p2, m2) = train(&config, &index, &index, &loader).unwrap();
    assert_eq!(m1.to_jsonl(), m2.to_jsonl());
    for (a, b) in p1.tensors().zip(p2.tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

/// The loss is not strictly monotone under dropout and mini-batch noise, but
/// it falls well below its early value and the corpus is fit exactly.
#[test]
fn separable_corpus_is_fit() {
    let (index, loader) = constant_intensity_corpus(
        &[(ClassLabel::NonDemented, 0.2), (ClassLabel::VeryMildDemented, 0.8)],
        32,
        16,
    );
    for seed in 0..3 {
        let config = TrainConfig {
            seed,
            batch_size: 8,
            spec: small_spec(),
            ..TrainConfig::default()
        };
        let (_, metrics) = train(&config, &index, &index, &loader).unwrap();
        let e = &metrics.epochs;
        assert_eq!(e.len(), 20);
        assert!(e.iter().all(|m| (0.0..=1.0).contains(&m.train_acc) && m.train_loss >= 0.0));
        assert_eq!(e[19].train_acc, 1.0);
        assert!(e[19].train_loss < e[1].train_loss / 10.0, "seed {seed}");
    }
}
