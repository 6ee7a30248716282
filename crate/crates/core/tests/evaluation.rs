use progdistill::audio::FrontEnd;
use progdistill::dataset::LabeledDataset;
use progdistill::distillation::{argmax, crop, CropSpec};
use progdistill::evaluation::{eval_offsets, evaluate, three_crop_predict, EvalOptions};
use progdistill::model::{Network, NetworkSpec};
use progdistill::synth::{generate, SynthSpec};

fn tiny(ms: u32, seed: u64) -> Network {
    let spec = NetworkSpec {
        n_channels: 4,
        n_res_blocks: 1,
        ..NetworkSpec::desk(ms)
    };
    Network::build(spec, seed).unwrap()
}

fn test_set(per_class: usize) -> LabeledDataset {
    let spec = SynthSpec {
        n_train: 1,
        n_test: per_class,
        ..SynthSpec::default()
    };
    generate(&spec).unwrap().splits.test.prepared(&FrontEnd::desk()).unwrap()
}

#[test]
fn offset_examples() {
    assert_eq!(eval_offsets(16_000, 8000).unwrap(), [1333, 4000, 6666]);
    assert_eq!(eval_offsets(103, 100).unwrap(), [0, 1, 2]);
    assert_eq!(eval_offsets(8000, 8000).unwrap(), [0, 0, 0]);
    assert!(eval_offsets(10, 11).is_err());
}

#[test]
fn three_crop_predict_is_the_mean_of_three_forwards() {
    let net = tiny(500, 1);
    let ds = test_set(2);
    for s in &ds.samples {
        let got = three_crop_predict(&net, &s.wave).unwrap();
        let offsets = eval_offsets(s.wave.len(), net.input_samples()).unwrap();
        let crops: Vec<_> = offsets
            .iter()
            .map(|&o| crop(&s.wave, &CropSpec::new(s.wave.len(), net.input_samples(), o).unwrap()).unwrap())
            .collect();
        let p: Vec<Vec<f32>> = crops
            .iter()
            .map(|c| {
                let f = net.featurize(c).unwrap();
                net.predict_features(&[&f]).unwrap().row(0).to_vec()
            })
            .collect();
        let manual: Vec<f32> = (0..6).map(|c| (p[0][c] + p[1][c] + p[2][c]) / 3.0).collect();
        assert_eq!(got, manual);
        assert!((got.iter().map(|v| *v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn full_length_network_uses_one_view() {
    let net = tiny(1000, 2);
    let ds = test_set(3);
    let report = evaluate(&net, &ds, &EvalOptions::default()).unwrap();
    assert_eq!(report.offsets_used, vec![0, 0, 0]);
    let mut correct = 0;
    for s in &ds.samples {
        let single = net.predict_waves(std::slice::from_ref(&s.wave)).unwrap().remove(0);
        // (p + p + p) / 3 can differ from p in the last f32 bit.
        let mean = three_crop_predict(&net, &s.wave).unwrap();
        assert!(mean.iter().zip(&single).all(|(a, b)| (a - b).abs() <= 1e-7));
        correct += usize::from(argmax(&single) == s.label);
    }
    assert_eq!(report.accuracy, correct as f64 / ds.len() as f64);
}

#[test]
fn uniform_network_scores_chance() {
    let mut net = tiny(500, 3);
    for (name, t) in &mut net.params {
        if name.starts_with("head") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let ds = test_set(30);
    let r = evaluate(&net, &ds, &EvalOptions::default()).unwrap();
    let n = ds.len() as f64;
    assert!((r.accuracy - 1.0 / 6.0).abs() <= 2.0 / n.sqrt());
    assert_eq!(r.confusion.iter().map(|row| row.iter().sum::<usize>()).sum::<usize>(), ds.len());
}

#[test]
fn reports_are_deterministic_and_order_free() {
    let net = tiny(700, 4);
    let ds = test_set(4);
    let a = evaluate(&net, &ds, &EvalOptions::default()).unwrap();
    assert_eq!(a, evaluate(&net, &ds, &EvalOptions::default()).unwrap());
    let mut rev = ds.clone();
    rev.samples.reverse();
    let b = evaluate(&net, &rev, &EvalOptions::default()).unwrap();
    assert_eq!((a.accuracy, &a.confusion), (b.accuracy, &b.confusion));
    let random = EvalOptions { random_offsets: Some(7) };
    assert_eq!(evaluate(&net, &ds, &random).unwrap(), evaluate(&net, &ds, &random).unwrap());
    assert_eq!(a.per_class_accuracy.len(), 6);
    assert!(a.table().contains("accuracy"));
}

#[test]
fn evaluation_errors() {
    let net = tiny(500, 5);
    assert!(evaluate(&net, &LabeledDataset::new(net.label_names.clone()), &EvalOptions::default()).is_err());
    let mut short = test_set(1);
    short.samples[0].wave.samples.truncate(100);
    assert!(evaluate(&net, &short, &EvalOptions::default()).is_err());
    assert!(three_crop_predict(&net, &short.samples[0].wave).is_err());
}
