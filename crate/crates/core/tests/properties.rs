use progdistill::audio::{bandpass, mfcc, MfccConfig, Waveform};
use progdistill::checkpoint::Checkpoint;
use progdistill::dataset::{hash_split, LabeledDataset, LabeledSample};
use progdistill::distillation::{
    argmax, build_distilled_dataset, crop, crop_rng, distill_labels, pad, pad_offset, random_crop, CropSpec,
    DistillOptions, DistilledLabel, LabelMode,
};
use progdistill::evaluation::eval_offsets;
use progdistill::kv::KvMap;
use progdistill::model::{Network, NetworkSpec};
use progdistill::tensor::{sgd_step, Graph, OptimizerState, SgdConfig, Target, Tensor};
use proptest::prelude::*;

fn wave(samples: Vec<f32>) -> Waveform {
    Waveform::new(samples, 4000)
}

/// A source length and a crop length no longer than it.
fn lengths() -> impl Strategy<Value = (usize, usize)> {
    (1usize..400).prop_flat_map(|src| (Just(src), 1..=src))
}

fn crop_case() -> impl Strategy<Value = (Vec<f32>, usize, usize)> {
    lengths().prop_flat_map(|(src, tgt)| (prop::collection::vec(-1.0f32..1.0, src), Just(tgt), 0..=src - tgt))
}

fn tiny_teacher() -> Network {
    let spec = NetworkSpec {
        n_channels: 4,
        n_res_blocks: 1,
        ..NetworkSpec::desk(300)
    };
    Network::build(spec, 17).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn crop_takes_a_contiguous_window((x, tgt, off) in crop_case()) {
        let src = x.len();
        let c = crop(&wave(x.clone()), &CropSpec::new(src, tgt, off).unwrap()).unwrap();
        prop_assert_eq!(c.len(), tgt);
        prop_assert_eq!(&c.samples[..], &x[off..off + tgt]);
    }

    #[test]
    fn crop_spec_rejects_out_of_range((src, tgt) in lengths(), extra in 1usize..50) {
        prop_assert!(CropSpec::new(src, tgt, src - tgt + extra).is_err());
        prop_assert!(CropSpec::new(tgt - 1, tgt, 0).is_err());
    }

    #[test]
    fn pad_keeps_exactly_the_crop((x, tgt, off) in crop_case()) {
        let src = x.len();
        let c = crop(&wave(x), &CropSpec::new(src, tgt, off).unwrap()).unwrap();
        let p = pad(&c, src).unwrap();
        let left = pad_offset(tgt, src);
        prop_assert_eq!(p.len(), src);
        prop_assert_eq!(&p.samples[left..left + tgt], &c.samples[..]);
        prop_assert!(p.samples[..left].iter().chain(&p.samples[left + tgt..]).all(|v| *v == 0.0));
        // Cropping the padded clip at the recovered offset gives the crop back.
        let back = crop(&p, &CropSpec::new(src, tgt, left).unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn pad_is_centred(len in 0usize..50, extra in 0usize..50) {
        let left = pad_offset(len, len + extra);
        prop_assert_eq!(left, extra / 2);
        let right = extra - left;
        prop_assert!(right == left || right == left + 1);
    }

    #[test]
    fn full_length_crop_and_pad_are_identities(x in prop::collection::vec(-1.0f32..1.0, 1..300)) {
        let w = wave(x);
        prop_assert_eq!(crop(&w, &CropSpec::new(w.len(), w.len(), 0).unwrap()).unwrap(), w.clone());
        prop_assert_eq!(pad(&w, w.len()).unwrap(), w);
    }

    #[test]
    fn seeded_crops_are_reproducible(
        (src, tgt) in lengths(),
        seed in any::<u64>(),
        epoch in 0u64..20,
        source in 0usize..1000,
        idx in 0usize..5,
    ) {
        let w = wave((0..src).map(|i| i as f32).collect());
        let (a, oa) = random_crop(&w, tgt, &mut crop_rng(seed, epoch, source, idx)).unwrap();
        let (b, ob) = random_crop(&w, tgt, &mut crop_rng(seed, epoch, source, idx)).unwrap();
        prop_assert_eq!(oa, ob);
        prop_assert_eq!(a, b);
        prop_assert!(oa <= src - tgt);
        if tgt == src {
            prop_assert_eq!(oa, 0);
        }
    }

    #[test]
    fn eval_offsets_follow_the_formula((src, tgt) in (0usize..100_000).prop_flat_map(|s| (Just(s), 0..=s))) {
        let o = eval_offsets(src, tgt).unwrap();
        let span = (src - tgt) as f64;
        for (k, &v) in [0.5, 1.5, 2.5].iter().zip(&o) {
            prop_assert_eq!(v, (k / 3.0 * span).floor() as usize);
        }
        prop_assert!(o[0] <= o[1] && o[1] <= o[2] && o[2] <= src - tgt);
        prop_assert_eq!(eval_offsets(src, tgt).unwrap(), o);
        if src > 0 {
            prop_assert!(eval_offsets(src - 1, src).is_err());
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..4, z in prop::collection::vec(-30.0f64..30.0, 1..13)) {
        let k = z.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| z.iter().map(move |v| v + r as f64)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, k], data).unwrap());
        let p = g.softmax(x).unwrap();
        for r in 0..rows {
            let row = g.value(p).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|v| *v > 0.0 && *v <= 1.0));
            // Shifting every logit leaves the row unchanged.
            prop_assert!(row.iter().zip(g.value(p).row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(z in prop::collection::vec(-5.0f64..5.0, 2..13), pick in any::<prop::sample::Index>()) {
        let k = z.len();
        let c = pick.index(k);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, k], z).unwrap());
        let p = g.softmax(x).unwrap();
        let loss = g.cross_entropy(p, Target::Classes(vec![c])).unwrap();
        prop_assert!(g.value(loss).data()[0] > 0.0);
        let mut onehot = vec![0.0; k];
        onehot[c] = 1.0;
        let q = g.constant(Tensor::new(vec![1, k], onehot).unwrap());
        let zero = g.cross_entropy(q, Target::Classes(vec![c])).unwrap();
        prop_assert_eq!(g.value(zero).data()[0], 0.0);
    }

    #[test]
    fn sgd_with_zero_gradient_is_identity(p in prop::collection::vec(-10.0f64..10.0, 1..20), lr in 1e-4f64..1.0) {
        let mut t = Tensor::new(vec![p.len()], p.clone()).unwrap();
        let zero = Tensor::zeros(&[p.len()]);
        let cfg = SgdConfig { momentum: 0.9, weight_decay: 0.0 };
        let mut s = OptimizerState::new(cfg, &[&t], lr);
        for _ in 0..3 {
            sgd_step(&mut [&mut t], &[&zero], &mut s).unwrap();
        }
        prop_assert_eq!(t.data(), &p[..]);
    }

    #[test]
    fn bandpass_is_linear(x in prop::collection::vec(-0.5f32..0.5, 50..400), a in -4.0f32..4.0) {
        let w = Waveform::new(x.clone(), 16_000);
        let scaled = Waveform::new(x.iter().map(|v| a * v).collect(), 16_000);
        let y = bandpass(&w, 20.0, 4000.0).unwrap();
        let ys = bandpass(&scaled, 20.0, 4000.0).unwrap();
        let peak = y.samples.iter().fold(0.0f32, |m, v| m.max((a * v).abs())).max(1e-6);
        for (p, q) in y.samples.iter().zip(&ys.samples) {
            prop_assert!(((a * p - q) / peak).abs() < 1e-5, "{} vs {}", a * p, q);
        }
    }

    #[test]
    fn hash_split_is_a_function_of_the_name(name in "[a-z0-9]{4,12}", n in 0u32..5) {
        let file = format!("{name}_nohash_{n}.wav");
        prop_assert_eq!(hash_split(&file, 10.0, 10.0), hash_split(&file, 10.0, 10.0));
        // Every recording of one speaker lands in the same split.
        prop_assert_eq!(hash_split(&file, 10.0, 10.0), hash_split(&format!("{name}_nohash_9.wav"), 10.0, 10.0));
    }

    #[test]
    fn kv_roundtrip(entries in prop::collection::btree_map("[a-z][a-z_.]{0,10}", "[ -~&&[^=\n#]]{0,20}", 0..10)) {
        let mut kv = KvMap::new();
        for (k, v) in &entries {
            kv.set(k, v.trim());
        }
        let back = KvMap::parse(&kv.to_text()).unwrap();
        prop_assert_eq!(back, kv);
    }

    #[test]
    fn checkpoint_roundtrip(
        tensors in prop::collection::vec(
            (prop::collection::vec(1usize..5, 0..4), any::<u64>()),
            0..5,
        ),
    ) {
        let mut ck = Checkpoint::default();
        ck.header.set("note", "x");
        for (i, (shape, seed)) in tensors.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|j| f32::from_bits((seed.wrapping_add(j as u64) as u32) & 0x7f7f_ffff)).collect();
            ck.tensors.push((format!("t{i}"), Tensor::new(shape.clone(), data).unwrap()));
        }
        ck.optimizer.push(("v".into(), Tensor::full(&[2], 0.5)));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back, ck);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mfcc_frames_are_local(len in 480usize..4000, extra in 0usize..2000, seed in any::<u64>()) {
        let cfg = MfccConfig::standard();
        let mut r = progdistill::rng::seeded(seed);
        use rand::Rng;
        let full: Vec<f32> = (0..len + extra).map(|_| r.gen_range(-0.5..0.5)).collect();
        let prefix = mfcc(&Waveform::new(full[..len].to_vec(), 16_000), &cfg).unwrap();
        let whole = mfcc(&Waveform::new(full.clone(), 16_000), &cfg).unwrap();
        prop_assert_eq!(prefix.frames, (len - 480) / 160 + 1);
        prop_assert_eq!(prefix.coeffs, 40);
        for f in 0..prefix.frames {
            prop_assert_eq!(prefix.frame(f), whole.frame(f));
        }
        // Shape depends on length alone.
        let other = mfcc(&Waveform::new(vec![0.1; len], 16_000), &cfg).unwrap();
        prop_assert_eq!((other.frames, other.coeffs), (prefix.frames, prefix.coeffs));
    }

    #[test]
    fn distilled_labels_are_valid(seed in any::<u64>(), n in 1usize..6) {
        let teacher = tiny_teacher();
        let tgt = teacher.front.samples(150).unwrap();
        let mut r = progdistill::rng::seeded(seed);
        use rand::Rng;
        let crops: Vec<Waveform> = (0..n)
            .map(|_| wave((0..tgt).map(|_| r.gen_range(-0.3..0.3)).collect()))
            .collect();
        let soft = distill_labels(&teacher, &crops, LabelMode::Soft).unwrap();
        let hard = distill_labels(&teacher, &crops, LabelMode::Hard).unwrap();
        for (s, h) in soft.iter().zip(&hard) {
            let DistilledLabel::Soft(p) = s else { panic!("soft mode gave {s:?}") };
            prop_assert_eq!(p.len(), 6);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.iter().map(|v| *v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert_eq!(h, &DistilledLabel::Hard(argmax(p)));
        }
    }

    #[test]
    fn distilled_datasets_depend_on_content_and_seed(seed in any::<u64>(), crops_per_source in 1usize..4) {
        let teacher = tiny_teacher();
        let src = teacher.input_samples();
        let mut r = progdistill::rng::seeded(seed);
        use rand::Rng;
        let clip: Vec<f32> = (0..src).map(|_| r.gen_range(-0.3..0.3)).collect();
        let mut ds = LabeledDataset::new(teacher.label_names.clone());
        // Two sources with identical audio and different ground truth.
        for (i, label) in [(0, 2), (1, 5)] {
            ds.samples.push(LabeledSample { id: format!("s{i}"), wave: wave(clip.clone()), label });
        }
        let ds = ds.prepared(&teacher.front).unwrap();
        let opts = |mode| DistillOptions { tgt_ms: 150, crops_per_source, mode, seed, epoch: 1 };
        let soft = build_distilled_dataset(&teacher, &ds, &opts(LabelMode::Soft)).unwrap();
        let again = build_distilled_dataset(&teacher, &ds, &opts(LabelMode::Soft)).unwrap();
        let hard = build_distilled_dataset(&teacher, &ds, &opts(LabelMode::Hard)).unwrap();
        prop_assert_eq!(&soft, &again);
        prop_assert_eq!(soft.samples.len(), 2 * crops_per_source);
        for (s, h) in soft.samples.iter().zip(&hard.samples) {
            prop_assert_eq!(s.offset, h.offset);
            prop_assert_eq!(&s.features, &h.features);
            prop_assert_eq!(h.label.clone(), DistilledLabel::Hard(s.label.class()));
            prop_assert_eq!(s.features.frames, 13);
        }
        // Equal crops from different sources get equal labels.
        for a in &soft.samples {
            for b in &soft.samples {
                if a.features == b.features {
                    prop_assert_eq!(&a.label, &b.label);
                }
            }
        }
    }
}

#[test]
fn pad_example() {
    let p = pad(&wave(vec![1.0, 2.0]), 4).unwrap();
    assert_eq!(p.samples, vec![0.0, 1.0, 2.0, 0.0]);
    assert!(pad(&wave(vec![1.0; 5]), 4).is_err());
}

#[test]
fn crop_example() {
    let w = wave((0..10).map(|i| i as f32).collect());
    let c = crop(&w, &CropSpec::new(10, 4, 3).unwrap()).unwrap();
    assert_eq!(c.samples, vec![3.0, 4.0, 5.0, 6.0]);
    let suffix = crop(&w, &CropSpec::new(10, 4, 6).unwrap()).unwrap();
    assert_eq!(suffix.samples, vec![6.0, 7.0, 8.0, 9.0]);
    assert!(crop(&w, &CropSpec::new(9, 4, 0).unwrap()).is_err());
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
    assert_eq!(argmax(&[0.4, 0.2, 0.4]), 0);
}

#[test]
fn random_offsets_are_uniform() {
    let w = wave(vec![0.0; 16_000]);
    let n = 100_000;
    let mean = (0..n)
        .map(|i| random_crop(&w, 8000, &mut crop_rng(3, 0, i, 0)).unwrap().1 as f64)
        .sum::<f64>()
        / n as f64;
    assert!((mean - 4000.0).abs() < 100.0, "mean offset {mean}");
}
