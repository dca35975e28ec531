use crld::augment::{
    apply_op, sample_cutout_strength, sample_strength, strong_view, weak_view, AugKind, AugOpSpec, ImageU8,
    StrongPolicy,
};
use crld::data::{
    denormalize, encode_cifar_binary, normalize, parse_cifar_binary, BatchPlan, ChannelStats, CifarVariant, Dataset,
    Split,
};
use crld::distill::sls_mask;
use crld::harness::RunConfig;
use crld::nn::Checkpoint;
use crld::rng::{Lane, RngStream};
use crld::tensor::{kld_per_instance, softmax_t};
use crld::Tensor;
use proptest::prelude::*;

fn logits(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-8.0f32..8.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn image(max_side: usize) -> impl Strategy<Value = ImageU8> {
    (2..=max_side, 2..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<u8>(), h * w * 3).prop_map(move |px| ImageU8::new(h, w, px).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(z in logits(4, 7), t in 0.5f32..8.0) {
        let p = softmax_t(&z, t).unwrap();
        for r in 0..4 {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn kld_is_non_negative_and_zero_on_itself(s in logits(3, 5), t in logits(3, 5), temp in 0.5f32..8.0) {
        for v in kld_per_instance(&s, &t, temp).unwrap() {
            prop_assert!(v >= -1e-9);
        }
        for v in kld_per_instance(&s, &s, temp).unwrap() {
            prop_assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn kld_ignores_per_row_logit_shifts(s in logits(2, 6), t in logits(2, 6), shift in -5.0f32..5.0) {
        let shifted = Tensor::new(vec![2, 6], s.data().iter().map(|v| v + shift).collect()).unwrap();
        let a = kld_per_instance(&s, &t, 4.0).unwrap();
        let b = kld_per_instance(&shifted, &t, 4.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-5 * x.abs().max(1.0));
        }
    }

    #[test]
    fn mask_shrinks_as_tau_grows(z in logits(16, 5), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let p = softmax_t(&z, 1.0).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let m_lo = sls_mask(&p, lo).unwrap();
        let m_hi = sls_mask(&p, hi).unwrap();
        for (l, h) in m_lo.bits().iter().zip(m_hi.bits()) {
            prop_assert!(!h || *l);
        }
        prop_assert_eq!(sls_mask(&p, 0.0).unwrap().selected_count(), 16);
        prop_assert_eq!(sls_mask(&p, 1.0).unwrap().selected_count(), 0);
    }

    #[test]
    fn strength_is_affine_and_bounded(
        kind_i in 0usize..14,
        p in 0.0f64..=1.0,
        q in 0.0f64..=1.0,
        p_s in 0.001f64..=1.0,
    ) {
        let spec = AugOpSpec::default_for(AugKind::ALL[kind_i]);
        let v = sample_strength(&spec, p, p_s);
        prop_assert!(spec.contains(v));
        let expect = spec.v_min + (spec.v_max - spec.v_min) * p * p_s;
        prop_assert!((v - expect).abs() <= 1e-9);
        if p <= q {
            prop_assert!(v <= sample_strength(&spec, q, p_s) + 1e-12);
        }
        let c = sample_cutout_strength(p, p_s);
        prop_assert!((0.0..=0.5).contains(&c));
    }

    #[test]
    fn every_op_keeps_shape_and_is_deterministic(img in image(12), kind_i in 0usize..15, p in 0.0f64..=1.0, seed in any::<u64>()) {
        let kind = AugKind::ALL[kind_i];
        let v = if kind == AugKind::Cutout {
            sample_cutout_strength(p, 1.0)
        } else {
            sample_strength(&AugOpSpec::default_for(kind), p, 1.0)
        };
        let run = || apply_op(&img, kind, v, &mut RngStream::new(seed, Lane::StrongView, 0, 0)).unwrap();
        let a = run();
        prop_assert_eq!((a.height, a.width, a.pixels.len()), (img.height, img.width, img.pixels.len()));
        prop_assert_eq!(a, run());
    }

    #[test]
    fn views_keep_shape_and_repeat_under_the_same_stream(img in image(16), seed in any::<u64>(), n in 1usize..4, p_s in 0.05f64..=1.0) {
        let policy = StrongPolicy::new(n, p_s).unwrap();
        let stream = || RngStream::new(seed, Lane::StrongView, 3, 9);
        let w = weak_view(&img, &mut stream());
        prop_assert_eq!((w.height, w.width), (img.height, img.width));
        let s = strong_view(&img, &policy, &mut stream());
        prop_assert_eq!((s.height, s.width), (img.height, img.width));
        prop_assert_eq!(s, strong_view(&img, &policy, &mut stream()));
    }

    #[test]
    fn batches_cover_every_sample_once(len in 2usize..300, bs in 1usize..64, seed in any::<u64>(), epoch in 0u64..50) {
        let bs = bs.min(len);
        let plan = BatchPlan::new(seed, epoch, len, bs).unwrap();
        let mut seen: Vec<usize> = plan.batches().concat();
        let dropped = len % bs == 1 && bs > 1;
        prop_assert_eq!(seen.len(), if dropped { len - 1 } else { len });
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), if dropped { len - 1 } else { len });
        prop_assert_eq!(plan, BatchPlan::new(seed, epoch, len, bs).unwrap());
    }

    #[test]
    fn cifar_records_round_trip(seed in any::<u64>(), n in 1usize..6, hundred in any::<bool>()) {
        let variant = if hundred { CifarVariant::Cifar100 } else { CifarVariant::Cifar10 };
        let nc = variant.num_classes();
        let mut rng = RngStream::new(seed, Lane::Synthetic, 0, 0);
        let images: Vec<ImageU8> = (0..n)
            .map(|_| ImageU8::new(32, 32, (0..3072).map(|_| rng.below(256) as u8).collect()).unwrap())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(nc)).collect();
        let ds = Dataset::new(images, labels, nc, Split::Train).unwrap();
        let bytes = encode_cifar_binary(&ds, variant).unwrap();
        let back = parse_cifar_binary(&bytes, variant, Split::Train).unwrap();
        prop_assert_eq!(&back.labels, &ds.labels);
        prop_assert_eq!(&back.images, &ds.images);
    }

    #[test]
    fn normalisation_inverts_to_the_byte(img in image(8), m in prop::array::uniform3(0.0f32..1.0), s in prop::array::uniform3(0.05f32..1.0)) {
        let stats = ChannelStats { mean: m, std: s };
        let back = denormalize(&normalize(&img, &stats).unwrap(), &stats).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            prop_assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exact(vals in prop::collection::vec(any::<f32>(), 1..40), rank in 1usize..3) {
        let shape = if rank == 1 { vec![vals.len()] } else { vec![1, vals.len()] };
        let t = Tensor::new(shape, vals).unwrap();
        let ck = Checkpoint::new(vec![("a.b".into(), t.clone())]);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let got = back.get("a.b").unwrap();
        prop_assert_eq!(got.shape(), t.shape());
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(got), bits(&t));
    }

    #[test]
    fn run_configs_round_trip(tw in 0.0f64..=1.0, ts in 0.0f64..=1.0, temp in 0.5f32..10.0, lr in 1e-4f32..1.0, seed in any::<u64>(), mask in 1u8..16) {
        let pairs: Vec<&str> = ["ww", "ss", "ws", "sw"]
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, s)| *s)
            .collect();
        let text = format!(
            "dataset.kind = synthetic\noutput.dir = o\ndistill.tau_w = {tw}\ndistill.tau_s = {ts}\n\
             distill.temperature = {temp}\noptim.lr = {lr}\ndistill.seed = {seed}\ndistill.pairings = {}\n",
            pairs.join(",")
        );
        let cfg = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(cfg.distill.tau_w, tw);
        prop_assert_eq!(cfg.optim.lr, lr);
        prop_assert_eq!(RunConfig::parse(&cfg.to_string()).unwrap(), cfg);
    }
}
