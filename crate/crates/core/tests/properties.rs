use bdkd::augment::{self, AugmentConfig, AugLevel, RAND_OPS};
use bdkd::boundary::{border_attack_batch, AttackConfig, Status};
use bdkd::curate::{self, Example, LabelSpace};
use bdkd::gradcore::{small_cnn, Mode, Model, Tensor};
use bdkd::shaderforge::{filter_image, parse_with_seeds, random_program, render};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * h * w).map(|_| rng.gen::<f32>()).collect();
    Tensor::new(vec![3, h, w], data).unwrap()
}

fn in_unit_range(t: &Tensor) -> bool {
    t.data().iter().all(|v| (0.0..=1.0).contains(v))
}

fn tiny_teacher(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::new([3, 8, 8], small_cnn(&[4, 8], 4), &mut rng).unwrap();
    m.set_mode(Mode::Eval);
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rendered_pixels_stay_in_unit_range(seed in any::<u64>(), depth in 1usize..=12) {
        let p = random_program(&mut ChaCha8Rng::seed_from_u64(seed), depth);
        let img = render(&p, 12, 12);
        prop_assert_eq!(img.shape(), &[3, 12, 12]);
        prop_assert!(in_unit_range(&img));
    }

    #[test]
    fn printed_programs_parse_back_to_themselves(seed in any::<u64>(), depth in 1usize..=12) {
        let p = random_program(&mut ChaCha8Rng::seed_from_u64(seed), depth);
        let src = p.source();
        let q = parse_with_seeds(&src, p.seeds).unwrap();
        prop_assert_eq!(q.source(), src);
        prop_assert_eq!(render(&q, 8, 8), render(&p, 8, 8));
    }

    #[test]
    fn filter_ignores_channel_order(seed in any::<u64>(), levels in 1u32..6, perm in 0usize..6) {
        // Few distinct values so every filter outcome is reachable.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plane = 10 * 10;
        let data: Vec<f32> = (0..3 * plane)
            .map(|_| rng.gen_range(0..levels) as f32 / levels as f32)
            .collect();
        let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let permuted: Vec<f32> = orders[perm]
            .iter()
            .flat_map(|&c| data[c * plane..(c + 1) * plane].to_vec())
            .collect();
        let a = filter_image(&Tensor::new(vec![3, 10, 10], data).unwrap()).unwrap();
        let b = filter_image(&Tensor::new(vec![3, 10, 10], permuted).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn augmentations_keep_shape_and_range(seed in any::<u64>(), op in 0usize..12, mag in 0.0f32..=1.0) {
        let img = random_image(seed, 10, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let out = augment::apply_op(&img, RAND_OPS[op], mag, &mut rng);
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(in_unit_range(&out));
        let ela = augment::elastic(&img, 2.0, 3.0, &mut rng);
        prop_assert!(in_unit_range(&ela));
        for level in [AugLevel::None, AugLevel::Minimal, AugLevel::Standard] {
            let cfg = AugmentConfig { level, ..Default::default() };
            let ex = Example { image: img.clone(), target: 1, provenance: 0, teacher_pred: 0 };
            let out = augment::augment_pipeline(&ex, &cfg, &mut rng);
            prop_assert_eq!(out.image.shape(), img.shape());
            prop_assert!(in_unit_range(&out.image));
            prop_assert_eq!(out.target, 1);
        }
    }

    #[test]
    fn mixup_is_convex(seed in any::<u64>(), lambda in 0.0f32..=1.0) {
        let a = Example { image: random_image(seed, 6, 6), target: 0, provenance: 0, teacher_pred: 1 };
        let b = Example { image: random_image(seed ^ 7, 6, 6), target: 2, provenance: 1, teacher_pred: 1 };
        let m = augment::mix_pair(&a, &b, lambda);
        for ((x, y), z) in a.image.data().iter().zip(b.image.data()).zip(m.image.data()) {
            prop_assert!((z - (lambda * x + (1.0 - lambda) * y)).abs() <= 1e-6);
            prop_assert!(*z >= x.min(*y) - 1e-6 && *z <= x.max(*y) + 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn kept_pairs_sit_on_the_boundary(seed in any::<u64>(), eps in 2.0f32..40.0, pgd in any::<bool>()) {
        let teacher = tiny_teacher(seed);
        let images: Vec<Tensor> = (0..12).map(|i| random_image(seed.wrapping_add(i), 8, 8)).collect();
        let items: Vec<(&Tensor, usize)> = images.iter().enumerate().map(|(i, x)| (x, i % 4)).collect();
        let cfg = AttackConfig { epsilon: eps, pgd_init: pgd, max_iters: 20, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let results = border_attack_batch(&teacher, &items, &cfg, false, &mut rng).unwrap();
        for (r, (origin, target)) in results.iter().zip(&items) {
            match r.status {
                Status::Kept => {
                    let p = r.pair.as_ref().unwrap();
                    prop_assert!(p.is_valid(cfg.softmax_threshold));
                    prop_assert_eq!(p.target, *target);
                    for x in [&p.pre, &p.post] {
                        prop_assert!(in_unit_range(x));
                        prop_assert!(x.max_abs_diff(origin) <= eps / 255.0 + 1e-6);
                    }
                }
                Status::Skipped => prop_assert!(r.pair.is_none() && r.iters == 0),
                Status::Failed => prop_assert!(r.pair.is_none()),
            }
            prop_assert!(r.iters <= cfg.max_iters);
        }
    }

    #[test]
    fn curated_targets_avoid_teacher_prediction(
        preds in prop::collection::vec(0usize..4, 40..120),
        quota in 1usize..6,
        seed in any::<u64>(),
    ) {
        let corpus: Vec<Tensor> = (0..preds.len()).map(|i| Tensor::full(vec![3, 2, 2], i as f32 / preds.len() as f32)).collect();
        let labels = LabelSpace::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match curate::build_kd_dataset(&corpus, &preds, &labels, &[quota; 4], false, &mut rng) {
            Ok(ds) => {
                prop_assert_eq!(ds.len(), 4 * quota);
                let mut per_class = [0usize; 4];
                let mut used = std::collections::HashSet::new();
                for e in &ds.examples {
                    prop_assert_ne!(e.target, preds[e.provenance]);
                    prop_assert_eq!(e.teacher_pred, preds[e.provenance]);
                    prop_assert!(used.insert((e.target, e.provenance)));
                    per_class[e.target] += 1;
                }
                prop_assert_eq!(per_class, [quota; 4]);
            }
            Err(bdkd::Error::StarvedClass { .. }) => {}
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}
