use std::collections::BTreeSet;

use bridgepure_core::bridge_math::NoiseSchedule;
use bridgepure_core::dataset::{Dataset, Sample};
use bridgepure_core::image::{Image, Shape};
use bridgepure_core::pairing::{self, LeakageRequest};
use bridgepure_core::protections::{Norm, Preprocess, ProtectionSpec, Protector};
use bridgepure_core::rng;
use bridgepure_core::sampler::{self, PointMassDenoiser, SamplerConfig};
use bridgepure_core::synth::{self, SynthConfig};
use proptest::prelude::*;

fn random_image(shape: Shape, seed: u64) -> Image {
    let mut r = rng::rng_from_seed(seed);
    let data = (0..shape.len()).map(|_| rng::below(&mut r, 256) as f32 / 255.0).collect();
    Image::new(shape, data).unwrap()
}

fn spec_for(kind: u8, shape: Shape, eps_num: u32, seed: u64) -> ProtectionSpec {
    match kind % 4 {
        0 => ProtectionSpec::classwise_linf(f64::from(eps_num) / 255.0, 4, seed),
        1 => ProtectionSpec::one_pixel(4, seed),
        2 => ProtectionSpec::patch_l2(ProtectionSpec::default_l2_epsilon(shape) * f64::from(eps_num) / 8.0, 4, seed),
        _ => ProtectionSpec::default_mixture(shape, 4, seed),
    }
}

/// Whether `after` stays within `spec`'s budget of `before`.
fn within_budget(spec: &ProtectionSpec, before: &Image, after: &Image) -> bool {
    let diff: Vec<f64> = before.data.iter().zip(&after.data).map(|(a, b)| f64::from(*b) - f64::from(*a)).collect();
    match spec.norm() {
        Some(Norm::Linf) => diff.iter().all(|d| d.abs() <= spec.epsilon + 1e-6),
        Some(Norm::L2) => diff.iter().map(|d| d * d).sum::<f64>().sqrt() <= spec.epsilon * (1.0 + 1e-6),
        Some(Norm::L0) => {
            let s = before.shape;
            let moved =
                (0..s.height * s.width).filter(|&p| (0..s.channels).any(|c| diff[c * s.height * s.width + p] != 0.0)).count();
            moved <= spec.epsilon as usize
        }
        None => true,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn protections_respect_budgets_and_stay_on_the_grid(
        kind in 0u8..4, eps in 1u32..17, seed in any::<u64>(), img_seed in any::<u64>(), label in 0usize..4,
        size in 8usize..20,
    ) {
        let shape = Shape::new(3, size, size);
        let spec = spec_for(kind, shape, eps, seed);
        let p = Protector::new(&spec, shape).unwrap();
        let x = random_image(shape, img_seed);
        let y = p.protect(&x, label).unwrap();
        let member = p.mixture_member(&x.content_id()).map(|i| &spec.mixture_members[i]);
        prop_assert!(within_budget(member.unwrap_or(&spec), &x, &y));
        prop_assert_eq!(y.clone().quantized(), y.clone());
        prop_assert!(y.data.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(p.protect(&x, label).unwrap(), y);
    }

    #[test]
    fn preprocessing_has_the_scaled_mean(beta in 0.0f64..1.0, seed in any::<u64>()) {
        let shape = Shape::new(1, 1, 1);
        let x = Image::new(shape, vec![0.6]).unwrap();
        let pp = Preprocess { beta, seed };
        let n = 4000;
        let vals: Vec<f64> = (0..n).map(|i| f64::from(pp.apply_seeded(&x, rng::derive_seed_index(seed, i)).data[0])).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let want = (1.0 - beta).sqrt() * 0.6;
        let se = (beta / n as f64).sqrt();
        prop_assert!((mean - want).abs() <= 5.0 * se + 1e-6, "mean {} want {}", mean, want);
    }

    #[test]
    fn splits_are_disjoint_stratified_and_seeded(seed in any::<u64>(), a in 10usize..40, b in 5usize..20, c in 5usize..20) {
        let data = synth::generate(&SynthConfig { size: 8, classes: 5, ..SynthConfig::default() }, 100).unwrap();
        let s = pairing::make_splits(&data, (a, b, c), seed).unwrap();
        prop_assert_eq!((s.protect_set.len(), s.reference_set.len(), s.test_set.len()), (a, b, c));
        let ids = |d: &Dataset| d.iter().map(|x| x.id.clone()).collect::<BTreeSet<_>>();
        let (p, r, t) = (ids(&s.protect_set), ids(&s.reference_set), ids(&s.test_set));
        prop_assert!(p.is_disjoint(&r) && p.is_disjoint(&t) && r.is_disjoint(&t));
        for (part, n) in [(&s.protect_set, a), (&s.reference_set, b), (&s.test_set, c)] {
            for h in part.class_histogram(5) {
                prop_assert!((h as f64 - n as f64 / 5.0).abs() <= 1.0);
            }
        }
        prop_assert_eq!(s, pairing::make_splits(&data, (a, b, c), seed).unwrap());
    }

    #[test]
    fn per_class_harvest_stays_in_the_filter(k in 1usize..6, seed in any::<u64>()) {
        let reference = synth::generate(&SynthConfig { size: 8, classes: 10, ..SynthConfig::default() }, 100).unwrap();
        let spec = ProtectionSpec::classwise_linf(8.0 / 255.0, 10, 3);
        let p = Protector::new(&spec, Shape::new(3, 8, 8)).unwrap();
        let filter = vec![1, 4, 7];
        let a = pairing::harvest_leakage(&p, &reference, &LeakageRequest::per_class(filter.clone(), k), seed).unwrap();
        prop_assert_eq!(a.len(), 3 * k);
        prop_assert!(a.records.iter().all(|r| filter.contains(&r.label)));
        prop_assert!(a.verify().unwrap().is_empty());
    }

    #[test]
    fn dilution_concatenates(n_extra in 0usize..30) {
        let data = synth::generate(&SynthConfig { size: 8, ..SynthConfig::default() }, 40 + n_extra).unwrap();
        let (a, b) = data.samples.split_at(40);
        let d = pairing::dilute(&Dataset::new(a.to_vec()), &Dataset::new(b.to_vec())).unwrap();
        prop_assert_eq!(d.dataset.len(), 40 + n_extra);
        prop_assert_eq!(d.protected.iter().filter(|&&f| f).count(), 40);
        if n_extra == 0 {
            prop_assert_eq!(d.dataset.samples, a.to_vec());
        }
    }

    #[test]
    fn time_grid_is_decreasing(steps in 1usize..200, warp in 0.5f64..4.0) {
        let s = NoiseSchedule::default_vp();
        let g = sampler::time_grid(&s, steps, warp);
        prop_assert_eq!(g.len(), steps + 1);
        prop_assert!(g.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(g[0] < s.t_max);
    }
}

#[test]
fn mixture_assigns_each_member_a_third_of_images() {
    let shape = Shape::new(3, 8, 8);
    let spec = ProtectionSpec::default_mixture(shape, 10, 99);
    let p = Protector::new(&spec, shape).unwrap();
    let mut counts = [0usize; 3];
    for i in 0..10_000u64 {
        let id = format!("{:016x}", rng::derive_seed_index(7, i));
        counts[p.mixture_member(&id).unwrap()] += 1;
    }
    for c in counts {
        let f = c as f64 / 10_000.0;
        assert!((f - 1.0 / 3.0).abs() < 0.05, "{counts:?}");
    }
}

fn dataset_of(n: usize, shape: Shape) -> Dataset {
    (0..n).map(|i| Sample::new(i % 3, random_image(shape, i as u64))).collect()
}

#[test]
fn purification_does_not_depend_on_batch_size() {
    let shape = Shape::new(1, 2, 2);
    let model = PointMassDenoiser { schedule: NoiseSchedule::default_ve(), x0: vec![0.2, 0.4, 0.6, 0.8] };
    let data = dataset_of(23, shape);
    for s in [0.0, 0.5, 1.0] {
        let cfg = SamplerConfig { s, steps: 12, seed: 5, ..SamplerConfig::default() };
        let one = sampler::purify_dataset(&model, &data, &cfg, 1, |_| {}).unwrap();
        for bs in [4, 23, 64] {
            let other = sampler::purify_dataset(&model, &data, &cfg, bs, |_| {}).unwrap();
            assert_eq!(one.dataset, other.dataset, "s = {s}, batch {bs}");
        }
    }
}

#[test]
fn purification_at_s_zero_is_bitwise_reproducible() {
    let shape = Shape::new(1, 2, 2);
    let model = PointMassDenoiser { schedule: NoiseSchedule::default_vp(), x0: vec![0.1, 0.9, 0.5, 0.3] };
    let data = dataset_of(10, shape);
    let a = sampler::purify_dataset(&model, &data, &SamplerConfig { seed: 1, ..SamplerConfig::default() }, 4, |_| {}).unwrap();
    let b = sampler::purify_dataset(&model, &data, &SamplerConfig { seed: 2, ..SamplerConfig::default() }, 7, |_| {}).unwrap();
    let bits = |d: &Dataset| d.iter().flat_map(|s| s.image.data.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a.dataset), bits(&b.dataset));
}
