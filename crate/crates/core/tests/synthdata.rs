use proptest::prelude::*;

use sttl_core::container::{Container, ContainerError};
use sttl_core::network::{Label, Target};
use sttl_core::synthdata::{
    approach_scenarios, builtin_domain, dataset_from_container, dataset_to_container, generate_dataset,
    generate_steering_dataset, load_dataset, save_dataset, town_a, town_b, town_c, uniform_noise, DataError, Dataset,
    APPROACH_LEVELS, BUILTIN_DOMAINS,
};

fn mean_rendered_colour(ds: &[sttl_core::network::ImageSequence]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut count = 0.0;
    for s in ds {
        for t in 0..s.frames.t {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += s.frames.plane(t, c).iter().map(|&v| v as f64).sum::<f64>();
            }
            count += (s.frames.h * s.frames.w) as f64;
        }
    }
    acc.map(|a| a / count)
}

#[test]
fn palettes_separate_the_road_domains() {
    let specs = [town_a(), town_b(), town_c()];
    for i in 0..3 {
        for j in i + 1..3 {
            let (a, b) = (specs[i].mean_colour(), specs[j].mean_colour());
            let gap = (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0f32, f32::max);
            assert!(gap > 0.05, "{} vs {}: {gap}", specs[i].domain_id, specs[j].domain_id);

            let ra = mean_rendered_colour(&generate_dataset(&specs[i], 20, 0.5, 4, 1).unwrap());
            let rb = mean_rendered_colour(&generate_dataset(&specs[j], 20, 0.5, 4, 1).unwrap());
            let rendered = (0..3).map(|c| (ra[c] - rb[c]).abs()).fold(0.0, f64::max);
            assert!(rendered > 0.05, "rendered {rendered}");
        }
    }
}

#[test]
fn builtins_resolve_by_name() {
    for name in BUILTIN_DOMAINS {
        let spec = builtin_domain(name).unwrap();
        assert_eq!(spec.domain_id, name);
        spec.validate().unwrap();
    }
    assert!(builtin_domain("townZ").is_none());
    let noise = generate_dataset(&uniform_noise(), 4, 0.5, 3, 1).unwrap();
    assert!(noise.iter().all(|s| s.frames.in_unit_range()));
}

#[test]
fn datasets_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.sttl");
    let ds = Dataset::new(generate_dataset(&town_b().with_size(16, 16), 12, 0.5, 3, 4).unwrap());
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.sequences, ds.sequences);
    assert!(back.maps.is_empty());

    let steer = Dataset::new(generate_steering_dataset(&town_c().with_size(16, 16), 5, 3, 4).unwrap());
    let back = dataset_from_container(&dataset_to_container(&steer).unwrap()).unwrap();
    assert_eq!(back.sequences, steer.sequences);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        load_dataset(&path),
        Err(DataError::Container(ContainerError::Checksum))
    ));
}

#[test]
fn dataset_files_are_byte_identical_per_seed() {
    let spec = town_a().with_size(16, 16);
    let a = dataset_to_container(&Dataset::new(generate_dataset(&spec, 6, 0.5, 3, 9).unwrap())).unwrap();
    let b = dataset_to_container(&Dataset::new(generate_dataset(&spec, 6, 0.5, 3, 9).unwrap())).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
}

#[test]
fn exact_label_balance() {
    let ds = generate_dataset(&town_a().with_size(16, 16), 100, 0.5, 4, 7).unwrap();
    let collisions = ds
        .iter()
        .filter(|s| s.target == Target::Class(Label::Collision))
        .count();
    assert_eq!(collisions, 50);
}

#[test]
fn steering_angles_are_balanced() {
    let ds = generate_steering_dataset(&town_b().with_size(16, 16), 1000, 2, 3).unwrap();
    let mean = ds.iter().map(|s| s.target.angle().unwrap()).sum::<f64>() / 1000.0;
    assert!(mean.abs() < 1.0, "{mean}");
}

#[test]
fn scenario_levels_are_ordered() {
    let set = approach_scenarios(&town_a(), 15, 4, 2).unwrap();
    let growth: Vec<f64> = set.levels.iter().map(|l| l.1).collect();
    assert_eq!(growth, APPROACH_LEVELS.to_vec());
    assert!(set.levels.iter().all(|l| l.2.len() == 4));
    assert!(approach_scenarios(&town_a(), 15, 0, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn containers_round_trip(
        meta in prop::collection::btree_map("[a-z][a-z0-9_.]{0,8}", "[ -~]{0,20}", 0..6),
        f32s in prop::collection::vec(any::<f32>(), 0..40),
        f64s in prop::collection::vec(any::<f64>(), 1..40),
    ) {
        let mut c = Container::new("prop");
        for (k, v) in &meta {
            c.set(k, v);
        }
        c.push_f32("a", &[f32s.len()], f32s.clone());
        c.push_f64("b/c", &[f64s.len()], f64s.clone());
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let a: Vec<u32> = back.blob("a").unwrap().data.to_f32().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, f32s.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let b: Vec<u64> = back.blob("b/c").unwrap().data.to_f64().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(b, f64s.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        for (k, v) in &meta {
            prop_assert_eq!(back.get(k).unwrap(), v.as_str());
        }
    }
}
