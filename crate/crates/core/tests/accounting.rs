use fedp3_core::accounting::{
    deployed_size, param_counts, relative_spread, scheme_upload_fraction, single_layer_variants, upload_cost, ArchSpec,
    CnnVariant,
};
use fedp3_core::data::{gen_synthetic, split_dirichlet, train_test_split};
use fedp3_core::fedcore::{run_fedp3, FedConfig, LocalConfig, Scheme};
use fedp3_core::objective::LayeredModel;
use fedp3_core::rng::seeded;
use fedp3_core::Error;
use proptest::prelude::*;

#[test]
fn deployed_size_example() {
    let a = ArchSpec::cifar_cnn(CnnVariant::Cifar10);
    assert_eq!(deployed_size(&a, &["conv1", "fc3"], 0.5).unwrap(), 1_409_824.0);
}

#[test]
fn single_layer_costs() {
    let a = ArchSpec::cifar_cnn(CnnVariant::Cifar10);
    assert_eq!(upload_cost(&a, &["conv1", "fc3"]).unwrap(), 15_104);
    assert_eq!(upload_cost(&a, &["fc2", "fc3"]).unwrap(), 1_058_816);
    let variants = single_layer_variants(&a, 0.5).unwrap();
    assert_eq!(variants.len(), 4);
    let costs: Vec<f64> = variants.iter().map(|v| v.upload as f64).collect();
    let spread = relative_spread(&costs).unwrap();
    // largest is fc1 + fc3, smallest conv1 + fc3
    assert!((spread - (1_648_640.0 - 15_104.0) / 15_104.0).abs() < 1e-9);
    let conv1 = variants.iter().find(|v| v.layer == "conv1").unwrap();
    let fc2 = variants.iter().find(|v| v.layer == "fc2").unwrap();
    assert!(conv1.deployed < fc2.deployed);
}

#[test]
fn other_presets() {
    let c100 = param_counts(&ArchSpec::cifar_cnn(CnnVariant::Cifar100));
    assert_eq!(c100.last().unwrap().1, 102_400);
    let fm = param_counts(&ArchSpec::cifar_cnn(CnnVariant::FashionMnist));
    assert_eq!(fm[0].1, 1_664);
    assert_eq!(ArchSpec::preset("emnistl_mlp").unwrap(), ArchSpec::emnistl_mlp());
    assert_eq!(ArchSpec::cifar_cnn(CnnVariant::Cifar10).final_layer().name, "fc3");
    assert_eq!(relative_spread(&[0.0, 2.0]), Err(Error::UndefinedSpread));
}

#[test]
fn scheme_fractions_on_five_layers() {
    let a = ArchSpec::desk_mlp(&[16, 32, 32, 32, 32, 10]).unwrap();
    for (k, f) in [(3, 0.8), (2, 0.6), (1, 0.4), (4, 1.0)] {
        assert_eq!(scheme_upload_fraction(&a, k).unwrap().layer_fraction, f);
    }
    assert!(scheme_upload_fraction(&a, 5).is_err());
}

#[test]
fn simulator_counters_match_accounting() {
    let widths = [6, 8, 8, 8, 4];
    let arch = ArchSpec::desk_mlp(&widths).unwrap();
    let model = LayeredModel::mlp(6, &widths[1..4], 4, &mut seeded(1)).unwrap();
    let ds = gen_synthetic(300, 6, 4, 2.0, &mut seeded(2)).unwrap();
    let part = split_dirichlet(&ds, 5, 1.0, &mut seeded(3)).unwrap();
    let shards = train_test_split(&ds, &part, 0.7, &mut seeded(4)).unwrap();
    for scheme in [Scheme::Full, Scheme::LowerB] {
        let cfg = FedConfig {
            rounds: 3,
            scheme,
            seed: 9,
            local: LocalConfig {
                steps: 2,
                lr: 0.05,
                batch_size: 8,
            },
            ..FedConfig::default()
        };
        let run = run_fedp3(&model, &shards, &cfg).unwrap();
        let per_round: u64 = run
            .plans
            .iter()
            .map(|p| {
                let names: Vec<&str> = p.layers.iter().map(|&k| model.layers()[k].name.as_str()).collect();
                upload_cost(&arch, &names).unwrap()
            })
            .sum();
        assert_eq!(run.metrics.last().unwrap().up_scalars_cum, 3 * per_round);
    }
}

proptest! {
    #[test]
    fn deployed_size_is_monotone(p in 0.01f64..1.0, q in 0.01f64..1.0, extra in 0usize..4) {
        let a = ArchSpec::cifar_cnn(CnnVariant::Cifar10);
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let others = ["conv1", "conv2", "fc1", "fc2"];
        let small = ["fc3"];
        let big = [others[extra], "fc3"];
        prop_assert!(deployed_size(&a, &small, lo).unwrap() <= deployed_size(&a, &small, hi).unwrap());
        prop_assert!(deployed_size(&a, &small, lo).unwrap() <= deployed_size(&a, &big, lo).unwrap());
    }
}
