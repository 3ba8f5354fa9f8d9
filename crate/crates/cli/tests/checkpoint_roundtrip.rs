use crlnet_cli::checkpoint::{decode_value, encode_value, Checkpoint, Metadata};
use crlnet_core::model::{Model, ModelConfig, Structure};
use crlnet_core::tensor_autodiff::{ParamSet, Tensor};
use proptest::prelude::*;

fn meta() -> Metadata {
    Metadata { epoch: 4, seed: 11, config_hash: "ab".repeat(32) }
}

proptest! {
    #[test]
    fn any_bit_pattern_survives_encoding(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        prop_assert_eq!(decode_value(&encode_value(v)).unwrap().to_bits(), bits);
    }

    #[test]
    fn param_sets_round_trip_bit_exactly(values in prop::collection::vec(any::<u64>(), 2..40), split in 1usize..4) {
        let mut params = ParamSet::new();
        let data: Vec<f64> = values.iter().map(|&b| f64::from_bits(b)).collect();
        let cut = (data.len() / split).clamp(1, data.len() - 1);
        params.push("a", Tensor::new(vec![cut], data[..cut].to_vec()).unwrap());
        params.push("b", Tensor::new(vec![data.len() - cut, 1], data[cut..].to_vec()).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        Checkpoint::from_params(&params, meta()).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        prop_assert_eq!(&loaded.metadata, &meta());
        let back = loaded.restore(&params).unwrap();
        for ((_, x), (_, y)) in params.iter().zip(back.iter()) {
            prop_assert_eq!(x.shape(), y.shape());
            let bx: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let by: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bx, by);
        }
    }
}

#[test]
fn every_structure_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for structure in Structure::ALL {
        let cfg = ModelConfig { structure, ..ModelConfig::default() };
        let model = Model::init(&cfg, 3).unwrap();
        let path = dir.path().join(format!("{structure}.json"));
        Checkpoint::from_params(&model.params, meta()).save(&path).unwrap();
        let template = Model::init(&cfg, 99).unwrap().params;
        let back = Checkpoint::load(&path).unwrap().restore(&template).unwrap();
        for ((n, x), (_, y)) in model.params.iter().zip(back.iter()) {
            assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{structure} {n}");
        }
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::init(&ModelConfig::default(), 0).unwrap();
    let mut ck = Checkpoint::from_params(&model.params, meta());
    let path = dir.path().join("ck.json");

    ck.format_version = 2;
    ck.save(&path).unwrap();
    assert!(Checkpoint::load(&path).is_err());

    ck.format_version = 1;
    ck.params[0].values.pop();
    ck.save(&path).unwrap();
    assert!(Checkpoint::load(&path).is_err());

    let mut ck = Checkpoint::from_params(&model.params, meta());
    ck.params[1].values[0] = "xyz".into();
    assert!(ck.restore(&model.params).is_err());

    let other = Model::init(&ModelConfig { structure: Structure::NonSiamese, ..ModelConfig::default() }, 0).unwrap();
    assert!(Checkpoint::from_params(&model.params, meta()).restore(&other.params).is_err());

    std::fs::write(&path, "{ not json").unwrap();
    assert!(Checkpoint::load(&path).is_err());
}
