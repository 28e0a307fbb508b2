mod support;

use steeradv_core::model::{load_weights, save_weights, weight_checksum, Architecture, Head, Model};
use steeradv_core::train::{train, Loss, TrainConfig};

fn bits<T: steeradv_core::Real>(m: &Model<T>) -> Vec<u64> {
    m.layers()
        .iter()
        .flat_map(|l| l.params.iter().chain(&l.state))
        .flat_map(|t| t.data().iter().map(|v| v.to_f64().unwrap().to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn trained_weights_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = support::toy_set(12, 1);
    let mut model = Model::epoch(Head::Classification, 8, 8, 3).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 2,
        loss: Loss::CrossEntropy,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &cfg).unwrap();
    let path = dir.path().join("m.evfw");
    save_weights(&model, &path).unwrap();
    let back: Model<f32> = load_weights(&path).unwrap();
    assert_eq!(bits(&model), bits(&back));
    assert_eq!(back.head(), Head::Classification);
    assert_eq!(back.resolution(), (8, 8));
    let again = dir.path().join("again.evfw");
    save_weights(&back, &again).unwrap();
    let (a, b) = (std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(a, b);
    assert_eq!(weight_checksum(&a), weight_checksum(&b));
    let x = &data[0].image;
    assert_eq!(model.logits(x).unwrap(), back.logits(x).unwrap());
}

#[test]
fn nvidia_batch_norm_state_survives_in_double_precision() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::<f64>::build(Architecture::Nvidia, Head::Regression, 64, 64, 9).unwrap();
    for layer in model.layers_mut() {
        for s in &mut layer.state {
            s.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 + i as f64 / 7.0);
        }
    }
    let path = dir.path().join("n.evfw");
    save_weights(&model, &path).unwrap();
    let back: Model<f64> = load_weights(&path).unwrap();
    assert_eq!(bits(&model), bits(&back));
    assert_eq!(back.architecture(), Architecture::Nvidia);
}
