//! Central-difference gradient checks in f64 over every layer, every loss and
//! a full MiniCNN.

use fusionvote::gradcheck::{layer_and_loss_suite, network_suite, COMPONENTS};

#[test]
fn every_layer_and_loss_matches_finite_differences() {
    for seed in [1, 2] {
        let errors = layer_and_loss_suite(20, seed).unwrap();
        assert_eq!(errors.len(), COMPONENTS.len());
        for (name, err) in &errors {
            assert!(*err < 1e-6, "seed {seed}: {name} relative error {err:e}");
        }
    }
}

#[test]
fn whole_network_matches_finite_differences() {
    let err = network_suite(4, 7).unwrap();
    assert!(err < 1e-5, "network relative error {err:e}");
}
