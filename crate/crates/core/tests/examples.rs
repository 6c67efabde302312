//! Runs the examples as tests so they cannot rot. The full study is
//! covered by the acceptance target.

#[path = "../examples/association_test.rs"]
mod association_test;

#[path = "../examples/feature_extraction.rs"]
mod feature_extraction;

#[path = "../examples/model_sizes.rs"]
mod model_sizes;

#[path = "../examples/planted_bias.rs"]
mod planted_bias;

#[path = "../examples/embedding_containers.rs"]
mod embedding_containers;

#[path = "../examples/pretraining.rs"]
mod pretraining;

#[path = "../examples/distillation.rs"]
mod distillation;

#[path = "../examples/structured_pruning.rs"]
mod structured_pruning;

#[path = "../examples/weight_pruning.rs"]
mod weight_pruning;

#[test]
fn association_test_runs() {
    association_test::main().unwrap();
}

#[test]
fn feature_extraction_runs() {
    feature_extraction::main().unwrap();
}

#[test]
fn model_sizes_runs() {
    model_sizes::main().unwrap();
}

#[test]
fn planted_bias_runs() {
    planted_bias::main().unwrap();
}

#[test]
fn embedding_containers_runs() {
    embedding_containers::main().unwrap();
}

#[test]
fn pretraining_runs() {
    pretraining::main().unwrap();
}

#[test]
fn distillation_runs() {
    distillation::main().unwrap();
}

#[test]
fn structured_pruning_runs() {
    structured_pruning::main().unwrap();
}

#[test]
fn weight_pruning_runs() {
    weight_pruning::main().unwrap();
}
