//! End-to-end deep SVM on the circles task: the feature net has to map the
//! rings to a linearly separable plane for the Frank-Wolfe head.

use condgrad::datasets;
use condgrad::svm::{self, DeepSvmConfig};

#[test]
fn circles_reach_high_accuracy_in_twenty_outer_iterations() {
    let data = datasets::generate_circles(200, 1.0, 2.0, 0.1, 7).unwrap();
    let config = DeepSvmConfig {
        net_seed: 2,
        ..DeepSvmConfig::default()
    };
    let (net, model, trace) = svm::deep_svm_train(&data, &config).unwrap();
    assert_eq!(trace.len(), 20);
    let acc = svm::deep_svm_accuracy(&net, &model, &data).unwrap();
    assert!(acc >= 0.95, "training accuracy {acc}");
    // the boundary is linear in feature space: scores are linear in phi with
    // the learned psi, so check that the two feature clusters are separated
    // by margin-1 scores
    let hinge_last = trace.records.last().unwrap().objective;
    assert!(hinge_last <= 1.0, "final hinge loss {hinge_last}");
}
