//! Diagnostics helpers that pin network outputs to constants.
//!
//! Forcing an encoder to emit a fixed Gaussian (or a decoder to emit its
//! bias) turns a model graph into a closed-form object, which is how the
//! posterior-fusion and loss-bookkeeping identities are checked. The trick
//! relies on the subset template: zero every trunk weight and bias (the
//! trunk output becomes a constant), set the fused-layer bias to one (ReLU
//! of one is one, regardless of trunk activation), and write the desired
//! output into the first row of the bias-free head.

use ndarray::IxDyn;

use crate::model::ModelGraph;
use crate::tape::Tensor;

fn zero_params_with_prefix(graph: &mut ModelGraph, prefix: &str) {
    let ids: Vec<usize> = graph
        .store()
        .iter()
        .filter(|(_, e)| e.name.starts_with(prefix))
        .map(|(id, _)| id)
        .collect();
    let store = graph.store_mut();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store
            .set_value(id, Tensor::zeros(IxDyn(&shape)))
            .expect("shape unchanged");
    }
}

/// Makes encoder `net` emit exactly `(mean, log_var)` for every input.
pub fn force_encoder_output(graph: &mut ModelGraph, net: &str, mean: &[f64], log_var: &[f64]) {
    assert_eq!(mean.len(), log_var.len());
    let prefix = format!("{net}/");
    zero_params_with_prefix(graph, &prefix);
    let fuse_biases: Vec<usize> = graph
        .store()
        .iter()
        .filter(|(_, e)| e.name.starts_with(&prefix) && e.name.ends_with("fuse_b"))
        .map(|(id, _)| id)
        .collect();
    assert!(!fuse_biases.is_empty(), "no such encoder: {net}");
    let store = graph.store_mut();
    for id in fuse_biases {
        let shape = store.value(id).shape().to_vec();
        store
            .set_value(id, Tensor::ones(IxDyn(&shape)))
            .expect("shape unchanged");
    }
    let head = store
        .find(&format!("{net}/head_w"))
        .expect("encoder head present");
    let shape = store.value(head).shape().to_vec();
    assert_eq!(shape[1], 2 * mean.len(), "latent width mismatch");
    let mut w = Tensor::zeros(IxDyn(&shape));
    for (d, &m) in mean.iter().enumerate() {
        w[[0, d]] = m;
    }
    for (d, &lv) in log_var.iter().enumerate() {
        w[[0, mean.len() + d]] = lv;
    }
    store.set_value(head, w).expect("shape unchanged");
}

/// Zeroes every parameter of decoder `net`, so it emits its (zero) bias —
/// i.e. constant logits 0 — for any latent code.
pub fn zero_decoder(graph: &mut ModelGraph, net: &str) {
    let prefix = format!("{net}/");
    let any = graph.store().iter().any(|(_, e)| e.name.starts_with(&prefix));
    assert!(any, "no such decoder: {net}");
    zero_params_with_prefix(graph, &prefix);
}
