mod common;

use m2f_core::model::attention_bias_from_mask;
use m2f_core::tensor::MASKED;
use m2f_core::Tensor;

#[test]
fn zero_bias_masked_attention_is_cross_attention() {
    let worst = common::checks::zero_bias_reduction(100, 7);
    assert!(worst <= 1e-12, "max abs diff {worst:e}");
}

#[test]
fn bias_tracks_thresholded_resized_probabilities() {
    // Logit 0 sits exactly on the 0.5 threshold and stays visible.
    let logits = Tensor::new(vec![1, 2, 2], vec![10.0, 0.0, -10.0, -10.0]).unwrap();
    let bias = attention_bias_from_mask(&logits, 2, 2, 0.5).unwrap();
    assert_eq!(bias.data(), &[0.0, 0.0, MASKED, MASKED]);
}

#[test]
fn all_background_row_attends_everywhere() {
    let logits = Tensor::full(&[2, 4, 4], -5.0);
    let bias = attention_bias_from_mask(&logits, 2, 2, 0.5).unwrap();
    assert!(bias.data().iter().all(|&b| b == 0.0));
}
