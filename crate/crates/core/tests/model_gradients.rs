//! Whole-model gradient checks against central finite differences.

mod common;

use common::model_fd::*;
use hier_core::doc_encoder::HeadKind;

#[test]
fn chunk_encoder_gradients() {
    let worst = chunk_encoder_check(5);
    eprintln!("chunk encoder: {worst:e}");
    assert!(worst < TOL, "worst relative error {worst:e}");
}

#[test]
fn doc_encoder_gradients_every_head() {
    for (i, head) in [HeadKind::Encoder, HeadKind::EncoderBilstm, HeadKind::Bigru2, HeadKind::BilstmBigru].into_iter().enumerate() {
        let worst = doc_encoder_check(head, 10 + i as u64);
        eprintln!("{head:?}: {worst:e}");
        assert!(worst < TOL, "{head:?}: worst relative error {worst:e}");
    }
}
