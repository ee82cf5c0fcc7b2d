//! Norm-based reliability gating of patch tokens.

use douc::og::{apply_gate, gate_weights, reliability_scores};
use douc::vit::TokenSequence;
use douc::Tensor2;

fn main() -> douc::Result<()> {
    // CLS row, then a 2x2 grid with one high-norm outlier.
    let tokens = Tensor2::from_rows(&[
        vec![9.0, 9.0],
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![8.0, 6.0],
        vec![0.6, 0.8],
    ])?;
    let seq = TokenSequence::new(tokens, 2, 2)?;
    let scores = reliability_scores(&seq);
    let weights = gate_weights(&scores, 0.25);
    println!("norms   {scores:?}");
    println!("weights {weights:?}");
    let gated = apply_gate(&seq, &weights, 0.5)?;
    for i in 0..seq.patch_count() {
        println!("patch {i}: {:?} -> {:?}", seq.patch(i), gated.patch(i));
    }
    println!("cls unchanged: {:?}", gated.cls());
    Ok(())
}
