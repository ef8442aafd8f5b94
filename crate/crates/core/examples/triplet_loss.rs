//! Batch-hard triplet loss over a small similarity matrix and its gradient.

use candle_core::{Device, Tensor, Var};
use tal::loss::{batch_hard_triplet, LabeledSimilarityBatch};

fn main() -> tal::Result<()> {
    let labels = [0, 0, 1, 1, 2, 2];
    let s = [
        [1.0, 0.8, 0.3, 0.1, 0.0, 0.6],
        [0.8, 1.0, 0.2, 0.4, 0.1, 0.0],
        [0.3, 0.2, 1.0, 0.9, 0.2, 0.1],
        [0.1, 0.4, 0.9, 1.0, 0.3, 0.2],
        [0.0, 0.1, 0.2, 0.3, 1.0, 0.5],
        [0.6, 0.0, 0.1, 0.2, 0.5, 1.0],
    ];
    let scores = Var::from_tensor(&Tensor::new(&s, &Device::Cpu)?)?;
    let out = batch_hard_triplet(&LabeledSimilarityBatch {
        scores: scores.as_tensor(),
        labels: &labels,
        margin: 0.5,
    })?;
    println!("anchor  hardest +  hardest -  hinge");
    for (i, a) in out.anchors.iter().enumerate() {
        println!("{i:>6}  {:>9}  {:>9}  {:.2}", a.positive, a.negative, a.slack.max(0.0));
    }
    println!("loss {:.2}, {} of {} anchors active", out.value, out.active, out.anchors.len());

    let grads = out.loss.backward()?;
    let g = grads.get(scores.as_tensor()).expect("scores receive a gradient");
    println!("dL/dS\n{g}");
    Ok(())
}
