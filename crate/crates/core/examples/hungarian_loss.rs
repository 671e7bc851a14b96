//! Bipartite matching of predictions to ground truth and the set loss with
//! its gradients.
use ovdet::tensor::Matrix;
use ovdet::train::{
    hungarian, loss_with_grads, FocalConfig, GroundTruthSet, LossInputs, LossWeights,
};

fn main() -> ovdet::Result<()> {
    let cost = Matrix::from_rows(&[[4.0, 1.0, 3.0], [2.0, 0.0, 5.0]])?;
    let a = hungarian(&cost)?;
    println!("assignment {:?}, cost {}", a.pairs, a.total_cost);

    let gt = GroundTruthSet {
        boxes: vec![[0.3, 0.3, 0.2, 0.2]],
        class_indices: vec![1],
    };
    let boxes = vec![
        [0.5, 0.5, 0.2, 0.2],
        [0.31, 0.29, 0.2, 0.22],
        [0.8, 0.8, 0.1, 0.1],
    ];
    let logits = Matrix::from_rows(&[[-2.0, -1.0], [-1.0, 1.5], [0.0, -3.0]])?;
    let projected = Matrix::from_rows(&[[0.1, 0.0], [0.0, 0.9], [0.3, 0.3]])?;
    let prompts = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]])?;
    let lg = loss_with_grads(
        &gt,
        &LossInputs {
            boxes: &boxes,
            logits: &logits,
            projected: &projected,
            prompts: &prompts,
            prompt_ids: &[0, 1],
        },
        &LossWeights::default(),
        &FocalConfig::default(),
    )?;
    println!("matched {:?}", lg.assignment.pairs);
    println!("{:?}", lg.breakdown);
    println!("dL/dbox of the matched query {:?}", lg.dboxes.row(1));
    Ok(())
}
