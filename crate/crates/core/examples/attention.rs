//! Multi-head attention with an additive mask, and its vector-Jacobian product.
use ovdet::tensor::{attention, attention_vjp, AttentionParams, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ovdet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = AttentionParams::new(8, 2, &mut rng)?;
    let q = Matrix::from_rows(&[[0.1; 8], [0.5; 8]])?;
    let kv = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0; 8], [0.3; 8]])?;

    // second query may only look at the last key
    let mask = Matrix::from_rows(&[[0.0, 0.0, 0.0], [-1e9, -1e9, 0.0]])?;
    let out = attention(&q, &kv, &params, Some(&mask))?;
    println!("output {}x{}", out.rows(), out.cols());
    println!("row 1: {:?}", out.row(1));

    let dout = Matrix::from_vec(2, 8, vec![1.0; 16])?;
    let (dq, dkv, _) = attention_vjp(&q, &kv, &params, Some(&mask), &dout)?;
    println!("|dq| = {:.4}, |dkv| = {:.4}", norm(&dq), norm(&dkv));
    Ok(())
}

fn norm(m: &Matrix) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}
