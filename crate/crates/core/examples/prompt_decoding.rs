//! Prompt-mode decoding keeps `m` boxes for any vocabulary size; the
//! conditional baseline grows to `k·m`.
use ovdet::decoder::{DecoderConfig, Modality, PromptDecoder};
use ovdet::encoder::{EncoderConfig, ImageEncoder, ImageSample};
use ovdet::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() -> ovdet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = ImageSample::new(0, 64, 64, 3, (0..64 * 64 * 3).map(|_| rng.gen()).collect())?;
    let memory = ImageEncoder::new(EncoderConfig::default())?.forward(&image)?;
    let decoder = PromptDecoder::new(DecoderConfig::default())?;
    let queries = decoder.query_set();
    for k in [1, 10, 100] {
        let raw = Matrix::from_vec(
            k,
            64,
            (0..k * 64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let prompts =
            decoder.prompts(&raw, &(0..k).collect::<Vec<_>>(), &vec![Modality::Text; k])?;
        let t = Instant::now();
        let out = decoder.decode_prompt(&queries, &prompts, &memory)?;
        let tp = t.elapsed();
        let t = Instant::now();
        let cond = decoder.decode_conditional(&queries, &prompts, &memory)?;
        let tc = t.elapsed();
        println!(
            "k={k:4}: prompt {} boxes, probs {}x{} in {tp:?} | conditional {} boxes in {tc:?}",
            out.boxes.len(),
            out.probs.rows(),
            out.probs.cols(),
            cond.boxes.len()
        );
    }
    Ok(())
}
