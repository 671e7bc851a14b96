//! Patchify a rendered scene and run the ViT encoder over it.
use ovdet::data::{render_scene, SceneObject, SceneSpec};
use ovdet::encoder::{EncoderConfig, ImageEncoder};

fn main() -> ovdet::Result<()> {
    let objects = vec![
        SceneObject::new("red square", [0.3, 0.3], [0.1, 0.1], 0.2, [0.9, 0.1, 0.1])?,
        SceneObject::new(
            "blue circle",
            [0.7, 0.6],
            [0.12, 0.12],
            0.0,
            [0.1, 0.2, 0.9],
        )?,
    ];
    let image = render_scene(&SceneSpec {
        width: 64,
        height: 64,
        objects,
        noise: 0.02,
        seed: 3,
    });
    let encoder = ImageEncoder::new(EncoderConfig::default())?;
    let patches = encoder.patchify(&image)?;
    println!(
        "{} patch tokens on a {}x{} grid",
        patches.len(),
        patches.grid_h,
        patches.grid_w
    );
    let memory = encoder.encode(&patches)?;
    println!("memory {}x{}", memory.tokens.rows(), memory.tokens.cols());
    Ok(())
}
