//! Loads a run config with overrides and round-trips a detector checkpoint.
use ovdet::checkpoint;
use ovdet::config::RunConfig;
use ovdet::pipeline::Detector;
use ovdet::run::new_detector;
use ovdet::tensor::Parameters;

fn main() -> ovdet::Result<()> {
    let cfg = RunConfig::from_toml_with_overrides(
        "seed = 3\n[ensemble]\nalpha = 0.2\n",
        &["ensemble.beta=1.0", "decoder.m=16"],
    )?;
    println!(
        "beta {} epsilon {} queries {}",
        cfg.ensemble.beta, cfg.ensemble.epsilon, cfg.decoder.m
    );

    let detector = new_detector(&cfg)?;
    let text = checkpoint::to_json("detector", &cfg, &detector)?;
    let (back, back_cfg): (Detector, RunConfig) = checkpoint::from_json("detector", &text)?;
    println!(
        "{} parameters, {} bytes, identical: {}",
        back.num_params(),
        text.len(),
        back == detector && back_cfg == cfg
    );
    Ok(())
}
