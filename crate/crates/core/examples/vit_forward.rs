//! Encoder forward on a seeded toy model, with an observation hook on block 0
//! and the last block's value projection captured.

use douc::og::GateConfig;
use douc::synthetic::{toy_engine, toy_image, ToySpec};
use douc::vit::{project_to_joint_space, HookTransform, LastBlockMode, LayerHook};

fn main() -> douc::Result<()> {
    let spec = ToySpec::default();
    let engine = toy_engine(&spec, 1);
    let image = toy_image(&spec, 2, "toy");
    let model = &engine.model;

    let x0 = model.prepare_input(&image.input.tokens)?;
    let hooks = [LayerHook {
        layer_index: 0,
        transform: HookTransform::Identity,
    }];
    let out = model.forward(&x0, &hooks, LastBlockMode::CaptureValues)?;
    println!(
        "tokens after {} blocks: {:?}",
        model.layer_count(),
        out.tokens.tokens().shape()
    );
    println!(
        "hook on block {} saw {:?}",
        out.hooks[0].layer_index,
        out.hooks[0].after.tokens().shape()
    );
    println!("last-block values: {:?}", out.values.as_ref().map(|v| v.shape()));

    let projected = project_to_joint_space(&out.tokens, &model.head, model.ln_eps)?;
    println!("joint-space tokens: {:?}", projected.shape());

    let gated = model.forward(
        &x0,
        &GateConfig::default().hooks(model.layer_count()),
        LastBlockMode::Standard,
    )?;
    let diff = gated.tokens.tokens().max_abs_diff(out.tokens.tokens()).unwrap_or(0.0);
    println!("gating the last quarter moves the output by up to {diff:.4}");
    Ok(())
}
