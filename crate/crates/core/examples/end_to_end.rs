//! Both branches, fusion and scoring on seeded toy images, comparing a few
//! fusion settings. The toy weights are random, so scores sit near chance.

use douc::eval::{compare_report, ConfusionMatrix};
use douc::fusion::FusionConfig;
use douc::synthetic::{toy_engine, toy_image, ToySpec};
use douc::PipelineConfig;

fn main() -> douc::Result<()> {
    let spec = ToySpec::default();
    let engine = toy_engine(&spec, 42);
    let images: Vec<_> = (0..8).map(|i| toy_image(&spec, 100 + i, &format!("img{i}"))).collect();

    let settings = [
        (
            "og-only",
            FusionConfig {
                alpha_og: 1.0,
                alpha_fade: 0.0,
                ..Default::default()
            },
        ),
        (
            "fade-only",
            FusionConfig {
                alpha_og: 0.0,
                alpha_fade: 1.0,
                ..Default::default()
            },
        ),
        ("balanced", FusionConfig::default()),
        (
            "balanced+post",
            FusionConfig {
                post_correct: true,
                ..Default::default()
            },
        ),
    ];
    let mut runs = Vec::new();
    for (name, fusion) in settings {
        let config = PipelineConfig {
            fusion,
            ..Default::default()
        };
        let mut cm = ConfusionMatrix::new(engine.text.classes());
        for img in &images {
            let result = engine.run(&img.input, &config)?;
            cm.accumulate(&result.labels, &img.gt, 255)?;
        }
        runs.push((name.to_string(), cm.metrics()));
    }
    print!("{}", compare_report(&runs, engine.text.class_names())?.to_text());
    Ok(())
}
