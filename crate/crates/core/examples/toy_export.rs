//! Writes a seeded toy export (manifest, tensors, images, config.json) that the
//! `douc` binary can consume.
//!
//! ```text
//! cargo run --example toy_export -- /tmp/toy
//! cargo run -- segment --config /tmp/toy/config.json
//! cargo run -- eval --config /tmp/toy/config.json
//! ```

use std::path::PathBuf;

use douc::synthetic::{write_toy_run, ToySpec};

fn main() -> douc::Result<()> {
    let dir = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("douc-toy"));
    let config = write_toy_run(&dir, &ToySpec::default(), 7, 4)?;
    println!("{}", config.display());
    Ok(())
}
