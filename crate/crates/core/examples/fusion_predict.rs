//! Aligning two branches' logits, collapsing queries to classes and predicting labels.

use douc::fusion::{align_and_fuse, collapse_queries, predict, Collapse, FusionConfig, LogitMap};

fn main() -> douc::Result<()> {
    // Three queries; the third is a second prompt for class 1.
    let coarse = LogitMap::new(
        3,
        2,
        2,
        vec![
            0.9, 0.1, 0.8, 0.2, //
            0.1, 0.7, 0.2, 0.6, //
            0.0, 0.8, 0.1, 0.3,
        ],
    )?;
    let fine = coarse.resize(4, 4).scale(0.5);
    let fused = align_and_fuse(&coarse, &fine, &FusionConfig::default())?;
    println!("fused grid: {}x{}", fused.height(), fused.width());

    let classes = collapse_queries(&fused, &[0, 1, 1], 2, Collapse::Max)?;
    let labels = predict(&classes, 8, 8);
    for y in 0..8 {
        let row: Vec<usize> = (0..8).map(|x| labels.get(y, x)).collect();
        println!("{row:?}");
    }
    Ok(())
}
