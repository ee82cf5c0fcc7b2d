//! Confusion-matrix scoring and a two-run comparison table.

use douc::eval::{compare_report, ConfusionMatrix};
use douc::fusion::LabelMap;

fn main() -> douc::Result<()> {
    let gt = LabelMap::new(2, 4, vec![0, 0, 1, 1, 0, 1, 1, 255])?;
    let good = LabelMap::new(2, 4, vec![0, 0, 1, 1, 0, 1, 0, 0])?;
    let poor = LabelMap::new(2, 4, vec![1, 0, 1, 0, 0, 0, 0, 1])?;

    let mut runs = Vec::new();
    for (name, pred) in [("good", &good), ("poor", &poor)] {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(pred, &gt, 255)?;
        runs.push((name.to_string(), cm.metrics()));
    }
    let report = compare_report(&runs, &["sky".into(), "road".into()])?;
    print!("{}", report.to_text());
    Ok(())
}
