//! Dense primitives: matmul, row softmax, normalization and half-pixel resize.

use douc::tensor::{bilinear_resize, l2_normalize_rows, matmul, row_softmax};
use douc::{Grid3, Tensor2};

fn main() -> douc::Result<()> {
    let a = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])?;
    let b = Tensor2::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]])?;
    println!("a @ b = {:?}", matmul(&a, &b)?.data());

    let logits = Tensor2::from_rows(&[vec![0.0, (2.0f32).ln()], vec![1.0, 1.0]])?;
    println!("softmax = {:?}", row_softmax(&logits, 1.0).data());

    let v = Tensor2::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]])?;
    println!("normalized = {:?}", l2_normalize_rows(&v, 1e-12).data());

    let g = Grid3::from_vec(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0])?;
    let up = bilinear_resize(&g, 4, 4);
    for y in 0..4 {
        let row: Vec<f32> = (0..4).map(|x| up.get(y, x, 0)).collect();
        println!("{row:?}");
    }
    Ok(())
}
