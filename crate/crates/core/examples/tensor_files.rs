//! Writes and reads the binary tensor format and a golden bundle.

use douc::io::{read_shape, read_tensor, write_tensor, GoldenBundle, LoadedTensor};
use douc::Tensor2;

fn main() -> douc::Result<()> {
    let dir = std::env::temp_dir().join("douc-tensor-files");
    let t = Tensor2::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]])?;
    let path = dir.join("t.bin");
    write_tensor(&path, &(&t).into())?;
    println!("header shape: {:?}", read_shape(&path)?);
    if let LoadedTensor::Matrix(back) = read_tensor(&path)? {
        assert_eq!(back, t);
        println!("round trip ok: {:?}", back.data());
    }

    let mut bundle = GoldenBundle::new("img0");
    bundle.insert("logits_fused", &t);
    bundle.insert("cls_logits", [0.1f32, 0.2].as_slice());
    bundle.write(dir.join("img0"))?;
    let read = GoldenBundle::read(dir.join("img0"))?;
    println!(
        "bundle {} holds {:?}",
        read.image_id,
        read.tensors.keys().collect::<Vec<_>>()
    );
    Ok(())
}
