//! Feature-affinity proxy attention, with and without instance masks.

use douc::fade::{
    build_affinity, mask_affinity, normalize_affinity, reconstruct_values, InstanceMaskSet, UncoveredPolicy,
};
use douc::{Grid3, Tensor2};

fn main() -> douc::Result<()> {
    // A 1x4 feature grid: two similar cells on the left, two on the right.
    let features = Grid3::from_vec(1, 4, 2, vec![1.0, 0.1, 0.9, 0.2, 0.1, 1.0, 0.2, 0.9])?;
    let s = build_affinity(&features);
    let open = normalize_affinity(&s, 2.0);
    println!("unmasked row 0: {:?}", open.values().row(0));

    let masks = InstanceMaskSet::from_assignment(1, 4, vec![Some(0), Some(0), Some(1), None])?;
    let masked = normalize_affinity(&mask_affinity(&s, &masks, UncoveredPolicy::BackgroundGroup)?, 2.0);
    println!("masked row 0:   {:?}", masked.values().row(0));
    println!("masked row 3:   {:?}", masked.values().row(3));

    let values = Tensor2::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]])?;
    println!("reconstructed:  {:?}", reconstruct_values(&masked, &values)?.data());
    Ok(())
}
