//! Writes a small safetensors file in F32 and BF16, reads it back, and shows
//! that a corrupted header is rejected.

use std::collections::BTreeMap;

use loracal::safetensors::{deserialize, serialize, Dtype};
use loracal::TensorF32;

fn main() -> loracal::Result<()> {
    let tensors = BTreeMap::from([
        ("a".to_string(), TensorF32::from_rows(&[&[1.0, -2.5], &[0.125, 3.0]])?),
        ("b".to_string(), TensorF32::vector(vec![0.1, 0.2, 0.3])?),
    ]);
    let meta = BTreeMap::from([("format".to_string(), "demo".to_string())]);
    for dtype in [Dtype::F32, Dtype::BF16] {
        let bytes = serialize(&tensors, &meta, dtype)?;
        let file = deserialize(&bytes)?;
        println!("{:4}: {} bytes, b = {:?}", dtype.as_str(), bytes.len(), file.get("b")?.data());
        assert_eq!(serialize(&tensors, &meta, dtype)?, bytes);
    }

    let mut bad = serialize(&tensors, &meta, Dtype::F32)?;
    bad[8] = b'[';
    match deserialize(&bad) {
        Ok(_) => println!("corrupt header accepted"),
        Err(e) => println!("corrupt header rejected: {e}"),
    }
    Ok(())
}
