//! Binary greyscale PGM (P5) output for response maps in `[0, 1]`.

use std::fs;
use std::path::Path;

use lpanet::{Error, Result, Tensor};

/// Grey levels for channel `c` of `maps[n, H, W]`, clamped to `[0, 1]`.
pub fn encode(maps: &Tensor<f32>, c: usize) -> Vec<u8> {
    let (h, w) = (maps.shape()[1], maps.shape()[2]);
    let plane = &maps.data()[c * h * w..(c + 1) * h * w];
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        plane
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write(path: &Path, maps: &Tensor<f32>, c: usize) -> Result<()> {
    fs::write(path, encode(maps, c)).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_levels() {
        let t = Tensor::new([2, 1, 3], vec![0.0, 0.5, 1.0, -1.0, 2.0, 0.25]).unwrap();
        let bytes = encode(&t, 1);
        assert!(bytes.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 255, 64]);
    }
}
