use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::data::dataset::{Dataset, Schema};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Reduces each 8-bit value to `bit_depth` bits and spreads it uniformly
/// over its cell: `(v + u) / 256`.
pub fn dequantize<R: Rng + ?Sized>(values: &[i64], bit_depth: u32, rng: &mut R) -> Result<Vec<f64>> {
    if !(1..=8).contains(&bit_depth) {
        return Err(Error::Argument(format!("bit depth must be in 1..=8, got {bit_depth}")));
    }
    if let Some(v) = values.iter().find(|v| !(0..=255).contains(*v)) {
        return Err(Error::Data(format!("pixel value {v} outside [0, 255]")));
    }
    let step = 1i64 << (8 - bit_depth);
    Ok(values
        .iter()
        .map(|&v| {
            let q = (v / step) * step;
            let u: f64 = rng.random();
            (q as f64 + u) / 256.0
        })
        .collect())
}

/// Bits needed to represent integers `0..=max`.
pub fn bit_depth_for(max: i64) -> u32 {
    let levels = (max + 1).max(2) as u64;
    (u64::BITS - (levels - 1).leading_zeros()).clamp(1, 8)
}

/// Integer-valued image data: responses are pixel intensities in `0..=max`.
///
/// Intensities are rescaled so `max` maps to 255 and then dequantized at
/// the bit depth of the source range, which keeps distinct source levels
/// in distinct cells.
pub fn dequantize_dataset<R: Rng + ?Sized>(raw: &Dataset, rng: &mut R) -> Result<(Dataset, u32)> {
    let data = raw.y.data();
    if let Some(v) = data.iter().find(|v| v.fract() != 0.0 || **v < 0.0) {
        return Err(Error::Data(format!("pixel value {v} is not a non-negative integer")));
    }
    let max = data.iter().copied().fold(0.0, f64::max) as i64;
    if max == 0 {
        return Err(Error::DegenerateData("all pixel values are zero".into()));
    }
    let bits = bit_depth_for(max);
    let scaled: Vec<i64> = data
        .iter()
        .map(|&v| ((v * 255.0) / max as f64).round() as i64)
        .collect();
    let deq = dequantize(&scaled, bits, rng)?;
    let mut out = raw.clone();
    out.y = Tensor::matrix(raw.y.rows(), raw.y.cols(), deq);
    Ok((out, bits))
}

/// Loads a CSV of integer pixel rows and dequantizes it.
pub fn load_integer_images<R: Rng + ?Sized>(
    path: impl AsRef<Path>,
    schema: &Schema,
    rng: &mut R,
) -> Result<(Dataset, u32)> {
    let raw = crate::data::load_dataset(path, schema)?;
    dequantize_dataset(&raw, rng)
}

/// Maps a value in `(0, 1)` back to its 8-bit cell.
pub fn to_byte(v: f64) -> u8 {
    (v * 256.0).floor().clamp(0.0, 255.0) as u8
}

/// Binary greyscale PGM (`P5`, maxval 255).
pub fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if width * height != values.len() || values.is_empty() {
        return Err(Error::Argument(format!(
            "{} values for a {width}×{height} image",
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let bytes = pgm_bytes(width, height, values)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Side length of a square image with `p` pixels.
pub fn square_side(p: usize) -> Option<usize> {
    let s = (p as f64).sqrt().round() as usize;
    (s * s == p).then_some(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dequantize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v = dequantize(&[0, 255, 37], 8, &mut rng).unwrap();
            assert!(v[0] > 0.0 && v[0] < 1.0 / 256.0);
            assert!(v[1] > 255.0 / 256.0 && v[1] < 1.0);
            let q = dequantize(&[37], 5, &mut rng).unwrap()[0];
            assert!(q > 32.0 / 256.0 && q < 33.0 / 256.0);
        }
        assert!(matches!(dequantize(&[256], 8, &mut rng), Err(Error::Data(_))));
        assert!(matches!(dequantize(&[-1], 8, &mut rng), Err(Error::Data(_))));
        assert!(dequantize(&[3], 0, &mut rng).is_err());
    }

    #[test]
    fn bit_depths() {
        assert_eq!(bit_depth_for(16), 5);
        assert_eq!(bit_depth_for(15), 4);
        assert_eq!(bit_depth_for(255), 8);
        assert_eq!(bit_depth_for(1), 1);
    }

    #[test]
    fn pgm_layout() {
        let bytes = pgm_bytes(2, 1, &[0.001, 0.999]).unwrap();
        assert_eq!(bytes, b"P5\n2 1\n255\n\x00\xff".to_vec());
        assert!(pgm_bytes(3, 3, &[0.5; 4]).is_err());
    }

    proptest! {
        #[test]
        fn monotone_under_shared_noise(a in 0i64..256, b in 0i64..256, bits in 1u32..=8, seed in 0u64..1000) {
            let (lo, hi) = (a.min(b), a.max(b));
            let x = dequantize(&[lo], bits, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()[0];
            let y = dequantize(&[hi], bits, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()[0];
            prop_assert!(x <= y);
        }
    }
}
