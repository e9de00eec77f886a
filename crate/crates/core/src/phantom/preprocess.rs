use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

use super::{PhantomError, Result};

fn dims(img: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    img.chw()
        .map_err(|_| PhantomError::Invalid(format!("expected [C, H, W], got {:?}", img.shape())))
}

/// Per-channel zero mean and unit variance (population variance).
pub fn normalize_input(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, _, _) = dims(img)?;
    let mut out = img.clone();
    for ch in 0..c {
        let x = img.channel(ch);
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        if !(var > 1e-12) {
            return Err(PhantomError::Invalid(format!("channel {ch} has zero variance")));
        }
        let inv = 1.0 / var.sqrt();
        for (o, &v) in out.channel_mut(ch).iter_mut().zip(x) {
            *o = ((v as f64 - mean) * inv) as f32;
        }
    }
    Ok(out)
}

/// `size × size` window of every channel at `(y, x)`.
pub fn crop(img: &Tensor<f32>, y: usize, x: usize, size: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(img)?;
    if y + size > h || x + size > w {
        return Err(PhantomError::Invalid(format!(
            "crop {size}x{size} at ({y}, {x}) exceeds {h}x{w}"
        )));
    }
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        let plane = img.channel(ch);
        for r in 0..size {
            data.extend_from_slice(&plane[(y + r) * w + x..(y + r) * w + x + size]);
        }
    }
    Ok(Tensor::new(vec![c, size, size], data).expect("consistent crop"))
}

/// `count` random top-left corners for `patch × patch` windows.
pub fn patch_offsets(h: usize, w: usize, patch: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    if patch == 0 || patch > h || patch > w {
        return Err(PhantomError::Invalid(format!("patch {patch} does not fit {h}x{w}")));
    }
    Ok((0..count)
        .map(|_| (rng.random_range(0..=h - patch), rng.random_range(0..=w - patch)))
        .collect())
}

/// As many random patches as whole tiles fit in the image.
pub fn to_patches(img: &Tensor<f32>, patch: usize, seed: u64) -> Result<Vec<Tensor<f32>>> {
    let (_, h, w) = dims(img)?;
    if patch == 0 || patch > h || patch > w {
        return Err(PhantomError::Invalid(format!("patch {patch} larger than image {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patch_offsets(h, w, patch, (h / patch) * (w / patch), &mut rng)?
        .into_iter()
        .map(|(y, x)| crop(img, y, x, patch))
        .collect()
}

/// Element `k` of the dihedral group on square images: `k % 4`
/// counter-clockwise quarter turns, followed by a horizontal flip when
/// `k >= 4`.
pub fn dihedral(img: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(img)?;
    if h != w {
        return Err(PhantomError::Invalid(format!("dihedral transforms need a square image, got {h}x{w}")));
    }
    if k >= 8 {
        return Err(PhantomError::Invalid(format!("transform index {k} not in 0..8")));
    }
    let n = h;
    let mut out = Tensor::zeros(&[c, n, n]);
    for ch in 0..c {
        let src = img.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..n {
            for x in 0..n {
                // Output (y, x) after the optional flip reads the rotated
                // image at (y, x'), which reads the source after undoing
                // the quarter turns.
                let xr = if k >= 4 { n - 1 - x } else { x };
                let (mut sy, mut sx) = (y, xr);
                for _ in 0..k % 4 {
                    // Inverse of one counter-clockwise turn.
                    let t = sy;
                    sy = sx;
                    sx = n - 1 - t;
                }
                dst[y * n + x] = src[sy * n + sx];
            }
        }
    }
    Ok(out)
}

/// Index of the inverse transform of [`dihedral`] element `k`.
pub fn dihedral_inverse(k: usize) -> usize {
    if k < 4 {
        (4 - k) % 4
    } else {
        k
    }
}

/// All eight dihedral images of a square patch, in index order.
pub fn augment8(img: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    (0..8).map(|k| dihedral(img, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, n: usize) -> Tensor<f32> {
        Tensor::from_fn(&[c, n, n], |i| i as f32)
    }

    #[test]
    fn group_inverse() {
        let t = ramp(2, 5);
        let imgs = augment8(&t).unwrap();
        for (k, im) in imgs.iter().enumerate() {
            assert_eq!(dihedral(im, dihedral_inverse(k)).unwrap(), t, "k={k}");
        }
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(imgs[i], imgs[j]);
            }
        }
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        // [[0,1],[2,3]] turned counter-clockwise is [[1,3],[0,2]].
        let t = Tensor::from_fn(&[1, 2, 2], |i| i as f32);
        assert_eq!(dihedral(&t, 1).unwrap().data(), &[1.0, 3.0, 0.0, 2.0]);
    }

    #[test]
    fn non_square_rejected() {
        let t = Tensor::<f32>::zeros(&[1, 4, 5]);
        assert!(augment8(&t).is_err());
    }

    #[test]
    fn patches() {
        let t = ramp(1, 8);
        assert_eq!(to_patches(&t, 8, 1).unwrap(), vec![t.clone()]);
        let p = to_patches(&t, 3, 5).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|q| q.shape() == [1, 3, 3]));
        assert_eq!(p, to_patches(&t, 3, 5).unwrap());
        assert!(to_patches(&t, 9, 1).is_err());
    }

    #[test]
    fn normalize_rejects_constant() {
        let t = Tensor::<f32>::full(&[2, 4, 4], 3.0);
        assert!(normalize_input(&t).is_err());
    }
}
