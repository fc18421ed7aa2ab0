use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Source taps for one output coordinate along one axis.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-center mapping: `src = (dst + 0.5) * in / out - 0.5`, clamped
/// to `[0, in - 1]`.
fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    let last = (input - 1) as f64;
    (0..output)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = src.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(input - 1),
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of a `[C, H, W]` image, channels independently.
pub fn resize_bilinear<T: Scalar>(
    image: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    image.expect_rank(3, "resize_bilinear", "image [C, H, W]")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Input(format!(
            "resize target must be nonempty, got {out_h}x{out_w}"
        )));
    }
    let &[c, h, w] = image.shape() else {
        unreachable!()
    };
    let rows = taps(h, out_h);
    let cols = taps(w, out_w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in src.chunks(h * w) {
        for r in &rows {
            let fy = T::from_f64_lossy(r.frac);
            let top = &plane[r.lo * w..(r.lo + 1) * w];
            let bottom = &plane[r.hi * w..(r.hi + 1) * w];
            for q in &cols {
                let fx = T::from_f64_lossy(q.frac);
                let upper = top[q.lo] + (top[q.hi] - top[q.lo]) * fx;
                let lower = bottom[q.lo] + (bottom[q.hi] - bottom[q.lo]) * fx;
                out.push(upper + (lower - upper) * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0)).unwrap()
    }

    // Tent-filter formulation: every source pixel contributes with weight
    // max(0, 1 - |dy|) * max(0, 1 - |dx|) around the clamped sample point.
    fn oracle(img: &Tensor<f64>, oh: usize, ow: usize) -> Vec<f64> {
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let mut out = Vec::new();
        for ch in 0..c {
            for oy in 0..oh {
                let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5)
                    .max(0.0)
                    .min((h - 1) as f64);
                for ox in 0..ow {
                    let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5)
                        .max(0.0)
                        .min((w - 1) as f64);
                    let mut acc = 0.0;
                    for y in 0..h {
                        let wy = (1.0 - (sy - y as f64).abs()).max(0.0);
                        for x in 0..w {
                            let wx = (1.0 - (sx - x as f64).abs()).max(0.0);
                            acc += wy * wx * img.data()[(ch * h + y) * w + x];
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn same_size_is_identity() {
        let img = seeded(&[3, 75, 75], 1);
        assert_eq!(resize_bilinear(&img, 75, 75).unwrap(), img);
    }

    #[test]
    fn constant_stays_constant() {
        let img = Tensor::<f32>::full(&[3, 150, 150], 0.37).unwrap();
        let out = resize_bilinear(&img, 75, 75).unwrap();
        assert_eq!(out.shape(), &[3, 75, 75]);
        assert!(out.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn matches_tent_oracle() {
        let img = seeded(&[1, 9, 9], 2);
        let out = resize_bilinear(&img, 5, 5).unwrap();
        for (a, e) in out.data().iter().zip(oracle(&img, 5, 5)) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        let img = seeded(&[2, 4, 7], 3);
        let out = resize_bilinear(&img, 9, 3).unwrap();
        for (a, e) in out.data().iter().zip(oracle(&img, 9, 3)) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn zero_target_is_rejected() {
        let img = seeded(&[1, 4, 4], 4);
        assert!(matches!(resize_bilinear(&img, 0, 4), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn constant_images_survive_any_scale(h in 1usize..40, w in 1usize..40, oh in 1usize..40, ow in 1usize..40, v in 0.0f64..1.0) {
            let img = Tensor::full(&[2, h, w], v).unwrap();
            let out = resize_bilinear(&img, oh, ow).unwrap();
            for &x in out.data() {
                prop_assert!((x - v).abs() < 1e-12);
            }
        }
    }
}
