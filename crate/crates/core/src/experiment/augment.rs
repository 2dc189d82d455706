//! Training-time regularizers: cutout and drop path.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Zeroes one `size × size` square (clipped at the borders) centred at a
/// uniformly drawn pixel, across all channels of a `[c, h, w]` image.
pub fn cutout(image: &mut [f64], [c, h, w]: [usize; 3], size: usize, rng: &mut impl Rng) {
    if size == 0 || h == 0 || w == 0 {
        return;
    }
    let cy = rng.random_range(0..h) as isize;
    let cx = rng.random_range(0..w) as isize;
    let half = (size / 2) as isize;
    let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    let (y0, y1) = (clip(cy - half, h), clip(cy - half + size as isize, h));
    let (x0, x1) = (clip(cx - half, w), clip(cx - half + size as isize, w));
    for ch in 0..c {
        for y in y0..y1 {
            image[(ch * h + y) * w + x0..(ch * h + y) * w + x1].fill(0.0);
        }
    }
}

/// Applies [`cutout`] independently to every image of a `[n, c, h, w]` batch.
pub fn cutout_batch(images: &mut Tensor, size: usize, rng: &mut impl Rng) -> Result<()> {
    let [n, c, h, w] = images.dims4()?;
    let per = c * h * w;
    for b in 0..n {
        cutout(
            &mut images.data_mut()[b * per..(b + 1) * per],
            [c, h, w],
            size,
            rng,
        );
    }
    Ok(())
}

/// Per-sample keep mask: `1/(1-prob)` with probability `1-prob`, else 0.
pub fn drop_path_mask(n: usize, prob: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 - prob;
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect()
}

/// Drops whole samples of a branch output; the identity outside training or
/// when `prob` is 0.
pub fn drop_path(
    graph: &mut Graph,
    x: Var,
    prob: f64,
    rng: &mut impl Rng,
    training: bool,
) -> Result<Var> {
    if !training || prob <= 0.0 {
        return Ok(x);
    }
    let n = graph.shape(x)[0];
    let mask = drop_path_mask(n, prob, rng);
    graph.sample_mask(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn cutout_zeroes_at_most_a_square(seed in 0u64..1000, size in 0usize..10, h in 1usize..12, w in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut img = vec![1.0; 2 * h * w];
            cutout(&mut img, [2, h, w], size, &mut rng);
            prop_assert_eq!(img.len(), 2 * h * w);
            let zeros0 = img[..h * w].iter().filter(|&&v| v == 0.0).count();
            let zeros1 = img[h * w..].iter().filter(|&&v| v == 0.0).count();
            prop_assert!(zeros0 <= size * size);
            prop_assert_eq!(zeros0, zeros1);
        }
    }

    #[test]
    fn drop_path_is_identity_in_eval() {
        let mut g = Graph::inference();
        let x = g.input(Tensor::full([4, 1, 2, 2], 1.5));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(drop_path(&mut g, x, 0.3, &mut rng, false).unwrap(), x);
    }

    #[test]
    fn drop_path_rescales_survivors() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full([200, 1, 1, 1], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = drop_path(&mut g, x, 0.25, &mut rng, true).unwrap();
        let vals = g.value(y).data();
        assert!(vals
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
        let mean = vals.iter().sum::<f64>() / 200.0;
        assert!((mean - 1.0).abs() < 0.2);
    }
}
