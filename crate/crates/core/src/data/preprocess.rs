use crate::mask::SegmentationMask;
use crate::nn::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bilinear resize of an `(H, W)` image.
pub fn resize_image<T: Scalar>(image: &Tensor<T>, size: (usize, usize)) -> Tensor<T> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if (h, w) == size {
        return image.clone();
    }
    let x = image.clone().reshape(&[1, 1, h, w]).expect("image reshape");
    kernels::resize_bilinear(&x, size.0, size.1).reshape(&[size.0, size.1]).expect("image reshape")
}

/// Nearest-neighbour resize, which keeps masks binary.
pub fn resize_mask(mask: &SegmentationMask, size: (usize, usize)) -> SegmentationMask {
    let (h, w) = mask.dims();
    if (h, w) == size {
        return mask.clone();
    }
    let src = |o: usize, n_out: usize, n_in: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    SegmentationMask::from_fn(size.0, size.1, |r, c| mask.get(src(r, size.0, h), src(c, size.1, w)))
}

/// Per-image min-max scaling to `[0, 1]`; a constant image maps to zeros.
pub fn min_max_normalize<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let lo = image.data().iter().copied().fold(T::infinity(), T::min);
    let hi = image.data().iter().copied().fold(T::neg_infinity(), T::max);
    let range = hi - lo;
    if !(range > T::zero()) {
        return Tensor::zeros(image.shape());
    }
    image.map(|v| (v - lo) / range)
}

pub fn preprocess<T: Scalar>(image: &Tensor<T>, size: (usize, usize), normalize: bool) -> Tensor<T> {
    let resized = resize_image(image, size);
    if normalize {
        min_max_normalize(&resized)
    } else {
        resized
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let img = Tensor::from_fn(&[5, 7], |i| (i as f64 * 0.1).sin());
        assert_eq!(resize_image(&img, (5, 7)), img);
        let m = SegmentationMask::from_fn(5, 7, |r, c| r > c);
        assert_eq!(resize_mask(&m, (5, 7)), m);
    }

    #[test]
    fn mask_resize_stays_binary_and_aligned() {
        let m = SegmentationMask::from_fn(8, 8, |r, c| r < 4 && c < 4);
        let up = resize_mask(&m, (16, 16));
        assert_eq!(up.count(), 64);
        assert!(up.get(7, 7) && !up.get(8, 8));
        let down = resize_mask(&up, (8, 8));
        assert_eq!(down, m);
    }

    #[test]
    fn constant_image_normalizes_to_zero() {
        let img = Tensor::full(&[4, 4], 0.3f32);
        assert!(preprocess(&img, (4, 4), true).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_range_is_unit() {
        let img = Tensor::from_fn(&[6, 6], |i| 2.0 + i as f64);
        let n = preprocess(&img, (12, 12), true);
        let lo = n.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = n.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }
}
