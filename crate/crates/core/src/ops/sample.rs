//! Bilinear sampling with zero padding outside the grid.

use crate::tensor::Tensor;

/// The four integer neighbours of a fractional position and their weights.
///
/// Neighbours that fall outside the `h × w` grid have `index == None`, which
/// is how zero padding is expressed.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTaps {
    pub index: [Option<usize>; 4],
    pub weight: [f64; 4],
    pub dweight_dy: [f64; 4],
    pub dweight_dx: [f64; 4],
}

impl BilinearTaps {
    pub fn new(h: usize, w: usize, y: f64, x: f64) -> Self {
        let y0f = y.floor();
        let x0f = x.floor();
        let fy = y - y0f;
        let fx = x - x0f;
        let y0 = y0f as i64;
        let x0 = x0f as i64;
        let at = |yy: i64, xx: i64| -> Option<usize> {
            (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w)
                .then(|| yy as usize * w + xx as usize)
        };
        Self {
            index: [
                at(y0, x0),
                at(y0, x0 + 1),
                at(y0 + 1, x0),
                at(y0 + 1, x0 + 1),
            ],
            weight: [
                (1.0 - fy) * (1.0 - fx),
                (1.0 - fy) * fx,
                fy * (1.0 - fx),
                fy * fx,
            ],
            dweight_dy: [-(1.0 - fx), -fx, 1.0 - fx, fx],
            dweight_dx: [-(1.0 - fy), 1.0 - fy, -fy, fy],
        }
    }

    /// Interpolated value from a single `h × w` plane.
    #[inline]
    pub fn value(&self, plane: &[f64]) -> f64 {
        let mut v = 0.0;
        for k in 0..4 {
            if let Some(i) = self.index[k] {
                v += self.weight[k] * plane[i];
            }
        }
        v
    }

    /// Partial derivatives of [`Self::value`] with respect to `(y, x)`.
    #[inline]
    pub fn position_grad(&self, plane: &[f64]) -> (f64, f64) {
        let (mut gy, mut gx) = (0.0, 0.0);
        for k in 0..4 {
            if let Some(i) = self.index[k] {
                gy += self.dweight_dy[k] * plane[i];
                gx += self.dweight_dx[k] * plane[i];
            }
        }
        (gy, gx)
    }

    /// Adds `g * weight` into each in-bounds neighbour of `plane_grad`.
    #[inline]
    pub fn scatter(&self, plane_grad: &mut [f64], g: f64) {
        for k in 0..4 {
            if let Some(i) = self.index[k] {
                plane_grad[i] += self.weight[k] * g;
            }
        }
    }
}

/// Samples channel `c` of batch item `b` at fractional `(y, x)`.
pub fn bilinear_sample(input: &Tensor, y: f64, x: f64, b: usize, c: usize) -> f64 {
    let s = input.shape();
    let off = s.index(b, c, 0, 0);
    let plane = &input.data()[off..off + s.plane()];
    BilinearTaps::new(s.height, s.width, y, x).value(plane)
}

/// Value plus the gradient with respect to `(y, x)`.
pub fn bilinear_sample_with_grad(
    input: &Tensor,
    y: f64,
    x: f64,
    b: usize,
    c: usize,
) -> (f64, f64, f64) {
    let s = input.shape();
    let off = s.index(b, c, 0, 0);
    let plane = &input.data()[off..off + s.plane()];
    let taps = BilinearTaps::new(s.height, s.width, y, x);
    let (gy, gx) = taps.position_grad(plane);
    (taps.value(plane), gy, gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn grid() -> Tensor {
        // 2.0 above 4.0 in column 0
        Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![2.0, 7.0, 4.0, -1.0]).unwrap()
    }

    #[test]
    fn integer_coordinates_hit_grid_values() {
        let t = grid();
        assert_eq!(bilinear_sample(&t, 0.0, 0.0, 0, 0), 2.0);
        assert_eq!(bilinear_sample(&t, 0.0, 1.0, 0, 0), 7.0);
        assert_eq!(bilinear_sample(&t, 1.0, 0.0, 0, 0), 4.0);
        assert_eq!(bilinear_sample(&t, 1.0, 1.0, 0, 0), -1.0);
    }

    #[test]
    fn vertical_midpoint() {
        assert_eq!(bilinear_sample(&grid(), 0.5, 0.0, 0, 0), 3.0);
    }

    #[test]
    fn far_outside_is_zero() {
        assert_eq!(bilinear_sample(&grid(), -2.0, -2.0, 0, 0), 0.0);
        assert_eq!(bilinear_sample(&grid(), 5.0, 0.3, 0, 0), 0.0);
    }

    #[test]
    fn border_fades_to_zero_padding() {
        // halfway between row 1 (value 4) and the zero row below
        assert!((bilinear_sample(&grid(), 1.5, 0.0, 0, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn position_grad_matches_central_difference() {
        let t = grid();
        let (y, x) = (0.3, 0.6);
        let (_, gy, gx) = bilinear_sample_with_grad(&t, y, x, 0, 0);
        let h = 1e-6;
        let ny =
            (bilinear_sample(&t, y + h, x, 0, 0) - bilinear_sample(&t, y - h, x, 0, 0)) / (2.0 * h);
        let nx =
            (bilinear_sample(&t, y, x + h, 0, 0) - bilinear_sample(&t, y, x - h, 0, 0)) / (2.0 * h);
        assert!((gy - ny).abs() < 1e-8);
        assert!((gx - nx).abs() < 1e-8);
    }
}
