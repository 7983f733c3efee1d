//! Shape and centre alignment offsets for the offset-sampled convolution.
//!
//! Shape alignment stretches the kernel taps so that a `k_h × k_w` kernel on
//! a stride-`S` grid spans the best anchor's `h_a × w_a` pixels:
//!
//! ```text
//! dy(i) = (h_a / (S·k_h) − 1) · (i − k_h/2 + 0.5)
//! dx(j) = (w_a / (S·k_w) − 1) · (j − k_w/2 + 0.5)
//! ```
//!
//! Centre alignment shifts every tap by the predicted centre residual:
//! `(dy, dx) = (y_r / S, x_r / S)`.

use std::fmt::Write as _;

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Shape, Tensor};

/// Per-position, per-tap `(dy, dx)` offsets in feature-grid units.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    height: usize,
    width: usize,
    taps: usize,
    /// `[(y·W + x)·taps + t] → (dy, dx)`
    data: Vec<(f64, f64)>,
}

impl OffsetField {
    pub fn zeros(height: usize, width: usize, taps: usize) -> Self {
        Self {
            height,
            width,
            taps,
            data: vec![(0.0, 0.0); height * width * taps],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn get(&self, y: usize, x: usize, tap: usize) -> (f64, f64) {
        self.data[(y * self.width + x) * self.taps + tap]
    }

    pub fn set(&mut self, y: usize, x: usize, tap: usize, v: (f64, f64)) {
        self.data[(y * self.width + x) * self.taps + tap] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|(a, b)| a.is_finite() && b.is_finite())
    }

    /// Element-wise sum of two fields of equal layout.
    pub fn combine(&self, other: &OffsetField) -> Result<OffsetField> {
        if (self.height, self.width, self.taps) != (other.height, other.width, other.taps) {
            return Err(shape_err("OffsetField::combine", "layouts differ"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.0 + b.0, a.1 + b.1))
            .collect();
        Ok(Self { data, ..*self })
    }

    /// `(1, 2·taps, H, W)` tensor in the layout the convolution expects.
    pub fn to_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(Shape::new(1, 2 * self.taps, self.height, self.width));
        for y in 0..self.height {
            for x in 0..self.width {
                for k in 0..self.taps {
                    let (dy, dx) = self.get(y, x, k);
                    t.set(0, 2 * k, y, x, dy);
                    t.set(0, 2 * k + 1, y, x, dx);
                }
            }
        }
        t
    }

    /// Stacks per-image fields into one `(B, 2·taps, H, W)` tensor.
    pub fn stack(fields: &[OffsetField]) -> Result<Tensor> {
        let first = fields
            .first()
            .ok_or_else(|| arg_err("OffsetField::stack", "no fields"))?;
        let per = 2 * first.taps * first.height * first.width;
        let mut data = Vec::with_capacity(per * fields.len());
        for f in fields {
            if (f.height, f.width, f.taps) != (first.height, first.width, first.taps) {
                return Err(shape_err("OffsetField::stack", "layouts differ"));
            }
            data.extend(f.to_tensor().into_data());
        }
        Tensor::from_vec(
            Shape::new(fields.len(), 2 * first.taps, first.height, first.width),
            data,
        )
    }

    /// Comma-separated export: header then one row per position with
    /// `y,x,dy0,dx0,dy1,dx1,...`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("y,x");
        for k in 0..self.taps {
            let _ = write!(s, ",dy{k},dx{k}");
        }
        s.push('\n');
        for y in 0..self.height {
            for x in 0..self.width {
                let _ = write!(s, "{y},{x}");
                for k in 0..self.taps {
                    let (dy, dx) = self.get(y, x, k);
                    let _ = write!(s, ",{dy},{dx}");
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Offset along one kernel axis for tap `i` of `k`.
#[inline]
pub fn shape_offset(anchor_extent: f64, stride: f64, k: usize, i: usize) -> f64 {
    (anchor_extent / (stride * k as f64) - 1.0) * (i as f64 - k as f64 / 2.0 + 0.5)
}

/// Shape-alignment offsets from the per-position best anchor `(h_a, w_a)`.
///
/// `best_hw` is row-major over an `height × width` grid.
pub fn shape_align_offsets(
    best_hw: &[(f64, f64)],
    height: usize,
    width: usize,
    stride: usize,
    kernel: (usize, usize),
) -> Result<OffsetField> {
    const OP: &str = "shape_align_offsets";
    if stride == 0 {
        return Err(arg_err(OP, "stride must be >= 1"));
    }
    if kernel.0 == 0 || kernel.1 == 0 {
        return Err(arg_err(OP, "kernel sizes must be >= 1"));
    }
    if best_hw.len() != height * width {
        return Err(shape_err(
            OP,
            format!("{} anchors for a {height}x{width} grid", best_hw.len()),
        ));
    }
    if let Some(&(h, w)) = best_hw.iter().find(|(h, w)| !(*h > 0.0 && *w > 0.0)) {
        return Err(arg_err(
            OP,
            format!("anchor size must be positive, got {h}x{w}"),
        ));
    }
    let (kh, kw) = kernel;
    let s = stride as f64;
    let mut field = OffsetField::zeros(height, width, kh * kw);
    for (pos, &(ha, wa)) in best_hw.iter().enumerate() {
        for i in 0..kh {
            let dy = shape_offset(ha, s, kh, i);
            for j in 0..kw {
                let dx = shape_offset(wa, s, kw, j);
                field.data[pos * kh * kw + i * kw + j] = (dy, dx);
            }
        }
    }
    Ok(field)
}

/// Index of the highest score, earliest index on ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Picks the most confident anchor at every position.
///
/// `scores` is `[position][anchor]` flattened with `templates.len()` anchors
/// per position; `templates` holds each anchor's `(h, w)`. Returns the chosen
/// `(index, (h, w))` per position.
pub fn select_best_anchor(
    scores: &[f64],
    templates: &[(f64, f64)],
) -> Result<Vec<(usize, (f64, f64))>> {
    const OP: &str = "select_best_anchor";
    let a = templates.len();
    if a == 0 {
        return Err(arg_err(OP, "empty anchor set"));
    }
    if !scores.len().is_multiple_of(a) {
        return Err(shape_err(
            OP,
            format!("{} scores for {a} anchors per position", scores.len()),
        ));
    }
    Ok(scores
        .chunks(a)
        .map(|row| {
            let i = argmax_first(row).expect("non-empty");
            (i, templates[i])
        })
        .collect())
}

/// Centre-alignment offsets from pixel residuals `(x_r, y_r)`, replicated over `taps`.
pub fn center_align_offsets(
    residuals: &[(f64, f64)],
    height: usize,
    width: usize,
    stride: usize,
    taps: usize,
) -> Result<OffsetField> {
    const OP: &str = "center_align_offsets";
    if stride == 0 {
        return Err(arg_err(OP, "stride must be >= 1"));
    }
    if residuals.len() != height * width {
        return Err(shape_err(
            OP,
            format!("{} residuals for a {height}x{width} grid", residuals.len()),
        ));
    }
    let s = stride as f64;
    let mut field = OffsetField::zeros(height, width, taps);
    for (pos, &(xr, yr)) in residuals.iter().enumerate() {
        for t in 0..taps {
            field.data[pos * taps + t] = (yr / s, xr / s);
        }
    }
    Ok(field)
}
