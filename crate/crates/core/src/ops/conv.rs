//! Cross-correlation kernels: plain `conv2d` and the offset-sampled variant.
//!
//! Both lower the input to a column buffer laid out as
//! `[batch][in_ch][tap][out_pixel]` and then contract with the weights. Each
//! output element is accumulated over `(in_ch, ky, kx)` in that order starting
//! from zero, with the bias added last.

use crate::error::{shape_err, Result};
use crate::ops::sample::BilinearTaps;
use crate::parallel::{for_each_chunk, Exec};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        input: Shape,
        weight: Shape,
        bias: Shape,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(shape_err(OP, "stride must be >= 1"));
        }
        if weight.height == 0 || weight.width == 0 {
            return Err(shape_err(OP, format!("empty kernel {weight}")));
        }
        if weight.channels != input.channels {
            return Err(shape_err(
                OP,
                format!(
                    "input has {} channels but weight {weight} expects {}",
                    input.channels, weight.channels
                ),
            ));
        }
        if bias != Shape::new(1, weight.batch, 1, 1) {
            return Err(shape_err(
                OP,
                format!(
                    "bias {bias} does not match {} output channels",
                    weight.batch
                ),
            ));
        }
        let ph = input.height + 2 * padding;
        let pw = input.width + 2 * padding;
        if ph < weight.height || pw < weight.width {
            return Err(shape_err(
                OP,
                format!(
                    "kernel {}x{} larger than padded input {ph}x{pw}",
                    weight.height, weight.width
                ),
            ));
        }
        Ok(Self {
            batch: input.batch,
            in_ch: input.channels,
            out_ch: weight.batch,
            in_h: input.height,
            in_w: input.width,
            kh: weight.height,
            kw: weight.width,
            stride,
            padding,
            out_h: (ph - weight.height) / stride + 1,
            out_w: (pw - weight.width) / stride + 1,
        })
    }

    pub fn taps(&self) -> usize {
        self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_pixels(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn output_shape(&self) -> Shape {
        Shape::new(self.batch, self.out_ch, self.out_h, self.out_w)
    }

    pub fn offset_shape(&self) -> Shape {
        Shape::new(self.batch, 2 * self.taps(), self.out_h, self.out_w)
    }

    /// Undisplaced input coordinate of tap `(i, j)` for output `(oy, ox)`.
    #[inline]
    fn base(&self, oy: usize, ox: usize, i: usize, j: usize) -> (i64, i64) {
        (
            (oy * self.stride + i) as i64 - self.padding as i64,
            (ox * self.stride + j) as i64 - self.padding as i64,
        )
    }

    fn col_len(&self) -> usize {
        self.taps() * self.out_pixels()
    }
}

/// Column buffer for the integer-grid case.
pub fn im2col(g: &ConvGeom, input: &[f64], exec: Exec) -> Vec<f64> {
    let mut cols = vec![0.0; g.batch * g.in_ch * g.col_len()];
    let pin = g.in_pixels();
    for_each_chunk(exec, &mut cols, g.col_len(), |bc, chunk| {
        let plane = &input[bc * pin..(bc + 1) * pin];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let t = i * g.kw + j;
                let row = &mut chunk[t * g.out_pixels()..(t + 1) * g.out_pixels()];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let (y, x) = g.base(oy, ox, i, j);
                        if y >= 0 && x >= 0 && (y as usize) < g.in_h && (x as usize) < g.in_w {
                            row[oy * g.out_w + ox] = plane[y as usize * g.in_w + x as usize];
                        }
                    }
                }
            }
        }
    });
    cols
}

/// Bilinear taps for each `(batch, tap, out_pixel)` after displacement.
///
/// `offsets` has shape `(batch, 2·taps, out_h, out_w)` with channel `2t`
/// holding `dy` and `2t + 1` holding `dx` for tap `t = i·kw + j`.
pub fn offset_taps(g: &ConvGeom, offsets: &[f64], exec: Exec) -> Vec<BilinearTaps> {
    let p = g.out_pixels();
    let k = g.taps();
    let per_batch: Vec<Vec<BilinearTaps>> = crate::parallel::map_range(exec, g.batch, |b| {
        let off = &offsets[b * 2 * k * p..(b + 1) * 2 * k * p];
        let mut v = Vec::with_capacity(k * p);
        for i in 0..g.kh {
            for j in 0..g.kw {
                let t = i * g.kw + j;
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let pix = oy * g.out_w + ox;
                        let (by, bx) = g.base(oy, ox, i, j);
                        let y = by as f64 + off[2 * t * p + pix];
                        let x = bx as f64 + off[(2 * t + 1) * p + pix];
                        v.push(BilinearTaps::new(g.in_h, g.in_w, y, x));
                    }
                }
            }
        }
        v
    });
    per_batch.into_iter().flatten().collect()
}

/// Column buffer gathered through precomputed bilinear taps.
pub fn sampled_cols(g: &ConvGeom, input: &[f64], taps: &[BilinearTaps], exec: Exec) -> Vec<f64> {
    let mut cols = vec![0.0; g.batch * g.in_ch * g.col_len()];
    let pin = g.in_pixels();
    let kp = g.col_len();
    for_each_chunk(exec, &mut cols, kp, |bc, chunk| {
        let b = bc / g.in_ch;
        let plane = &input[bc * pin..(bc + 1) * pin];
        let bt = &taps[b * kp..(b + 1) * kp];
        for (c, tap) in chunk.iter_mut().zip(bt) {
            *c = tap.value(plane);
        }
    });
    cols
}

/// Contracts a column buffer with `weight` and adds `bias`.
pub fn contract(g: &ConvGeom, cols: &[f64], weight: &[f64], bias: &[f64], exec: Exec) -> Vec<f64> {
    let p = g.out_pixels();
    let k = g.taps();
    let mut out = vec![0.0; g.batch * g.out_ch * p];
    for_each_chunk(exec, &mut out, p, |boc, plane| {
        let b = boc / g.out_ch;
        let oc = boc % g.out_ch;
        for ic in 0..g.in_ch {
            let wrow = &weight[(oc * g.in_ch + ic) * k..(oc * g.in_ch + ic + 1) * k];
            let cbase = (b * g.in_ch + ic) * k * p;
            for (t, &w) in wrow.iter().enumerate() {
                let col = &cols[cbase + t * p..cbase + (t + 1) * p];
                for (o, &c) in plane.iter_mut().zip(col) {
                    *o += w * c;
                }
            }
        }
        let bv = bias[oc];
        for o in plane.iter_mut() {
            *o += bv;
        }
    });
    out
}

/// Gradients of [`contract`] with respect to weight, bias and the columns.
pub fn contract_backward(
    g: &ConvGeom,
    cols: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    exec: Exec,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = g.out_pixels();
    let k = g.taps();

    let mut gw = vec![0.0; g.out_ch * g.in_ch * k];
    for_each_chunk(exec, &mut gw, g.in_ch * k, |oc, row| {
        for b in 0..g.batch {
            let go = &grad_out[(b * g.out_ch + oc) * p..(b * g.out_ch + oc + 1) * p];
            for (ict, acc) in row.iter_mut().enumerate() {
                let col = &cols[(b * g.in_ch * k + ict) * p..(b * g.in_ch * k + ict + 1) * p];
                *acc += col.iter().zip(go).map(|(c, d)| c * d).sum::<f64>();
            }
        }
    });

    let mut gb = vec![0.0; g.out_ch];
    for (oc, acc) in gb.iter_mut().enumerate() {
        for b in 0..g.batch {
            *acc += grad_out[(b * g.out_ch + oc) * p..(b * g.out_ch + oc + 1) * p]
                .iter()
                .sum::<f64>();
        }
    }

    let mut gc = vec![0.0; cols.len()];
    for_each_chunk(exec, &mut gc, k * p, |bc, chunk| {
        let b = bc / g.in_ch;
        let ic = bc % g.in_ch;
        for t in 0..k {
            let dst = &mut chunk[t * p..(t + 1) * p];
            for oc in 0..g.out_ch {
                let w = weight[(oc * g.in_ch + ic) * k + t];
                let go = &grad_out[(b * g.out_ch + oc) * p..(b * g.out_ch + oc + 1) * p];
                for (d, &s) in dst.iter_mut().zip(go) {
                    *d += w * s;
                }
            }
        }
    });
    (gw, gb, gc)
}

/// Scatters integer-grid column gradients back to the input.
pub fn col2im(g: &ConvGeom, grad_cols: &[f64], exec: Exec) -> Vec<f64> {
    let pin = g.in_pixels();
    let p = g.out_pixels();
    let mut gi = vec![0.0; g.batch * g.in_ch * pin];
    for_each_chunk(exec, &mut gi, pin, |bc, plane| {
        let gc = &grad_cols[bc * g.col_len()..(bc + 1) * g.col_len()];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let t = i * g.kw + j;
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let (y, x) = g.base(oy, ox, i, j);
                        if y >= 0 && x >= 0 && (y as usize) < g.in_h && (x as usize) < g.in_w {
                            plane[y as usize * g.in_w + x as usize] +=
                                gc[t * p + oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    });
    gi
}

/// Scatters sampled-column gradients to the input and the offset field.
pub fn sampled_backward(
    g: &ConvGeom,
    input: &[f64],
    taps: &[BilinearTaps],
    grad_cols: &[f64],
    exec: Exec,
) -> (Vec<f64>, Vec<f64>) {
    let pin = g.in_pixels();
    let p = g.out_pixels();
    let k = g.taps();
    let kp = g.col_len();

    let mut gi = vec![0.0; g.batch * g.in_ch * pin];
    for_each_chunk(exec, &mut gi, pin, |bc, plane| {
        let b = bc / g.in_ch;
        let gc = &grad_cols[bc * kp..(bc + 1) * kp];
        for (tap, &d) in taps[b * kp..(b + 1) * kp].iter().zip(gc) {
            tap.scatter(plane, d);
        }
    });

    let mut goff = vec![0.0; g.batch * 2 * kp];
    for_each_chunk(exec, &mut goff, 2 * kp, |b, chunk| {
        for ic in 0..g.in_ch {
            let plane = &input[(b * g.in_ch + ic) * pin..(b * g.in_ch + ic + 1) * pin];
            let gc = &grad_cols[(b * g.in_ch + ic) * kp..(b * g.in_ch + ic + 1) * kp];
            for t in 0..k {
                for pix in 0..p {
                    let d = gc[t * p + pix];
                    if d == 0.0 {
                        continue;
                    }
                    let (gy, gx) = taps[b * kp + t * p + pix].position_grad(plane);
                    chunk[2 * t * p + pix] += d * gy;
                    chunk[(2 * t + 1) * p + pix] += d * gx;
                }
            }
        }
    });
    (gi, goff)
}

/// Forward `conv2d` without a tape.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    exec: Exec,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), weight.shape(), bias.shape(), stride, padding)?;
    let cols = im2col(&g, input.data(), exec);
    Tensor::from_vec(
        g.output_shape(),
        contract(&g, &cols, weight.data(), bias.data(), exec),
    )
}

/// Forward offset-sampled convolution without a tape.
pub fn align_conv_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    offsets: &Tensor,
    stride: usize,
    padding: usize,
    exec: Exec,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), weight.shape(), bias.shape(), stride, padding)?;
    check_offsets(&g, offsets.shape())?;
    let taps = offset_taps(&g, offsets.data(), exec);
    let cols = sampled_cols(&g, input.data(), &taps, exec);
    Tensor::from_vec(
        g.output_shape(),
        contract(&g, &cols, weight.data(), bias.data(), exec),
    )
}

pub fn check_offsets(g: &ConvGeom, offsets: Shape) -> Result<()> {
    if offsets != g.offset_shape() {
        return Err(shape_err(
            "align_conv",
            format!(
                "offset field {offsets} does not match expected {}",
                g.offset_shape()
            ),
        ));
    }
    Ok(())
}
