//! 3D convolution kernels on channel-first single-sample volumes.
//!
//! Convolution is lowered to a matrix product: the input is unfolded into a
//! `[C_in * k^3, voxels_out]` column matrix and multiplied by the weight viewed
//! as `[C_out, C_in * k^3]`. The column matrix is rebuilt during backward
//! rather than kept alive on the tape.

use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeometry {
    /// Geometry for zero "same" padding, `pad = dilation * (k - 1) / 2`.
    ///
    /// With stride 1 the output extent equals the input extent; with stride 2
    /// an even extent is halved.
    pub fn same(
        input_shape: &[usize],
        weight_shape: &[usize],
        dilation: usize,
        stride: usize,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::arg(
                "conv3d",
                format!("input must be [C,D,H,W], got {input_shape:?}"),
            ));
        }
        if weight_shape.len() != 5 {
            return Err(Error::arg(
                "conv3d",
                format!("weight must be [C_out,C_in,k,k,k], got {weight_shape:?}"),
            ));
        }
        let k = weight_shape[2];
        if weight_shape[3] != k || weight_shape[4] != k {
            return Err(Error::arg("conv3d", format!("kernel must be cubic, got {weight_shape:?}")));
        }
        if k % 2 == 0 {
            return Err(Error::arg("conv3d", format!("kernel size must be odd, got {k}")));
        }
        if weight_shape[1] != input_shape[0] {
            return Err(Error::shape("conv3d", input_shape, weight_shape));
        }
        if dilation == 0 || stride == 0 {
            return Err(Error::arg("conv3d", "dilation and stride must be positive"));
        }
        let pad = dilation * (k - 1) / 2;
        let reach = dilation * (k - 1);
        let mut out_dims = [0; 3];
        for (o, &i) in out_dims.iter_mut().zip(&input_shape[1..]) {
            *o = (i + 2 * pad - reach - 1) / stride + 1;
        }
        Ok(Self {
            c_in: input_shape[0],
            c_out: weight_shape[0],
            kernel: k,
            dilation,
            stride,
            pad,
            in_dims: [input_shape[1], input_shape[2], input_shape[3]],
            out_dims,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.c_out, self.out_dims[0], self.out_dims[1], self.out_dims[2]]
    }

    fn rows(&self) -> usize {
        self.c_in * self.kernel.pow(3)
    }

    fn voxels_out(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn voxels_in(&self) -> usize {
        self.in_dims.iter().product()
    }

    /// 1x1x1 stride-1 convolutions read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Output index range `[lo, hi)` along one axis whose input coordinate
    /// `o * stride + offset - pad` is in bounds.
    fn valid_range(&self, axis: usize, offset: usize) -> (usize, usize) {
        let (n_in, n_out, s) = (self.in_dims[axis] as isize, self.out_dims[axis] as isize, self.stride as isize);
        let shift = offset as isize - self.pad as isize;
        // o * s + shift >= 0  and  o * s + shift < n_in
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi = if n_in - shift <= 0 { 0 } else { ((n_in - shift - 1) / s + 1).min(n_out) };
        (lo.max(0) as usize, hi.max(lo.max(0)) as usize)
    }
}

/// Output z-planes `[z_lo, z_hi)` processed together, sized so the column
/// tile stays cache resident.
const TILE_ELEMS: usize = 1 << 17;

fn z_tiles(g: &ConvGeometry) -> impl Iterator<Item = (usize, usize)> {
    let per_plane = g.rows() * g.out_dims[1] * g.out_dims[2];
    let step = (TILE_ELEMS / per_plane.max(1)).max(1);
    let depth = g.out_dims[0];
    (0..depth).step_by(step).map(move |z| (z, (z + step).min(depth)))
}

/// Visits every in-bounds read of output z-planes `[z_lo, z_hi)`.
/// `visit(col_at, in_at, len)` receives runs contiguous in the tile-local
/// column matrix; the input steps by `stride` within a run.
fn for_each_run(g: &ConvGeometry, (z_lo, z_hi): (usize, usize), mut visit: impl FnMut(usize, usize, usize)) {
    let k = g.kernel;
    let [_, ih, iw] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let (s, d, p) = (g.stride, g.dilation, g.pad);
    let vin = g.voxels_in();
    let tile = (z_hi - z_lo) * oh * ow;
    for ci in 0..g.c_in {
        for kz in 0..k {
            let (z0, z1) = g.valid_range(0, kz * d);
            let (z0, z1) = (z0.max(z_lo), z1.min(z_hi));
            for ky in 0..k {
                let (y0, y1) = g.valid_range(1, ky * d);
                for kx in 0..k {
                    let (x0, x1) = g.valid_range(2, kx * d);
                    if x1 <= x0 {
                        continue;
                    }
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    for oz in z0..z1 {
                        let iz = oz * s + kz * d - p;
                        for oy in y0..y1 {
                            let iy = oy * s + ky * d - p;
                            let ix = x0 * s + kx * d - p;
                            let col_at = row * tile + ((oz - z_lo) * oh + oy) * ow + x0;
                            let in_at = ci * vin + (iz * ih + iy) * iw + ix;
                            visit(col_at, in_at, x1 - x0);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T], z: (usize, usize), col: &mut Vec<T>) {
    let tile = (z.1 - z.0) * g.out_dims[1] * g.out_dims[2];
    col.clear();
    col.resize(g.rows() * tile, T::zero());
    let s = g.stride;
    for_each_run(g, z, |c, i, n| {
        if s == 1 {
            col[c..c + n].copy_from_slice(&input[i..i + n]);
        } else {
            for t in 0..n {
                col[c + t] = input[i + t * s];
            }
        }
    });
}

fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], z: (usize, usize), grad_in: &mut [T]) {
    let s = g.stride;
    for_each_run(g, z, |c, i, n| {
        if s == 1 {
            for (dst, &src) in grad_in[i..i + n].iter_mut().zip(&col[c..c + n]) {
                *dst = *dst + src;
            }
        } else {
            for t in 0..n {
                grad_in[i + t * s] = grad_in[i + t * s] + col[c + t];
            }
        }
    });
}

fn plane_len(g: &ConvGeometry) -> usize {
    g.out_dims[1] * g.out_dims[2]
}

pub fn conv3d_forward<T: Scalar>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let vout = g.voxels_out();
    let mut out = Vec::with_capacity(g.c_out * vout);
    for &b in bias {
        out.extend(std::iter::repeat(b).take(vout));
    }
    accumulate_conv(g, input, weight, &mut out);
    out
}

/// `out += conv(input, weight)` without bias.
fn accumulate_conv<T: Scalar>(g: &ConvGeometry, input: &[T], weight: &[T], out: &mut [T]) {
    let vout = g.voxels_out();
    let rows = g.rows();
    if g.is_pointwise() {
        T::gemm(g.c_out, rows, vout, weight, (rows as isize, 1), input, (vout as isize, 1), T::one(), out, (vout as isize, 1));
        return;
    }
    let mut col = Vec::new();
    for z in z_tiles(g) {
        im2col(g, input, z, &mut col);
        let tile = (z.1 - z.0) * plane_len(g);
        T::gemm(
            g.c_out,
            rows,
            tile,
            weight,
            (rows as isize, 1),
            &col,
            (tile as isize, 1),
            T::one(),
            &mut out[z.0 * plane_len(g)..],
            (vout as isize, 1),
        );
    }
}

/// Kernel of the adjoint convolution: channels swapped, taps reversed.
fn adjoint_weight<T: Scalar>(g: &ConvGeometry, weight: &[T]) -> Vec<T> {
    let taps = g.kernel.pow(3);
    let mut out = vec![T::zero(); weight.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let src = &weight[(co * g.c_in + ci) * taps..][..taps];
            let dst = &mut out[(ci * g.c_out + co) * taps..][..taps];
            for (t, &w) in src.iter().enumerate() {
                dst[taps - 1 - t] = w;
            }
        }
    }
    out
}

/// Gradients are accumulated into whichever of the optional buffers are given.
pub fn conv3d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_in: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let vout = g.voxels_out();
    let rows = g.rows();
    if let Some(gb) = grad_bias {
        for (co, b) in gb.iter_mut().enumerate() {
            let s: T = grad_out[co * vout..(co + 1) * vout].iter().copied().sum();
            *b = *b + s;
        }
    }
    if g.is_pointwise() {
        if let Some(gw) = grad_weight {
            T::gemm(g.c_out, vout, rows, grad_out, (vout as isize, 1), input, (1, vout as isize), T::one(), gw, (rows as isize, 1));
        }
        if let Some(gi) = grad_in {
            T::gemm(rows, g.c_out, vout, weight, (1, rows as isize), grad_out, (vout as isize, 1), T::one(), gi, (vout as isize, 1));
        }
        return;
    }
    let mut col = Vec::new();
    if let Some(gw) = grad_weight {
        // Few output channels leave the gemm starved; dot products win there.
        if g.stride == 1 && g.c_out <= 8 {
            weight_grad_direct(g, input, grad_out, gw);
        } else {
            for z in z_tiles(g) {
                im2col(g, input, z, &mut col);
                let tile = (z.1 - z.0) * plane_len(g);
                // gw^T = col @ grad_out^T keeps the long axis contiguous in both.
                T::gemm(
                    rows,
                    tile,
                    g.c_out,
                    &col,
                    (tile as isize, 1),
                    &grad_out[z.0 * plane_len(g)..],
                    (1, vout as isize),
                    T::one(),
                    gw,
                    (1, rows as isize),
                );
            }
        }
    }
    if let Some(gi) = grad_in {
        if g.stride == 1 {
            // Same padding with stride 1: the adjoint is again a same convolution.
            let adj = ConvGeometry { c_in: g.c_out, c_out: g.c_in, ..*g };
            accumulate_conv(&adj, grad_out, &adjoint_weight(g, weight), gi);
            return;
        }
        for z in z_tiles(g) {
            let tile = (z.1 - z.0) * plane_len(g);
            col.clear();
            col.resize(rows * tile, T::zero());
            T::gemm(
                rows,
                g.c_out,
                tile,
                weight,
                (1, rows as isize),
                &grad_out[z.0 * plane_len(g)..],
                (vout as isize, 1),
                T::zero(),
                &mut col,
                (tile as isize, 1),
            );
            col2im(g, &col, z, gi);
        }
    }
}

/// Dot product with independent lane accumulators so it vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const L: usize = 8;
    let mut lanes = [T::zero(); L];
    let (ca, cb) = (a.chunks_exact(L), b.chunks_exact(L));
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..L {
            lanes[i] = lanes[i] + x[i] * y[i];
        }
    }
    let mut s = lanes.iter().fold(T::zero(), |acc, &v| acc + v);
    for (&x, &y) in ta.iter().zip(tb) {
        s = s + x * y;
    }
    s
}

/// Stride-1 weight gradient without the column matrix: every tap is a sum of
/// dot products between input rows and output-gradient rows.
fn weight_grad_direct<T: Scalar>(g: &ConvGeometry, input: &[T], grad_out: &[T], gw: &mut [T]) {
    let k = g.kernel;
    let [_, ih, iw] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let (d, p) = (g.dilation, g.pad);
    let (vin, vout, rows) = (g.voxels_in(), g.voxels_out(), g.rows());
    for ci in 0..g.c_in {
        let x = &input[ci * vin..(ci + 1) * vin];
        for kz in 0..k {
            let (z0, z1) = g.valid_range(0, kz * d);
            for ky in 0..k {
                let (y0, y1) = g.valid_range(1, ky * d);
                for kx in 0..k {
                    let (x0, x1) = g.valid_range(2, kx * d);
                    if x1 <= x0 {
                        continue;
                    }
                    let n = x1 - x0;
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    for co in 0..g.c_out {
                        let go = &grad_out[co * vout..(co + 1) * vout];
                        let mut acc = T::zero();
                        for oz in z0..z1 {
                            let iz = oz + kz * d - p;
                            for oy in y0..y1 {
                                let iy = oy + ky * d - p;
                                let xi = (iz * ih + iy) * iw + x0 + kx * d - p;
                                let oi = (oz * oh + oy) * ow + x0;
                                acc = acc + dot(&x[xi..xi + n], &go[oi..oi + n]);
                            }
                        }
                        gw[co * rows + row] = gw[co * rows + row] + acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-deep loop, independent of the im2col path.
    fn naive(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let [od, oh, ow] = g.out_dims;
        let [id, ih, iw] = g.in_dims;
        let k = g.kernel;
        let mut out = vec![0.0; g.c_out * od * oh * ow];
        for co in 0..g.c_out {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..g.c_in {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * g.stride + kz * g.dilation) as isize - g.pad as isize;
                                        let iy = (y * g.stride + ky * g.dilation) as isize - g.pad as isize;
                                        let ix = (x * g.stride + kx * g.dilation) as isize - g.pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= id || iy >= ih || ix >= iw {
                                            continue;
                                        }
                                        let w = weight[(((co * g.c_in + ci) * k + kz) * k + ky) * k + kx];
                                        acc += w * input[((ci * id + iz) * ih + iy) * iw + ix];
                                    }
                                }
                            }
                        }
                        out[((co * od + z) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn matches_direct_loop() {
        for &(dil, stride, k, dims) in &[
            (1, 1, 3, [5, 4, 6]),
            (2, 1, 3, [6, 6, 6]),
            (4, 1, 3, [5, 7, 6]),
            (1, 2, 3, [6, 4, 8]),
            (1, 1, 1, [3, 3, 3]),
            (1, 1, 5, [4, 5, 4]),
        ] {
            let (ci, co) = (3, 2);
            let g = ConvGeometry::same(&[ci, dims[0], dims[1], dims[2]], &[co, ci, k, k, k], dil, stride).unwrap();
            let input = pseudo(ci * dims.iter().product::<usize>(), 1);
            let weight = pseudo(co * ci * k * k * k, 2);
            let bias = pseudo(co, 3);
            let fast = conv3d_forward(&g, &input, &weight, &bias);
            let slow = naive(&g, &input, &weight, &bias);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "dil {dil} stride {stride}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> is linear in x and w, so its gradients are conv's adjoints.
        for &(dil, stride, k, dims, co) in &[
            (1, 1, 3, [5, 4, 6], 2),
            (2, 1, 3, [6, 5, 6], 2),
            (4, 1, 3, [6, 6, 5], 2),
            (2, 1, 3, [4, 5, 4], 9),
            (1, 2, 3, [6, 4, 8], 2),
            (1, 1, 1, [3, 4, 3], 2),
        ] {
            let ci = 3;
            let g = ConvGeometry::same(&[ci, dims[0], dims[1], dims[2]], &[co, ci, k, k, k], dil, stride).unwrap();
            let x = pseudo(ci * dims.iter().product::<usize>(), 4);
            let w = pseudo(co * ci * k * k * k, 5);
            let up = pseudo(co * g.voxels_out(), 6);
            let zero = vec![0.0; co];
            let mut gi = vec![0.0; x.len()];
            let mut gw = vec![0.0; w.len()];
            conv3d_backward(&g, &x, &w, &up, Some(&mut gi), Some(&mut gw), None);
            for (i, &a) in gi.iter().enumerate() {
                let mut e = vec![0.0; x.len()];
                e[i] = 1.0;
                let n: f64 = naive(&g, &e, &w, &zero).iter().zip(&up).map(|(o, u)| o * u).sum();
                assert!((a - n).abs() < 1e-12, "input {i}, dil {dil} stride {stride}: {a} vs {n}");
            }
            for (i, &a) in gw.iter().enumerate() {
                let mut e = vec![0.0; w.len()];
                e[i] = 1.0;
                let n: f64 = naive(&g, &x, &e, &zero).iter().zip(&up).map(|(o, u)| o * u).sum();
                assert!((a - n).abs() < 1e-12, "weight {i}, dil {dil} stride {stride}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn same_padding_preserves_extent() {
        for dil in [1, 2, 4] {
            let g = ConvGeometry::same(&[1, 8, 9, 10], &[1, 1, 3, 3, 3], dil, 1).unwrap();
            assert_eq!(g.out_dims, [8, 9, 10]);
        }
        let g = ConvGeometry::same(&[1, 8, 16, 4], &[1, 1, 3, 3, 3], 1, 2).unwrap();
        assert_eq!(g.out_dims, [4, 8, 2]);
    }

    #[test]
    fn rejects_even_kernel_and_channel_mismatch() {
        assert!(ConvGeometry::same(&[1, 4, 4, 4], &[1, 1, 2, 2, 2], 1, 1).is_err());
        let err = ConvGeometry::same(&[2, 4, 4, 4], &[1, 3, 3, 3, 3], 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 4, 4, 4]") && msg.contains("[1, 3, 3, 3, 3]"), "{msg}");
    }
}
