//! Bilinear and trilinear interpolation with zero padding outside the raster.
//!
//! Coordinates are continuous pixel (voxel) indices. Gradients are with
//! respect to those coordinates and use the cell containing the sample
//! (one-sided on cell boundaries).

use crate::scalar::Real;

#[inline(always)]
fn fetch2<T: Real>(data: &[T], w: usize, h: usize, ch: usize, x: isize, y: isize, c: usize) -> f64 {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        0.0
    } else {
        data[(y as usize * w + x as usize) * ch + c].as_f64()
    }
}

/// Bilinear sample of every channel at column `u`, row `v`.
#[inline]
pub fn bilinear<T: Real>(
    data: &[T],
    w: usize,
    h: usize,
    ch: usize,
    u: f64,
    v: f64,
    val: &mut [f64],
) {
    let x0 = u.floor();
    let y0 = v.floor();
    if !(x0 >= -1.0 && y0 >= -1.0 && x0 < w as f64 && y0 < h as f64) {
        val[..ch].fill(0.0);
        return;
    }
    let (fx, fy) = (u - x0, v - y0);
    let (xi, yi) = (x0 as isize, y0 as isize);
    let interior = xi >= 0 && yi >= 0 && xi + 1 < w as isize && yi + 1 < h as isize;
    for c in 0..ch {
        let (v00, v01, v10, v11) = if interior {
            let i00 = (yi as usize * w + xi as usize) * ch + c;
            let i10 = i00 + w * ch;
            (
                data[i00].as_f64(),
                data[i00 + ch].as_f64(),
                data[i10].as_f64(),
                data[i10 + ch].as_f64(),
            )
        } else {
            (
                fetch2(data, w, h, ch, xi, yi, c),
                fetch2(data, w, h, ch, xi + 1, yi, c),
                fetch2(data, w, h, ch, xi, yi + 1, c),
                fetch2(data, w, h, ch, xi + 1, yi + 1, c),
            )
        };
        let a = v00 + fx * (v01 - v00);
        let b = v10 + fx * (v11 - v10);
        val[c] = a + fy * (b - a);
    }
}

/// Bilinear sample plus `(d/du, d/dv)` per channel.
#[inline]
pub fn bilinear_grad<T: Real>(
    data: &[T],
    w: usize,
    h: usize,
    ch: usize,
    u: f64,
    v: f64,
    val: &mut [f64],
    grad: &mut [[f64; 2]],
) {
    let x0 = u.floor();
    let y0 = v.floor();
    if !(x0 >= -1.0 && y0 >= -1.0 && x0 < w as f64 && y0 < h as f64) {
        val[..ch].fill(0.0);
        grad[..ch].fill([0.0; 2]);
        return;
    }
    let (fx, fy) = (u - x0, v - y0);
    let (xi, yi) = (x0 as isize, y0 as isize);
    let interior = xi >= 0 && yi >= 0 && xi + 1 < w as isize && yi + 1 < h as isize;
    for c in 0..ch {
        let (v00, v01, v10, v11) = if interior {
            let i00 = (yi as usize * w + xi as usize) * ch + c;
            let i10 = i00 + w * ch;
            (
                data[i00].as_f64(),
                data[i00 + ch].as_f64(),
                data[i10].as_f64(),
                data[i10 + ch].as_f64(),
            )
        } else {
            (
                fetch2(data, w, h, ch, xi, yi, c),
                fetch2(data, w, h, ch, xi + 1, yi, c),
                fetch2(data, w, h, ch, xi, yi + 1, c),
                fetch2(data, w, h, ch, xi + 1, yi + 1, c),
            )
        };
        let a = v00 + fx * (v01 - v00);
        let b = v10 + fx * (v11 - v10);
        val[c] = a + fy * (b - a);
        grad[c] = [(1.0 - fy) * (v01 - v00) + fy * (v11 - v10), b - a];
    }
}

#[inline(always)]
fn fetch3<T: Real>(
    data: &[T],
    dims: [usize; 3],
    ch: usize,
    x: isize,
    y: isize,
    z: isize,
    c: usize,
) -> f64 {
    if x < 0
        || y < 0
        || z < 0
        || x >= dims[0] as isize
        || y >= dims[1] as isize
        || z >= dims[2] as isize
    {
        0.0
    } else {
        data[((z as usize * dims[1] + y as usize) * dims[0] + x as usize) * ch + c].as_f64()
    }
}

#[inline(always)]
fn corners<T: Real>(
    data: &[T],
    dims: [usize; 3],
    ch: usize,
    xi: isize,
    yi: isize,
    zi: isize,
    c: usize,
) -> [f64; 8] {
    let interior = xi >= 0
        && yi >= 0
        && zi >= 0
        && xi + 1 < dims[0] as isize
        && yi + 1 < dims[1] as isize
        && zi + 1 < dims[2] as isize;
    if interior {
        let sx = ch;
        let sy = dims[0] * ch;
        let sz = dims[0] * dims[1] * ch;
        let i = ((zi as usize * dims[1] + yi as usize) * dims[0] + xi as usize) * ch + c;
        [
            data[i].as_f64(),
            data[i + sx].as_f64(),
            data[i + sy].as_f64(),
            data[i + sy + sx].as_f64(),
            data[i + sz].as_f64(),
            data[i + sz + sx].as_f64(),
            data[i + sz + sy].as_f64(),
            data[i + sz + sy + sx].as_f64(),
        ]
    } else {
        let f = |dx, dy, dz| fetch3(data, dims, ch, xi + dx, yi + dy, zi + dz, c);
        [
            f(0, 0, 0),
            f(1, 0, 0),
            f(0, 1, 0),
            f(1, 1, 0),
            f(0, 0, 1),
            f(1, 0, 1),
            f(0, 1, 1),
            f(1, 1, 1),
        ]
    }
}

#[inline(always)]
fn in_range3(p: [f64; 3], dims: [usize; 3]) -> bool {
    p[0] >= -1.0
        && p[1] >= -1.0
        && p[2] >= -1.0
        && p[0] < dims[0] as f64
        && p[1] < dims[1] as f64
        && p[2] < dims[2] as f64
}

/// Trilinear sample of every channel at continuous voxel index `p`.
#[inline]
pub fn trilinear<T: Real>(data: &[T], dims: [usize; 3], ch: usize, p: [f64; 3], val: &mut [f64]) {
    let f = [p[0].floor(), p[1].floor(), p[2].floor()];
    if !in_range3(f, dims) {
        val[..ch].fill(0.0);
        return;
    }
    let (fx, fy, fz) = (p[0] - f[0], p[1] - f[1], p[2] - f[2]);
    for c in 0..ch {
        let v = corners(
            data,
            dims,
            ch,
            f[0] as isize,
            f[1] as isize,
            f[2] as isize,
            c,
        );
        let c00 = v[0] + fx * (v[1] - v[0]);
        let c10 = v[2] + fx * (v[3] - v[2]);
        let c01 = v[4] + fx * (v[5] - v[4]);
        let c11 = v[6] + fx * (v[7] - v[6]);
        let c0 = c00 + fy * (c10 - c00);
        let c1 = c01 + fy * (c11 - c01);
        val[c] = c0 + fz * (c1 - c0);
    }
}

/// Trilinear sample plus the gradient with respect to the voxel index.
#[inline]
pub fn trilinear_grad<T: Real>(
    data: &[T],
    dims: [usize; 3],
    ch: usize,
    p: [f64; 3],
    val: &mut [f64],
    grad: &mut [[f64; 3]],
) {
    let f = [p[0].floor(), p[1].floor(), p[2].floor()];
    if !in_range3(f, dims) {
        val[..ch].fill(0.0);
        grad[..ch].fill([0.0; 3]);
        return;
    }
    let (fx, fy, fz) = (p[0] - f[0], p[1] - f[1], p[2] - f[2]);
    for c in 0..ch {
        let v = corners(
            data,
            dims,
            ch,
            f[0] as isize,
            f[1] as isize,
            f[2] as isize,
            c,
        );
        let c00 = v[0] + fx * (v[1] - v[0]);
        let c10 = v[2] + fx * (v[3] - v[2]);
        let c01 = v[4] + fx * (v[5] - v[4]);
        let c11 = v[6] + fx * (v[7] - v[6]);
        let c0 = c00 + fy * (c10 - c00);
        let c1 = c01 + fy * (c11 - c01);
        val[c] = c0 + fz * (c1 - c0);
        let dx0 = (1.0 - fy) * (v[1] - v[0]) + fy * (v[3] - v[2]);
        let dx1 = (1.0 - fy) * (v[5] - v[4]) + fy * (v[7] - v[6]);
        grad[c] = [
            dx0 + fz * (dx1 - dx0),
            (1.0 - fz) * (c10 - c00) + fz * (c11 - c01),
            c1 - c0,
        ];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hits_nodes_exactly() {
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let mut v = [0.0];
        for r in 0..3 {
            for c in 0..4 {
                bilinear(&data, 4, 3, 1, c as f64, r as f64, &mut v);
                assert_eq!(v[0], data[r * 4 + c]);
            }
        }
        bilinear(&data, 4, 3, 1, -1.5, 0.0, &mut v);
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn bilinear_gradient_matches_difference() {
        let data: Vec<f64> = (0..20).map(|i| ((i * 7) % 5) as f64).collect();
        let (u, v) = (1.3, 2.6);
        let mut val = [0.0];
        let mut g = [[0.0; 2]];
        bilinear_grad(&data, 5, 4, 1, u, v, &mut val, &mut g);
        let h = 1e-7;
        let mut a = [0.0];
        let mut b = [0.0];
        bilinear(&data, 5, 4, 1, u + h, v, &mut a);
        bilinear(&data, 5, 4, 1, u - h, v, &mut b);
        assert!(((a[0] - b[0]) / (2.0 * h) - g[0][0]).abs() < 1e-6);
        bilinear(&data, 5, 4, 1, u, v + h, &mut a);
        bilinear(&data, 5, 4, 1, u, v - h, &mut b);
        assert!(((a[0] - b[0]) / (2.0 * h) - g[0][1]).abs() < 1e-6);
    }

    #[test]
    fn trilinear_linear_field_is_exact() {
        let dims = [4, 5, 3];
        let mut data = Vec::new();
        for k in 0..3 {
            for j in 0..5 {
                for i in 0..4 {
                    data.push(1.0 + 2.0 * i as f64 - 0.5 * j as f64 + 3.0 * k as f64);
                }
            }
        }
        let mut val = [0.0];
        let mut g = [[0.0; 3]];
        trilinear_grad(&data, dims, 1, [1.25, 2.5, 0.75], &mut val, &mut g);
        assert!((val[0] - (1.0 + 2.5 - 1.25 + 2.25)).abs() < 1e-12);
        assert!(
            (g[0][0] - 2.0).abs() < 1e-12
                && (g[0][1] + 0.5).abs() < 1e-12
                && (g[0][2] - 3.0).abs() < 1e-12
        );
    }
}
