use crate::{Error, Result, Scalar, Tensor};

/// Convolution filter bank `(C_out, C_in / groups, K, K)` plus its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T> {
    weight: Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn new(weight: Tensor<T>, stride: usize, padding: usize, groups: usize) -> Result<Self> {
        let (c_out, _, kh, kw) = weight.dims4()?;
        if kh != kw {
            return Err(Error::shape(format!("kernel must be square, got {kh}x{kw}")));
        }
        if kh % 2 == 0 {
            return Err(Error::shape(format!("kernel size {kh} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        if groups == 0 || c_out % groups != 0 {
            return Err(Error::invalid(format!("groups {groups} must divide output channels {c_out}")));
        }
        Ok(ConvWeights { weight, stride, padding, groups })
    }

    /// Stride 1 with "same" padding.
    pub fn same(weight: Tensor<T>, groups: usize) -> Result<Self> {
        let k = weight.shape().get(2).copied().unwrap_or(1);
        Self::new(weight, 1, k.saturating_sub(1) / 2, groups)
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weight
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn k(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn groups(&self) -> usize {
        self.groups
    }
}

pub fn conv_output_size(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geometry {
    fn of<T: Scalar>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<Self> {
        let (n, c_in, h, wd) = input.dims4()?;
        if c_in != w.c_in() {
            return Err(Error::shape(format!("input has {c_in} channels, weights expect {}", w.c_in())));
        }
        let k = w.k();
        let ho = conv_output_size(h, k, w.stride, w.padding);
        let wo = conv_output_size(wd, k, w.stride, w.padding);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::shape(format!(
                "spatial size {h}x{wd} too small for kernel {k} with padding {}",
                w.padding
            )));
        };
        Ok(Geometry {
            n,
            c_in,
            h,
            w: wd,
            c_out: w.c_out(),
            ho,
            wo,
            k,
            stride: w.stride,
            pad: w.padding,
            groups: w.groups,
        })
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    fn kk(&self) -> usize {
        self.cin_g() * self.k * self.k
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn input_block(&self, n: usize, g: usize) -> std::ops::Range<usize> {
        let plane = self.h * self.w;
        let start = (n * self.c_in + g * self.cin_g()) * plane;
        start..start + self.cin_g() * plane
    }

    fn output_block(&self, n: usize, g: usize) -> std::ops::Range<usize> {
        let start = (n * self.c_out + g * self.cout_g()) * self.p();
        start..start + self.cout_g() * self.p()
    }

    fn weight_block(&self, g: usize) -> std::ops::Range<usize> {
        let start = g * self.cout_g() * self.kk();
        start..start + self.cout_g() * self.kk()
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` is in bounds.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.w + self.pad > kx { ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Writes the columns of one image into `cols`, a matrix with row stride `ld`.
    fn im2col<T: Scalar>(&self, src: &[T], cols: &mut [T], ld: usize) {
        let (k, p) = (self.k, self.p());
        for c in 0..self.cin_g() {
            let plane = &src[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * ld;
                    let dst = &mut cols[row..row + p];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            line.fill(T::zero());
                            continue;
                        }
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let src_row = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let start = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                        } else {
                            for (out, ix) in line[lo..hi].iter_mut().zip((start..).step_by(self.stride)) {
                                *out = src_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], ld: usize, dst: &mut [T]) {
        let (k, p) = (self.k, self.p());
        for c in 0..self.cin_g() {
            let plane = &mut dst[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * ld;
                    let src = &cols[row..row + p];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = iy as usize * self.w + lo * self.stride + kx - self.pad;
                        let line = &src[oy * self.wo + lo..oy * self.wo + hi];
                        if self.stride == 1 {
                            for (d, &v) in plane[base..base + line.len()].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in line.iter().enumerate() {
                                plane[base + j * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolutions evaluated on the zero-padded grid: output position
/// `q = oy * wp + ox` reads input `q + ky * wp + kx`, so every column-matrix
/// row is one contiguous slice of the padded plane. Columns `ox >= wo` are
/// computed and discarded. Images are processed in chunks that keep the
/// column matrix cache-sized.
struct PaddedGrid {
    hp: usize,
    wp: usize,
    /// Grid positions per image.
    len: usize,
    /// Images per chunk.
    chunk: usize,
}

const CHUNK_COLUMNS: usize = 8192;

impl PaddedGrid {
    fn of(geo: &Geometry) -> Self {
        let (hp, wp) = (geo.h + 2 * geo.pad, geo.w + 2 * geo.pad);
        let len = (geo.ho - 1) * wp + geo.wo;
        PaddedGrid { hp, wp, len, chunk: (CHUNK_COLUMNS / len).clamp(1, geo.n) }
    }

    fn plane(&self) -> usize {
        self.hp * self.wp
    }

    fn pad<T: Scalar>(&self, geo: &Geometry, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); geo.n * geo.c_in * self.plane()];
        for (plane, dst) in x.chunks_exact(geo.h * geo.w).zip(out.chunks_exact_mut(self.plane())) {
            for (y, row) in plane.chunks_exact(geo.w).enumerate() {
                let at = (y + geo.pad) * self.wp + geo.pad;
                dst[at..at + geo.w].copy_from_slice(row);
            }
        }
        out
    }

    /// Column matrix `(K, images * len)` for group `g`, written into `cols`.
    fn cols<T: Scalar>(
        &self,
        geo: &Geometry,
        padded: &[T],
        g: usize,
        images: std::ops::Range<usize>,
        cols: &mut Vec<T>,
    ) {
        cols.clear();
        for c in g * geo.cin_g()..(g + 1) * geo.cin_g() {
            for ky in 0..geo.k {
                for kx in 0..geo.k {
                    let off = ky * self.wp + kx;
                    for b in images.clone() {
                        let base = (b * geo.c_in + c) * self.plane() + off;
                        cols.extend_from_slice(&padded[base..base + self.len]);
                    }
                }
            }
        }
    }

    fn chunks(&self, n: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..n).step_by(self.chunk).map(move |b| b..(b + self.chunk).min(n))
    }
}

fn conv2d_stride1<T: Scalar>(input: &Tensor<T>, w: &ConvWeights<T>, geo: &Geometry) -> Tensor<T> {
    let grid = PaddedGrid::of(geo);
    let padded = grid.pad(geo, input.data());
    let mut out = Tensor::zeros(&[geo.n, geo.c_out, geo.ho, geo.wo]);
    let mut cols = Vec::with_capacity(geo.kk() * grid.chunk * grid.len);
    let mut prod = vec![T::zero(); geo.cout_g() * grid.chunk * grid.len];
    for g in 0..geo.groups {
        for images in grid.chunks(geo.n) {
            let ld = images.len() * grid.len;
            grid.cols(geo, &padded, g, images.clone(), &mut cols);
            T::gemm(
                geo.cout_g(),
                geo.kk(),
                ld,
                T::one(),
                &w.weight.data()[geo.weight_block(g)],
                false,
                &cols,
                false,
                T::zero(),
                &mut prod,
            );
            let dst = out.data_mut();
            for (i, b) in images.enumerate() {
                for o in 0..geo.cout_g() {
                    let src = &prod[o * ld + i * grid.len..];
                    let at = (b * geo.c_out + g * geo.cout_g() + o) * geo.p();
                    for (oy, row) in dst[at..at + geo.p()].chunks_exact_mut(geo.wo).enumerate() {
                        row.copy_from_slice(&src[oy * grid.wp..oy * grid.wp + geo.wo]);
                    }
                }
            }
        }
    }
    out
}

fn backward_stride1<T: Scalar>(
    input: &Tensor<T>,
    w: &ConvWeights<T>,
    grad_out: &Tensor<T>,
    geo: &Geometry,
    want_weight_grad: bool,
) -> (Tensor<T>, Option<Tensor<T>>) {
    let grid = PaddedGrid::of(geo);
    let padded = want_weight_grad.then(|| grid.pad(geo, input.data()));
    let mut grad_w = want_weight_grad.then(|| Tensor::zeros_like(&w.weight));
    let mut grad_padded = vec![T::zero(); geo.n * geo.c_in * grid.plane()];
    let cap = grid.chunk * grid.len;
    // Discarded grid columns keep a zero gradient.
    let mut gout = vec![T::zero(); geo.cout_g() * cap];
    let mut grad_cols = vec![T::zero(); geo.kk() * cap];
    let mut cols = Vec::with_capacity(if want_weight_grad { geo.kk() * cap } else { 0 });
    for g in 0..geo.groups {
        for (ci, images) in grid.chunks(geo.n).enumerate() {
            let ld = images.len() * grid.len;
            for (i, b) in images.clone().enumerate() {
                for o in 0..geo.cout_g() {
                    let at = (b * geo.c_out + g * geo.cout_g() + o) * geo.p();
                    let dst = &mut gout[o * ld + i * grid.len..];
                    for (oy, row) in grad_out.data()[at..at + geo.p()].chunks_exact(geo.wo).enumerate() {
                        dst[oy * grid.wp..oy * grid.wp + geo.wo].copy_from_slice(row);
                    }
                }
            }
            if let (Some(gw), Some(padded)) = (grad_w.as_mut(), padded.as_ref()) {
                grid.cols(geo, padded, g, images.clone(), &mut cols);
                T::gemm(
                    geo.cout_g(),
                    ld,
                    geo.kk(),
                    T::one(),
                    &gout,
                    false,
                    &cols,
                    true,
                    if ci == 0 { T::zero() } else { T::one() },
                    &mut gw.data_mut()[geo.weight_block(g)],
                );
            }
            T::gemm(
                geo.kk(),
                geo.cout_g(),
                ld,
                T::one(),
                &w.weight.data()[geo.weight_block(g)],
                true,
                &gout,
                false,
                T::zero(),
                &mut grad_cols,
            );
            let mut row = 0;
            for c in g * geo.cin_g()..(g + 1) * geo.cin_g() {
                for ky in 0..geo.k {
                    for kx in 0..geo.k {
                        let off = ky * grid.wp + kx;
                        for (i, b) in images.clone().enumerate() {
                            let base = (b * geo.c_in + c) * grid.plane() + off;
                            let src = &grad_cols[row * ld + i * grid.len..row * ld + (i + 1) * grid.len];
                            for (d, &v) in grad_padded[base..base + grid.len].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
    let mut grad_in = Tensor::zeros_like(input);
    for (dst, src) in grad_in.data_mut().chunks_exact_mut(geo.h * geo.w).zip(grad_padded.chunks_exact(grid.plane())) {
        for (y, row) in dst.chunks_exact_mut(geo.w).enumerate() {
            let at = (y + geo.pad) * grid.wp + geo.pad;
            row.copy_from_slice(&src[at..at + geo.w]);
        }
    }
    (grad_in, grad_w)
}

/// Cross-correlation of an NCHW batch with `w`; no kernel flip, no bias.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    let geo = Geometry::of(input, w)?;
    if geo.stride == 1 {
        return Ok(conv2d_stride1(input, w, &geo));
    }
    let (n, p) = (geo.n, geo.p());
    let ld = n * p;
    let mut out = Tensor::zeros(&[n, geo.c_out, geo.ho, geo.wo]);
    let mut cols = vec![T::zero(); geo.kk() * ld];
    let mut prod = vec![T::zero(); geo.cout_g() * ld];
    for g in 0..geo.groups {
        // One GEMM per group over the whole batch: (C_out/g, K) x (K, N*P).
        for b in 0..n {
            geo.im2col(&input.data()[geo.input_block(b, g)], &mut cols[b * p..], ld);
        }
        T::gemm(
            geo.cout_g(),
            geo.kk(),
            ld,
            T::one(),
            &w.weight.data()[geo.weight_block(g)],
            false,
            &cols,
            false,
            T::zero(),
            &mut prod,
        );
        let dst = out.data_mut();
        for b in 0..n {
            let block = geo.output_block(b, g);
            for (o, chunk) in dst[block].chunks_exact_mut(p).enumerate() {
                chunk.copy_from_slice(&prod[o * ld + b * p..o * ld + (b + 1) * p]);
            }
        }
    }
    Ok(out)
}

fn check_grad_shape<T: Scalar>(geo: &Geometry, grad_out: &Tensor<T>) -> Result<()> {
    let want = [geo.n, geo.c_out, geo.ho, geo.wo];
    if grad_out.shape() != want {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match forward output {want:?}",
            grad_out.shape()
        )));
    }
    Ok(())
}

fn backward<T: Scalar>(
    input: &Tensor<T>,
    w: &ConvWeights<T>,
    grad_out: &Tensor<T>,
    want_weight_grad: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let geo = Geometry::of(input, w)?;
    check_grad_shape(&geo, grad_out)?;
    if geo.stride == 1 {
        return Ok(backward_stride1(input, w, grad_out, &geo, want_weight_grad));
    }
    let (n, p) = (geo.n, geo.p());
    let ld = n * p;
    let mut grad_in = Tensor::zeros_like(input);
    let mut grad_w = want_weight_grad.then(|| Tensor::zeros_like(&w.weight));
    let mut cols = vec![T::zero(); geo.kk() * ld];
    let mut gout = vec![T::zero(); geo.cout_g() * ld];
    for g in 0..geo.groups {
        for b in 0..n {
            let block = geo.output_block(b, g);
            for (o, chunk) in grad_out.data()[block].chunks_exact(p).enumerate() {
                gout[o * ld + b * p..o * ld + (b + 1) * p].copy_from_slice(chunk);
            }
        }
        if let Some(gw) = grad_w.as_mut() {
            for b in 0..n {
                geo.im2col(&input.data()[geo.input_block(b, g)], &mut cols[b * p..], ld);
            }
            T::gemm(
                geo.cout_g(),
                ld,
                geo.kk(),
                T::one(),
                &gout,
                false,
                &cols,
                true,
                T::zero(),
                &mut gw.data_mut()[geo.weight_block(g)],
            );
        }
        T::gemm(
            geo.kk(),
            geo.cout_g(),
            ld,
            T::one(),
            &w.weight.data()[geo.weight_block(g)],
            true,
            &gout,
            false,
            T::zero(),
            &mut cols,
        );
        for b in 0..n {
            let block = geo.input_block(b, g);
            geo.col2im(&cols[b * p..], ld, &mut grad_in.data_mut()[block]);
        }
    }
    Ok((grad_in, grad_w))
}

/// Gradients of [`conv2d`] with respect to its input and its weights.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    w: &ConvWeights<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (gi, gw) = backward(input, w, grad_out, true)?;
    Ok((gi, gw.expect("weight gradient requested")))
}

/// Input gradient only, for frozen filters.
pub fn conv2d_backward_input<T: Scalar>(
    input: &Tensor<T>,
    w: &ConvWeights<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(backward(input, w, grad_out, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let mut t = Tensor::zeros(shape);
        rng.fill_normal(t.data_mut(), 0.0, 1.0);
        t
    }

    #[test]
    fn sums_ones() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let w = ConvWeights::new(Tensor::full(&[1, 1, 3, 3], 1.0), 1, 0, 1).unwrap();
        let y = conv2d(&x, &w).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn center_tap_is_identity() {
        let mut rng = Rng::new(0);
        let x = random(&[2, 3, 5, 4], &mut rng);
        let mut k = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            k.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let y = conv2d(&x, &ConvWeights::new(k, 1, 1, 1).unwrap()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(conv_output_size(8, 3, 2, 1), Some(4));
        assert_eq!(conv_output_size(7, 3, 2, 1), Some(4));
        assert_eq!(conv_output_size(2, 3, 1, 0), None);
    }

    #[test]
    fn rejects_bad_geometry() {
        let w = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        assert!(ConvWeights::new(w.clone(), 1, 1, 3).is_err());
        assert!(ConvWeights::new(Tensor::<f32>::zeros(&[4, 2, 2, 2]), 1, 1, 1).is_err());
        let cw = ConvWeights::new(w, 1, 1, 1).unwrap();
        assert!(conv2d(&Tensor::zeros(&[1, 3, 4, 4]), &cw).is_err());
        let cw0 = ConvWeights::new(Tensor::<f32>::zeros(&[1, 1, 3, 3]), 1, 0, 1).unwrap();
        assert!(conv2d(&Tensor::zeros(&[1, 1, 2, 2]), &cw0).is_err());
        let y = Tensor::zeros(&[1, 4, 5, 5]);
        assert!(conv2d_backward(&Tensor::zeros(&[1, 2, 4, 4]), &cw, &y).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let mut rng = Rng::new(1);
        let x = random(&[2, 3, 5, 5], &mut rng);
        let w = ConvWeights::new(random(&[4, 3, 3, 3], &mut rng), 2, 1, 1).unwrap();
        let y = conv2d(&x, &w).unwrap();
        let (gi, gw) = conv2d_backward(&x, &w, &Tensor::zeros_like(&y)).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_grad_out() {
        let mut rng = Rng::new(2);
        let x = random(&[2, 3, 5, 5], &mut rng);
        let w = ConvWeights::new(random(&[4, 3, 3, 3], &mut rng), 1, 1, 1).unwrap();
        let g = random(&[2, 4, 5, 5], &mut rng);
        let (gi1, gw1) = conv2d_backward(&x, &w, &g).unwrap();
        let (gi2, gw2) = conv2d_backward(&x, &w, &g.scale(2.0)).unwrap();
        assert!(gi1.scale(2.0).max_abs_diff(&gi2).unwrap() < 1e-12);
        assert!(gw1.scale(2.0).max_abs_diff(&gw2).unwrap() < 1e-12);
    }

    #[test]
    fn depthwise_equals_per_channel_convolution() {
        let mut rng = Rng::new(3);
        let x = random(&[2, 4, 6, 6], &mut rng);
        let k = random(&[4, 1, 3, 3], &mut rng);
        let y = conv2d(&x, &ConvWeights::new(k.clone(), 1, 1, 4).unwrap()).unwrap();
        for c in 0..4 {
            let mut xc = Tensor::zeros(&[2, 1, 6, 6]);
            for n in 0..2 {
                xc.data_mut()[n * 36..(n + 1) * 36].copy_from_slice(&x.data()[(n * 4 + c) * 36..(n * 4 + c + 1) * 36]);
            }
            let kc = Tensor::from_vec(&[1, 1, 3, 3], k.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
            let yc = conv2d(&xc, &ConvWeights::new(kc, 1, 1, 1).unwrap()).unwrap();
            for n in 0..2 {
                let got = &y.data()[(n * 4 + c) * 36..(n * 4 + c + 1) * 36];
                let want = &yc.data()[n * 36..(n + 1) * 36];
                for (a, b) in got.iter().zip(want) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn input_only_backward_matches_full_backward() {
        let mut rng = Rng::new(4);
        let x = random(&[2, 4, 5, 5], &mut rng);
        let w = ConvWeights::new(random(&[6, 2, 3, 3], &mut rng), 1, 1, 2).unwrap();
        let g = random(&[2, 6, 5, 5], &mut rng);
        let (gi, _) = conv2d_backward(&x, &w, &g).unwrap();
        assert_eq!(gi, conv2d_backward_input(&x, &w, &g).unwrap());
    }
}
