//! 3D convolution and transposed convolution on `(C, D, H, W)` maps.
//!
//! The fast path lowers each group to `im2col` followed by the blocked GEMM.
//! Column rows are ordered `(ic, kd, kh, kw)`, matching the weight layout, and
//! the GEMM accumulates rows in order on top of the bias, so in either
//! precision the result is bit-identical to [`conv3d_reference`]. Padding
//! taps contribute `w * 0` in both paths.

use super::gemm::{matmul_into, matmul_t, Operand};
use super::{numel, Real, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Stride, symmetric padding and group count of a convolution. The kernel
/// extent comes from the weight tensor `(OC, IC/groups, KD, KH, KW)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Conv3dSpec {
            stride: [1; 3],
            padding: [0; 3],
            groups: 1,
        }
    }
}

impl Conv3dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv3dSpec {
            stride: [stride; 3],
            padding: [padding; 3],
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Transposed convolution; weight layout `(IC, OC, KD, KH, KW)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTranspose3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output_padding: [usize; 3],
}

impl ConvTranspose3dSpec {
    pub fn new(stride: usize, padding: usize, output_padding: usize) -> Self {
        ConvTranspose3dSpec {
            stride: [stride; 3],
            padding: [padding; 3],
            output_padding: [output_padding; 3],
        }
    }
}

/// Sliding-window geometry from a large `input` grid to an `output` grid:
/// output position `o` reads input `o * stride + k - pad` for tap `k`.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Geometry {
    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    /// Output indices along `axis` whose tap `k` lands inside the input.
    fn tap_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let (n_in, n_out) = (self.input[axis] as isize, self.output[axis] as isize);
        let (s, p, k) = (self.stride[axis] as isize, self.pad[axis] as isize, k as isize);
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let top = n_in - 1 + p - k;
        let hi = if top < 0 { 0 } else { (top / s + 1).min(n_out) };
        (lo.min(hi) as usize, hi.max(0) as usize)
    }

    /// Visits every (tap, output offset, input offset, run length, stride)
    /// of a single channel as contiguous runs along the last axis. Taps are
    /// visited in increasing order.
    fn for_each_tap_run(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [kd_n, kh_n, kw_n] = self.kernel;
        let [_, ih_n, iw_n] = self.input;
        let [_, oh_n, ow_n] = self.output;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        for kd in 0..kd_n {
            let (d0, d1) = self.tap_range(0, kd);
            for kh in 0..kh_n {
                let (h0, h1) = self.tap_range(1, kh);
                for kw in 0..kw_n {
                    let (w0, w1) = self.tap_range(2, kw);
                    if w0 >= w1 {
                        continue;
                    }
                    let tap = (kd * kh_n + kh) * kw_n + kw;
                    for od in d0..d1 {
                        let id = od * sd + kd - pd;
                        for oh in h0..h1 {
                            let ih = oh * sh + kh - ph;
                            let out_off = (od * oh_n + oh) * ow_n + w0;
                            let in_off = (id * ih_n + ih) * iw_n + w0 * sw + kw - pw;
                            f(tap, out_off, in_off, w1 - w0, sw);
                        }
                    }
                }
            }
        }
    }

    /// Visits every (column row, output offset, input offset) triple as
    /// contiguous runs along the last axis.
    fn for_each_run(&self, channels: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (kvol, in_len, out_len) = (self.kvol(), self.in_len(), self.out_len());
        for c in 0..channels {
            self.for_each_tap_run(|tap, o, i, len, sw| {
                f((c * kvol + tap) * out_len + o, c * in_len + i, len, sw)
            });
        }
    }

    /// `col[(c,kd,kh,kw), o] = x[c, o*s + k - p]`, zero outside.
    fn im2col<T: Real>(&self, channels: usize, x: &[T]) -> Vec<T> {
        let mut col = vec![T::zero(); channels * self.kvol() * self.out_len()];
        self.for_each_run(channels, |o, i, len, sw| {
            if sw == 1 {
                col[o..o + len].copy_from_slice(&x[i..i + len]);
            } else {
                for j in 0..len {
                    col[o + j] = x[i + j * sw];
                }
            }
        });
        col
    }

    /// Adjoint of [`Geometry::im2col`]: scatter-adds columns into `x`.
    fn col2im<T: Real>(&self, channels: usize, col: &[T], x: &mut [T]) {
        self.for_each_run(channels, |o, i, len, sw| {
            if sw == 1 {
                for (dst, &v) in x[i..i + len].iter_mut().zip(&col[o..o + len]) {
                    *dst += v;
                }
            } else {
                for j in 0..len {
                    x[i + j * sw] += col[o + j];
                }
            }
        });
    }
}

fn dims3(op: &'static str, shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match shape {
        [c, d, h, w] => Ok((*c, [*d, *h, *w])),
        _ => Err(invalid!("{op}: expected a (C, D, H, W) tensor, got {shape:?}")),
    }
}

fn weight5(op: &'static str, shape: &[usize]) -> Result<[usize; 5]> {
    match shape {
        [a, b, c, d, e] => Ok([*a, *b, *c, *d, *e]),
        _ => Err(invalid!("{op}: expected a 5D weight, got {shape:?}")),
    }
}

struct ConvPlan {
    ic: usize,
    oc: usize,
    groups: usize,
    geo: Geometry,
}

impl ConvPlan {
    /// One input and one output channel per group.
    fn is_depthwise(&self) -> bool {
        self.groups == self.ic && self.groups == self.oc
    }

    fn conv(x: &[usize], w: &[usize], bias: Option<&[usize]>, spec: &Conv3dSpec) -> Result<Self> {
        let (ic, input) = dims3("conv3d", x)?;
        let [oc, icg, kd, kh, kw] = weight5("conv3d", w)?;
        let groups = spec.groups;
        if groups == 0 || ic % groups != 0 || oc % groups != 0 || icg != ic / groups {
            return Err(Error::shape("conv3d", x, w));
        }
        if let Some(b) = bias {
            if b != [oc] {
                return Err(Error::shape("conv3d bias", b, &[oc]));
            }
        }
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * spec.padding[a];
            if spec.stride[a] == 0 || span < kernel[a] {
                return Err(invalid!(
                    "conv3d: kernel {kernel:?} does not fit input {input:?} with padding {:?}",
                    spec.padding
                ));
            }
            output[a] = (span - kernel[a]) / spec.stride[a] + 1;
        }
        Ok(ConvPlan {
            ic,
            oc,
            groups,
            geo: Geometry {
                input,
                output,
                kernel,
                stride: spec.stride,
                pad: spec.padding,
            },
        })
    }

    fn conv_transpose(
        x: &[usize],
        w: &[usize],
        bias: Option<&[usize]>,
        spec: &ConvTranspose3dSpec,
    ) -> Result<Self> {
        let (ic, input) = dims3("conv_transpose3d", x)?;
        let [wic, oc, kd, kh, kw] = weight5("conv_transpose3d", w)?;
        if wic != ic {
            return Err(Error::shape("conv_transpose3d", x, w));
        }
        if let Some(b) = bias {
            if b != [oc] {
                return Err(Error::shape("conv_transpose3d bias", b, &[oc]));
            }
        }
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for a in 0..3 {
            let full = (input[a].max(1) - 1) * spec.stride[a] + kernel[a] + spec.output_padding[a];
            if spec.stride[a] == 0 || full <= 2 * spec.padding[a] || spec.output_padding[a] >= spec.stride[a].max(1) {
                return Err(invalid!("conv_transpose3d: invalid geometry for input {input:?}"));
            }
            output[a] = full - 2 * spec.padding[a];
        }
        // Seen from the output grid, a transposed convolution is the adjoint
        // of an ordinary convolution reading the output.
        Ok(ConvPlan {
            ic,
            oc,
            groups: 1,
            geo: Geometry {
                input: output,
                output: input,
                kernel,
                stride: spec.stride,
                pad: spec.padding,
            },
        })
    }
}

fn fill_bias<T: Real>(out: &mut [T], bias: Option<&[T]>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b) {
            chunk.iter_mut().for_each(|v| *v = bv);
        }
    }
}

fn bias_grad<T: Real>(g: &[T], plane: usize) -> Vec<T> {
    g.chunks(plane).map(|c| c.iter().copied().sum()).collect()
}

fn conv_forward<T: Real>(plan: &ConvPlan, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let geo = &plan.geo;
    let (icg, ocg) = (plan.ic / plan.groups, plan.oc / plan.groups);
    let (p_in, p_out, kg) = (geo.in_len(), geo.out_len(), icg * geo.kvol());
    let mut out = vec![T::zero(); plan.oc * p_out];
    fill_bias(&mut out, bias, p_out);
    if plan.is_depthwise() {
        let kv = geo.kvol();
        for c in 0..plan.oc {
            let (xc, wc) = (&x[c * p_in..(c + 1) * p_in], &w[c * kv..(c + 1) * kv]);
            let oc = &mut out[c * p_out..(c + 1) * p_out];
            geo.for_each_tap_run(|tap, o, i, len, sw| {
                let wv = wc[tap];
                if sw == 1 {
                    for (dst, &xv) in oc[o..o + len].iter_mut().zip(&xc[i..i + len]) {
                        *dst += wv * xv;
                    }
                } else {
                    for j in 0..len {
                        oc[o + j] += wv * xc[i + j * sw];
                    }
                }
            });
        }
        return out;
    }
    for g in 0..plan.groups {
        let col = geo.im2col(icg, &x[g * icg * p_in..(g + 1) * icg * p_in]);
        matmul_into(
            ocg,
            kg,
            p_out,
            &w[g * ocg * kg..(g + 1) * ocg * kg],
            &col,
            &mut out[g * ocg * p_out..(g + 1) * ocg * p_out],
        );
    }
    out
}

/// Returns (grad_input, grad_weight) of a convolution.
fn conv_backward<T: Real>(
    plan: &ConvPlan,
    x: &[T],
    w: &[T],
    gout: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let geo = &plan.geo;
    let (icg, ocg) = (plan.ic / plan.groups, plan.oc / plan.groups);
    let (p_in, p_out, kg) = (geo.in_len(), geo.out_len(), icg * geo.kvol());
    let mut gx = need_x.then(|| vec![T::zero(); plan.ic * p_in]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    if plan.is_depthwise() {
        let kv = geo.kvol();
        for c in 0..plan.oc {
            let (xc, wc) = (&x[c * p_in..(c + 1) * p_in], &w[c * kv..(c + 1) * kv]);
            let go = &gout[c * p_out..(c + 1) * p_out];
            if let Some(gw) = gw.as_mut() {
                let gwc = &mut gw[c * kv..(c + 1) * kv];
                geo.for_each_tap_run(|tap, o, i, len, sw| {
                    let mut acc = T::zero();
                    for j in 0..len {
                        acc += go[o + j] * xc[i + j * sw];
                    }
                    gwc[tap] += acc;
                });
            }
            if let Some(gx) = gx.as_mut() {
                let gxc = &mut gx[c * p_in..(c + 1) * p_in];
                geo.for_each_tap_run(|tap, o, i, len, sw| {
                    let wv = wc[tap];
                    for j in 0..len {
                        gxc[i + j * sw] += wv * go[o + j];
                    }
                });
            }
        }
        return (gx, gw);
    }
    for g in 0..plan.groups {
        let go = &gout[g * ocg * p_out..(g + 1) * ocg * p_out];
        let wg = &w[g * ocg * kg..(g + 1) * ocg * kg];
        if let Some(gw) = gw.as_mut() {
            let col = geo.im2col(icg, &x[g * icg * p_in..(g + 1) * icg * p_in]);
            let gw = &mut gw[g * ocg * kg..(g + 1) * ocg * kg];
            matmul_t(ocg, p_out, kg, Operand::Plain(go), Operand::Trans(&col), gw);
        }
        if let Some(gx) = gx.as_mut() {
            let mut gcol = vec![T::zero(); kg * p_out];
            matmul_t(kg, ocg, p_out, Operand::Trans(wg), Operand::Plain(go), &mut gcol);
            geo.col2im(icg, &gcol, &mut gx[g * icg * p_in..(g + 1) * icg * p_in]);
        }
    }
    (gx, gw)
}

fn conv_transpose_forward<T: Real>(plan: &ConvPlan, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let geo = &plan.geo;
    let (p_small, p_big, rows) = (geo.out_len(), geo.in_len(), plan.oc * geo.kvol());
    let mut col = vec![T::zero(); rows * p_small];
    matmul_t(rows, plan.ic, p_small, Operand::Trans(w), Operand::Plain(x), &mut col);
    let mut out = vec![T::zero(); plan.oc * p_big];
    fill_bias(&mut out, bias, p_big);
    geo.col2im(plan.oc, &col, &mut out);
    out
}

fn conv_transpose_backward<T: Real>(
    plan: &ConvPlan,
    x: &[T],
    w: &[T],
    gout: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let geo = &plan.geo;
    let (p_small, rows) = (geo.out_len(), plan.oc * geo.kvol());
    let gcol = geo.im2col(plan.oc, gout);
    let gx = need_x.then(|| {
        let mut gx = vec![T::zero(); plan.ic * p_small];
        matmul_into(plan.ic, rows, p_small, w, &gcol, &mut gx);
        gx
    });
    let gw = need_w.then(|| {
        let mut gw = vec![T::zero(); w.len()];
        matmul_t(plan.ic, p_small, rows, Operand::Plain(x), Operand::Trans(&gcol), &mut gw);
        gw
    });
    (gx, gw)
}

impl<'g, T: Real> Var<'g, T> {
    /// 3D convolution of a `(C, D, H, W)` map.
    pub fn conv3d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        spec: Conv3dSpec,
    ) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let plan = ConvPlan::conv(x.shape(), w.shape(), b.as_ref().map(|b| b.shape()), &spec)?;
        let out = conv_forward(&plan, x.data(), w.data(), b.as_ref().map(|b| b.data()));
        let mut shape = vec![plan.oc];
        shape.extend_from_slice(&plan.geo.output);
        let value = Tensor::new(&shape, out)?;
        let plane = plan.geo.out_len();
        let backward = Box::new(move |g: &[T], needs: &[bool]| {
            let (gx, gw) = conv_backward(&plan, x.data(), w.data(), g, needs[0], needs[1]);
            let mut grads = vec![gx, gw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| bias_grad(g, plane)));
            }
            grads
        });
        match bias {
            Some(b) => self.graph().push("conv3d", value, &[self, weight, b], backward),
            None => self.graph().push("conv3d", value, &[self, weight], backward),
        }
    }

    /// Transposed 3D convolution of a `(C, D, H, W)` map.
    pub fn conv_transpose3d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        spec: ConvTranspose3dSpec,
    ) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let plan =
            ConvPlan::conv_transpose(x.shape(), w.shape(), b.as_ref().map(|b| b.shape()), &spec)?;
        let out = conv_transpose_forward(&plan, x.data(), w.data(), b.as_ref().map(|b| b.data()));
        let mut shape = vec![plan.oc];
        shape.extend_from_slice(&plan.geo.input);
        let value = Tensor::new(&shape, out)?;
        let plane = plan.geo.in_len();
        let backward = Box::new(move |g: &[T], needs: &[bool]| {
            let (gx, gw) =
                conv_transpose_backward(&plan, x.data(), w.data(), g, needs[0], needs[1]);
            let mut grads = vec![gx, gw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| bias_grad(g, plane)));
            }
            grads
        });
        match bias {
            Some(b) => self.graph().push("conv_transpose3d", value, &[self, weight, b], backward),
            None => self.graph().push("conv_transpose3d", value, &[self, weight], backward),
        }
    }
}

/// Direct nested-loop convolution, the baseline the fast path must match.
pub fn conv3d_reference<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv3dSpec,
) -> Result<Tensor<T>> {
    let plan = ConvPlan::conv(x.shape(), w.shape(), bias.map(|b| b.shape()), &spec)?;
    let geo = plan.geo;
    let [id_n, ih_n, iw_n] = geo.input;
    let [od_n, oh_n, ow_n] = geo.output;
    let [kd_n, kh_n, kw_n] = geo.kernel;
    let (icg, ocg) = (plan.ic / plan.groups, plan.oc / plan.groups);
    let mut out = Vec::with_capacity(plan.oc * geo.out_len());
    let inside = |i: isize, n: usize| i >= 0 && (i as usize) < n;
    for oc in 0..plan.oc {
        let g = oc / ocg;
        for od in 0..od_n {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    let mut acc = bias.map_or(T::zero(), |b| b.data()[oc]);
                    for ci in 0..icg {
                        let ic = g * icg + ci;
                        for kd in 0..kd_n {
                            for kh in 0..kh_n {
                                for kw in 0..kw_n {
                                    let id = (od * geo.stride[0] + kd) as isize - geo.pad[0] as isize;
                                    let ih = (oh * geo.stride[1] + kh) as isize - geo.pad[1] as isize;
                                    let iw = (ow * geo.stride[2] + kw) as isize - geo.pad[2] as isize;
                                    let xv = if inside(id, id_n) && inside(ih, ih_n) && inside(iw, iw_n) {
                                        x.at(&[ic, id as usize, ih as usize, iw as usize])
                                    } else {
                                        T::zero()
                                    };
                                    acc += w.at(&[oc, ci, kd, kh, kw]) * xv;
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    let mut shape = vec![plan.oc];
    shape.extend_from_slice(&geo.output);
    Tensor::new(&shape, out)
}

/// Direct scatter-form transposed convolution.
pub fn conv_transpose3d_reference<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvTranspose3dSpec,
) -> Result<Tensor<T>> {
    let plan = ConvPlan::conv_transpose(x.shape(), w.shape(), bias.map(|b| b.shape()), &spec)?;
    let geo = plan.geo;
    let mut shape = vec![plan.oc];
    shape.extend_from_slice(&geo.input);
    let mut out = Tensor::zeros(&shape);
    let [kd_n, kh_n, kw_n] = geo.kernel;
    for oc in 0..plan.oc {
        let b = bias.map_or(T::zero(), |b| b.data()[oc]);
        let plane = geo.in_len();
        out.data_mut()[oc * plane..(oc + 1) * plane].iter_mut().for_each(|v| *v = b);
    }
    for ic in 0..plan.ic {
        for id in 0..geo.output[0] {
            for ih in 0..geo.output[1] {
                for iw in 0..geo.output[2] {
                    let xv = x.at(&[ic, id, ih, iw]);
                    for oc in 0..plan.oc {
                        for kd in 0..kd_n {
                            for kh in 0..kh_n {
                                for kw in 0..kw_n {
                                    let od = (id * geo.stride[0] + kd) as isize - geo.pad[0] as isize;
                                    let oh = (ih * geo.stride[1] + kh) as isize - geo.pad[1] as isize;
                                    let ow = (iw * geo.stride[2] + kw) as isize - geo.pad[2] as isize;
                                    if od < 0 || oh < 0 || ow < 0 {
                                        continue;
                                    }
                                    let (od, oh, ow) = (od as usize, oh as usize, ow as usize);
                                    if od >= geo.input[0] || oh >= geo.input[1] || ow >= geo.input[2] {
                                        continue;
                                    }
                                    let off = out.offset(&[oc, od, oh, ow]);
                                    out.data_mut()[off] += xv * w.at(&[ic, oc, kd, kh, kw]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    debug_assert_eq!(out.numel(), numel(&shape));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Graph;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::new(shape, rng.uniform_vec(numel(shape), -1.0, 1.0)).unwrap()
    }

    #[test]
    fn stem_shape() {
        let g = Graph::new();
        let x = g.constant(Tensor::<f32>::zeros(&[1, 32, 32, 32]));
        let w = g.constant(Tensor::<f32>::zeros(&[48, 1, 7, 7, 7]));
        let y = x.conv3d(w, None, Conv3dSpec::new(2, 3)).unwrap();
        assert_eq!(y.shape(), vec![48, 16, 16, 16]);
    }

    #[test]
    fn fast_path_is_bitwise_reference() {
        let mut rng = Rng::new(5);
        let cases = [
            ([3, 5, 6, 7], [4, 3, 3, 3, 3], Conv3dSpec::new(1, 1)),
            ([2, 7, 5, 6], [2, 2, 2, 2, 2], Conv3dSpec::new(2, 0)),
            ([4, 6, 6, 6], [4, 1, 7, 7, 7], Conv3dSpec::new(1, 3).with_groups(4)),
            ([1, 9, 8, 7], [3, 1, 7, 7, 7], Conv3dSpec::new(2, 3)),
            ([6, 4, 4, 4], [4, 3, 1, 1, 1], Conv3dSpec::new(1, 0).with_groups(2)),
        ];
        for (xs, ws, spec) in cases {
            let x = random(&mut rng, &xs);
            let w = random(&mut rng, &ws);
            let b = random(&mut rng, &[ws[0]]);
            let want = conv3d_reference(&x, &w, Some(&b), spec).unwrap();
            let g = Graph::new();
            let got = g
                .constant(x.clone())
                .conv3d(g.constant(w.clone()), Some(g.constant(b.clone())), spec)
                .unwrap()
                .value();
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{xs:?} {ws:?}");
            }
            let (x32, w32, b32) = (x.cast::<f32>(), w.cast::<f32>(), b.cast::<f32>());
            let want32 = conv3d_reference(&x32, &w32, Some(&b32), spec).unwrap();
            let g32 = Graph::new();
            let got32 = g32
                .constant(x32)
                .conv3d(g32.constant(w32), Some(g32.constant(b32)), spec)
                .unwrap()
                .value();
            for (a, b) in got32.data().iter().zip(want32.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn zero_kernel_returns_bias() {
        let mut rng = Rng::new(9);
        let x = random(&mut rng, &[2, 4, 4, 4]);
        let w = Tensor::zeros(&[3, 2, 3, 3, 3]);
        let b = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let g = Graph::new();
        let y = g
            .constant(x)
            .conv3d(g.constant(w), Some(g.constant(b)), Conv3dSpec::new(1, 1))
            .unwrap()
            .value();
        for c in 0..3 {
            let expect = [0.5, -1.0, 2.0][c];
            assert!(y.data()[c * 64..(c + 1) * 64].iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn transposed_matches_scatter_reference() {
        let mut rng = Rng::new(6);
        for (xs, ws, spec) in [
            ([3, 2, 3, 2], [3, 2, 3, 3, 3], ConvTranspose3dSpec::new(2, 1, 1)),
            ([2, 3, 3, 3], [2, 4, 2, 2, 2], ConvTranspose3dSpec::new(2, 0, 0)),
            ([1, 4, 4, 4], [1, 1, 3, 3, 3], ConvTranspose3dSpec::new(1, 1, 0)),
        ] {
            let x = random(&mut rng, &xs);
            let w = random(&mut rng, &ws);
            let b = random(&mut rng, &[ws[1]]);
            let want = conv_transpose3d_reference(&x, &w, Some(&b), spec).unwrap();
            let g = Graph::new();
            let got = g
                .constant(x)
                .conv_transpose3d(g.constant(w), Some(g.constant(b)), spec)
                .unwrap()
                .value();
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn transposed_doubles_extent() {
        let g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(&[384, 2, 2, 2]));
        let w = g.constant(Tensor::<f64>::zeros(&[384, 192, 3, 3, 3]));
        let y = x.conv_transpose3d(w, None, ConvTranspose3dSpec::new(2, 1, 1)).unwrap();
        assert_eq!(y.shape(), vec![192, 4, 4, 4]);
    }

    #[test]
    fn mismatched_channels_error() {
        let g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(&[3, 4, 4, 4]));
        let w = g.constant(Tensor::<f64>::zeros(&[2, 2, 3, 3, 3]));
        let err = x.conv3d(w, None, Conv3dSpec::new(1, 1)).unwrap_err();
        assert!(err.to_string().contains("[3, 4, 4, 4]"));
    }
}
