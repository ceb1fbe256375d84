//! Small convolutional feature extractor used for desk-scale experiments
//! and as the architecture of the synthetic-pretraining oracle.
//!
//! Three stages of (3x3 conv, ReLU, 2x2 average pool except after the last
//! conv) followed by global average pooling. Channel-major planes
//! internally; all kernels are written against flat slices so the compiler
//! can vectorize the inner rows.

use ndarray::Array3;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{fl, Scalar};

use super::{ExtractorTrace, FeatureExtractor};

/// Shape configuration of [`TinyConvNet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyConvSpec {
    /// Expected square input edge; must be a multiple of 4 and at least 8.
    pub input_size: usize,
    /// Output channels of the three conv stages; the last is the feature
    /// width.
    pub channels: [usize; 3],
}

impl Default for TinyConvSpec {
    fn default() -> Self {
        TinyConvSpec { input_size: 32, channels: [6, 12, 24] }
    }
}

impl TinyConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 8 || self.input_size % 4 != 0 {
            return Err(Error::config(format!(
                "tiny conv input size must be a multiple of 4 and >= 8, got {}",
                self.input_size
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::config("tiny conv channel widths must be positive"));
        }
        Ok(())
    }

    pub fn architecture_id(&self) -> String {
        format!(
            "tiny_conv/in{}/c{}-{}-{}",
            self.input_size, self.channels[0], self.channels[1], self.channels[2]
        )
    }

    /// Parses ids produced by [`Self::architecture_id`].
    pub fn parse_id(id: &str) -> Result<Self> {
        let bad = || Error::data(format!("unrecognized tiny_conv architecture id '{id}'"));
        let mut parts = id.split('/');
        if parts.next() != Some("tiny_conv") {
            return Err(bad());
        }
        let input_size = parts
            .next()
            .and_then(|p| p.strip_prefix("in"))
            .and_then(|p| p.parse().ok())
            .ok_or_else(bad)?;
        let channels_part = parts.next().and_then(|p| p.strip_prefix('c')).ok_or_else(bad)?;
        let mut channels = [0usize; 3];
        let mut it = channels_part.split('-');
        for c in channels.iter_mut() {
            *c = it.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        }
        if it.next().is_some() || parts.next().is_some() {
            return Err(bad());
        }
        let spec = TinyConvSpec { input_size, channels };
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-layer slicing of the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    w: [std::ops::Range<usize>; 3],
    b: [std::ops::Range<usize>; 3],
    total: usize,
}

fn layout(spec: &TinyConvSpec) -> Layout {
    let cin = [3, spec.channels[0], spec.channels[1]];
    let mut offset = 0usize;
    let mut w: [std::ops::Range<usize>; 3] = [0..0, 0..0, 0..0];
    let mut b: [std::ops::Range<usize>; 3] = [0..0, 0..0, 0..0];
    for i in 0..3 {
        let nw = spec.channels[i] * cin[i] * 9;
        w[i] = offset..offset + nw;
        offset += nw;
        b[i] = offset..offset + spec.channels[i];
        offset += spec.channels[i];
    }
    Layout { w, b, total: offset }
}

/// `dst[x] += a0*src[x-1] + a1*src[x] + a2*src[x+1]` with zero padding.
#[inline]
fn row_acc<T: Scalar>(dst: &mut [T], src: &[T], a0: T, a1: T, a2: T) {
    let w = dst.len();
    debug_assert_eq!(src.len(), w);
    if w == 1 {
        dst[0] += a1 * src[0];
        return;
    }
    dst[0] += a1 * src[0] + a2 * src[1];
    for (d, win) in dst[1..w - 1].iter_mut().zip(src.windows(3)) {
        *d += a0 * win[0] + a1 * win[1] + a2 * win[2];
    }
    dst[w - 1] += a0 * src[w - 2] + a1 * src[w - 1];
}

/// Dot product of `a` with `b` shifted by `kx-1`, zero padded.
#[inline]
fn shifted_dot<T: Scalar>(a: &[T], b: &[T], kx: usize) -> T {
    let w = a.len();
    let mut acc = T::zero();
    match kx {
        0 => {
            for x in 1..w {
                acc += a[x] * b[x - 1];
            }
        }
        1 => {
            for x in 0..w {
                acc += a[x] * b[x];
            }
        }
        _ => {
            for x in 0..w - 1 {
                acc += a[x] * b[x + 1];
            }
        }
    }
    acc
}

fn conv3x3_forward<T: Scalar>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let cout = bias.len();
    for co in 0..cout {
        let out_plane = &mut out[co * h * w..(co + 1) * h * w];
        out_plane.fill(bias[co]);
        for ci in 0..cin {
            let in_plane = &input[ci * h * w..(ci + 1) * h * w];
            let k = &weight[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
            for y in 0..h {
                for ky in 0..3usize {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let src = &in_plane[(sy - 1) * w..sy * w];
                    // split to satisfy the borrow checker
                    let dst = &mut out_plane[y * w..(y + 1) * w];
                    row_acc(dst, src, k[ky * 3], k[ky * 3 + 1], k[ky * 3 + 2]);
                }
            }
        }
    }
}

/// Accumulates `d_weight`, `d_bias`, and (when given) `d_input` for one
/// conv layer.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward<T: Scalar>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    d_out: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
    mut d_input: Option<&mut [T]>,
) {
    let cout = d_bias.len();
    for co in 0..cout {
        let d_plane = &d_out[co * h * w..(co + 1) * h * w];
        let mut bias_acc = T::zero();
        for v in d_plane {
            bias_acc += *v;
        }
        d_bias[co] += bias_acc;

        for ci in 0..cin {
            let in_plane = &input[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * cin + ci) * 9;
            let dk = &mut d_weight[kbase..kbase + 9];
            for ky in 0..3usize {
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let drow = &d_plane[y * w..(y + 1) * w];
                    let irow = &in_plane[(sy - 1) * w..sy * w];
                    for kx in 0..3usize {
                        dk[ky * 3 + kx] += shifted_dot(drow, irow, kx);
                    }
                }
            }
            if let Some(di) = d_input.as_deref_mut() {
                let di_plane = &mut di[ci * h * w..(ci + 1) * h * w];
                let k = &weight[kbase..kbase + 9];
                for sy in 0..h {
                    for ky in 0..3usize {
                        // out row that consumed input row sy at offset ky
                        let oy = sy + 1;
                        if oy < ky || oy - ky >= h {
                            continue;
                        }
                        let drow = &d_plane[(oy - ky) * w..(oy - ky + 1) * w];
                        let dst = &mut di_plane[sy * w..(sy + 1) * w];
                        // kx=2 pairs with src index x-1, kx=0 with x+1
                        row_acc(dst, drow, k[ky * 3 + 2], k[ky * 3 + 1], k[ky * 3]);
                    }
                }
            }
        }
    }
}

fn relu_in_place<T: Scalar>(xs: &mut [T]) {
    for x in xs {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Zeroes gradient entries where the forward activation was clamped.
fn relu_backward<T: Scalar>(activations: &[T], grads: &mut [T]) {
    for (g, a) in grads.iter_mut().zip(activations) {
        if *a <= T::zero() {
            *g = T::zero();
        }
    }
}

fn avgpool2_forward<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = fl::<T>(0.25);
    for ci in 0..c {
        let ip = &input[ci * h * w..(ci + 1) * h * w];
        let op = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for y in 0..oh {
            let r0 = &ip[(2 * y) * w..(2 * y) * w + w];
            let r1 = &ip[(2 * y + 1) * w..(2 * y + 1) * w + w];
            let orow = &mut op[y * ow..(y + 1) * ow];
            for x in 0..ow {
                orow[x] = (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * quarter;
            }
        }
    }
}

fn avgpool2_backward<T: Scalar>(d_out: &[T], c: usize, h: usize, w: usize, d_in: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = fl::<T>(0.25);
    for ci in 0..c {
        let dop = &d_out[ci * oh * ow..(ci + 1) * oh * ow];
        let dip = &mut d_in[ci * h * w..(ci + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let g = dop[y * ow + x] * quarter;
                dip[(2 * y) * w + 2 * x] += g;
                dip[(2 * y) * w + 2 * x + 1] += g;
                dip[(2 * y + 1) * w + 2 * x] += g;
                dip[(2 * y + 1) * w + 2 * x + 1] += g;
            }
        }
    }
}

struct Trace<T> {
    input: Vec<T>,   // 3 x s x s
    act1: Vec<T>,    // c0 x s x s (post relu)
    pool1: Vec<T>,   // c0 x s/2 x s/2
    act2: Vec<T>,    // c1 x s/2 x s/2
    pool2: Vec<T>,   // c1 x s/4 x s/4
    act3: Vec<T>,    // c2 x s/4 x s/4
}

/// The bundled small conv net.
#[derive(Debug, Clone)]
pub struct TinyConvNet<T> {
    spec: TinyConvSpec,
    params: Vec<T>,
}

impl<T: Scalar> TinyConvNet<T> {
    /// He-initialized network with zero biases.
    pub fn init(spec: TinyConvSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let lay = layout(&spec);
        let mut params = vec![T::zero(); lay.total];
        let mut r = rng::stream(seed, &[0x7469_6e79 /* "tiny" */]);
        let cin = [3, spec.channels[0], spec.channels[1]];
        for i in 0..3 {
            let std = (2.0 / (cin[i] * 9) as f64).sqrt();
            let normal = Normal::new(0.0f64, std).expect("valid std");
            for v in &mut params[lay.w[i].clone()] {
                *v = fl::<T>(normal.sample(&mut r));
            }
        }
        Ok(TinyConvNet { spec, params })
    }

    /// Reconstructs a network from its architecture id and parameters.
    pub fn from_parts(spec: TinyConvSpec, params: Vec<T>) -> Result<Self> {
        spec.validate()?;
        let lay = layout(&spec);
        if params.len() != lay.total {
            return Err(Error::data(format!(
                "tiny conv '{}' expects {} params, got {}",
                spec.architecture_id(),
                lay.total,
                params.len()
            )));
        }
        Ok(TinyConvNet { spec, params })
    }

    pub fn spec(&self) -> &TinyConvSpec {
        &self.spec
    }

    fn planes_from_image(&self, image: &Array3<T>) -> Result<Vec<T>> {
        let s = self.spec.input_size;
        if image.dim() != (s, s, 3) {
            return Err(Error::contract(format!(
                "tiny conv expects ({s}, {s}, 3) input, got {:?}",
                image.dim()
            )));
        }
        let mut planes = vec![T::zero(); 3 * s * s];
        for ((y, x, c), v) in image.indexed_iter() {
            planes[c * s * s + y * s + x] = *v;
        }
        Ok(planes)
    }

    fn run_forward(&self, image: &Array3<T>) -> Result<(Vec<T>, Trace<T>)> {
        let s = self.spec.input_size;
        let [c0, c1, c2] = self.spec.channels;
        let lay = layout(&self.spec);
        let p = &self.params;

        let input = self.planes_from_image(image)?;
        let mut act1 = vec![T::zero(); c0 * s * s];
        conv3x3_forward(&input, 3, s, s, &p[lay.w[0].clone()], &p[lay.b[0].clone()], &mut act1);
        relu_in_place(&mut act1);

        let s2 = s / 2;
        let mut pool1 = vec![T::zero(); c0 * s2 * s2];
        avgpool2_forward(&act1, c0, s, s, &mut pool1);

        let mut act2 = vec![T::zero(); c1 * s2 * s2];
        conv3x3_forward(&pool1, c0, s2, s2, &p[lay.w[1].clone()], &p[lay.b[1].clone()], &mut act2);
        relu_in_place(&mut act2);

        let s4 = s / 4;
        let mut pool2 = vec![T::zero(); c1 * s4 * s4];
        avgpool2_forward(&act2, c1, s2, s2, &mut pool2);

        let mut act3 = vec![T::zero(); c2 * s4 * s4];
        conv3x3_forward(&pool2, c1, s4, s4, &p[lay.w[2].clone()], &p[lay.b[2].clone()], &mut act3);
        relu_in_place(&mut act3);

        let inv_area = fl::<T>(1.0 / (s4 * s4) as f64);
        let mut features = vec![T::zero(); c2];
        for (c, f) in features.iter_mut().enumerate() {
            let plane = &act3[c * s4 * s4..(c + 1) * s4 * s4];
            let mut acc = T::zero();
            for v in plane {
                acc += *v;
            }
            *f = acc * inv_area;
        }

        Ok((features, Trace { input, act1, pool1, act2, pool2, act3 }))
    }
}

impl<T: Scalar> FeatureExtractor<T> for TinyConvNet<T> {
    fn architecture_id(&self) -> String {
        self.spec.architecture_id()
    }

    fn feature_dim(&self) -> usize {
        self.spec.channels[2]
    }

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn forward(&self, image: &Array3<T>) -> Result<Vec<T>> {
        Ok(self.run_forward(image)?.0)
    }

    fn forward_traced(&self, image: &Array3<T>) -> Result<(Vec<T>, ExtractorTrace)> {
        let (features, trace) = self.run_forward(image)?;
        Ok((features, Box::new(trace)))
    }

    fn backward(&self, trace: &ExtractorTrace, d_features: &[T], d_params: &mut [T]) -> Result<()> {
        let trace = trace
            .downcast_ref::<Trace<T>>()
            .ok_or_else(|| Error::contract("trace does not belong to a TinyConvNet of this scalar type"))?;
        if d_features.len() != self.feature_dim() {
            return Err(Error::contract(format!(
                "feature gradient width {} != {}",
                d_features.len(),
                self.feature_dim()
            )));
        }
        if d_params.len() != self.params.len() {
            return Err(Error::contract("parameter gradient buffer has wrong length"));
        }
        let s = self.spec.input_size;
        let (s2, s4) = (s / 2, s / 4);
        let [c0, c1, c2] = self.spec.channels;
        let lay = layout(&self.spec);
        let p = &self.params;

        // global average pool backward, fused with relu mask on act3
        let inv_area = fl::<T>(1.0 / (s4 * s4) as f64);
        let mut d_act3 = vec![T::zero(); c2 * s4 * s4];
        for c in 0..c2 {
            let g = d_features[c] * inv_area;
            for v in &mut d_act3[c * s4 * s4..(c + 1) * s4 * s4] {
                *v = g;
            }
        }
        relu_backward(&trace.act3, &mut d_act3);

        let mut d_pool2 = vec![T::zero(); c1 * s4 * s4];
        {
            let (dw, db) = split_wb(d_params, &lay, 2);
            conv3x3_backward(
                &trace.pool2,
                c1,
                s4,
                s4,
                &p[lay.w[2].clone()],
                &d_act3,
                dw,
                db,
                Some(&mut d_pool2),
            );
        }

        let mut d_act2 = vec![T::zero(); c1 * s2 * s2];
        avgpool2_backward(&d_pool2, c1, s2, s2, &mut d_act2);
        relu_backward(&trace.act2, &mut d_act2);

        let mut d_pool1 = vec![T::zero(); c0 * s2 * s2];
        {
            let (dw, db) = split_wb(d_params, &lay, 1);
            conv3x3_backward(
                &trace.pool1,
                c0,
                s2,
                s2,
                &p[lay.w[1].clone()],
                &d_act2,
                dw,
                db,
                Some(&mut d_pool1),
            );
        }

        let mut d_act1 = vec![T::zero(); c0 * s * s];
        avgpool2_backward(&d_pool1, c0, s, s, &mut d_act1);
        relu_backward(&trace.act1, &mut d_act1);

        {
            let (dw, db) = split_wb(d_params, &lay, 0);
            conv3x3_backward(&trace.input, 3, s, s, &p[lay.w[0].clone()], &d_act1, dw, db, None);
        }
        Ok(())
    }

    fn boxed_clone(&self) -> Box<dyn FeatureExtractor<T>> {
        Box::new(self.clone())
    }
}

/// Mutable weight/bias gradient slices for layer `i`. Relies on the layout
/// placing each layer's bias right after its weights.
fn split_wb<'a, T>(d_params: &'a mut [T], lay: &Layout, i: usize) -> (&'a mut [T], &'a mut [T]) {
    let (head, _) = d_params.split_at_mut(lay.b[i].end);
    let (head, db) = head.split_at_mut(lay.b[i].start);
    let (_, dw) = head.split_at_mut(lay.w[i].start);
    (dw, db)
}
