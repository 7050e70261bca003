//! Fault-free BNN inference: binary conv/dense layers evaluated as
//! XNOR-popcount, plus the integer "CMOS" stages (threshold, pooling,
//! flatten, argmax).
//!
//! Activations are NHWC without the batch axis: a conv input is `[h][w][c]`
//! and its reduction index enumerates `(ky, kx, in_ch)` row-major. Fault
//! scheduling depends on that order.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::bitpack::{copy_bits, dot_words, words_for, BinaryTensor, PackedBits, Sign};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{IntTensor, RealTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero-area-preserving padding; padded positions read as `-1`.
    Same,
}

/// Row-major binary weight matrix with every row starting on a word boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct WeightRows {
    row_len: usize,
    stride: usize,
    words: Vec<u64>,
}

impl WeightRows {
    fn new(weights: &BinaryTensor, rows: usize) -> Self {
        let row_len = weights.len() / rows;
        let stride = words_for(row_len);
        let mut words = vec![0u64; stride * rows];
        for r in 0..rows {
            copy_bits(
                weights.bits().words(),
                r * row_len,
                &mut words[r * stride..(r + 1) * stride],
                0,
                row_len,
            );
        }
        Self {
            row_len,
            stride,
            words,
        }
    }

    #[inline]
    pub(crate) fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.stride..(r + 1) * self.stride]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: Padding,
    weights: BinaryTensor,
    rows: WeightRows,
}

impl Conv2d {
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> [usize; 2] {
        self.kernel
    }

    pub fn stride(&self) -> [usize; 2] {
        self.stride
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    /// `[out_ch][k_h][k_w][in_ch]`
    pub fn weights(&self) -> &BinaryTensor {
        &self.weights
    }

    /// Products per output element: `k_h * k_w * in_ch`.
    pub fn reduction_len(&self) -> usize {
        self.kernel[0] * self.kernel[1] * self.in_channels
    }

    pub(crate) fn weight_rows(&self) -> &WeightRows {
        &self.rows
    }

    /// Output `(h, w)` and leading padding `(top, left)` for an input plane.
    pub fn geometry(&self, in_h: usize, in_w: usize) -> Option<ConvGeometry> {
        let dim = |n: usize, k: usize, s: usize| -> Option<(usize, usize)> {
            match self.padding {
                Padding::Valid => (n >= k).then(|| ((n - k) / s + 1, 0)),
                Padding::Same => {
                    let out = n.div_ceil(s);
                    let total = ((out - 1) * s + k).saturating_sub(n);
                    Some((out, total / 2))
                }
            }
        };
        let (out_h, pad_top) = dim(in_h, self.kernel[0], self.stride[0])?;
        let (out_w, pad_left) = dim(in_w, self.kernel[1], self.stride[1])?;
        Some(ConvGeometry {
            in_h,
            in_w,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// im2col of a binary input: one word-aligned receptive field per output
/// position, in `(ky, kx, in_ch)` order. Padding bits read as `-1`.
pub(crate) struct Patches {
    pub(crate) positions: usize,
    pub(crate) stride: usize,
    pub(crate) words: Vec<u64>,
}

impl Patches {
    pub(crate) fn build(conv: &Conv2d, g: &ConvGeometry, input: &BinaryTensor) -> Self {
        let c = conv.in_channels;
        let [kh, kw] = conv.kernel;
        let [sh, sw] = conv.stride;
        let stride = words_for(conv.reduction_len());
        let positions = g.out_h * g.out_w;
        let mut words = vec![0u64; stride * positions];
        let src = input.bits().words();
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let p = oy * g.out_w + ox;
                let dst = &mut words[p * stride..(p + 1) * stride];
                let x0 = (ox * sw) as isize - g.pad_left as isize;
                let kx_lo = (-x0).max(0) as usize;
                let kx_hi = ((g.in_w as isize - x0).min(kw as isize)).max(0) as usize;
                if kx_lo >= kx_hi {
                    continue;
                }
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let ix = (x0 + kx_lo as isize) as usize;
                    copy_bits(
                        src,
                        (iy as usize * g.in_w + ix) * c,
                        dst,
                        (ky * kw + kx_lo) * c,
                        (kx_hi - kx_lo) * c,
                    );
                }
            }
        }
        Self {
            positions,
            stride,
            words,
        }
    }

    #[inline]
    pub(crate) fn patch(&self, p: usize) -> &[u64] {
        &self.words[p * self.stride..(p + 1) * self.stride]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dense {
    in_features: usize,
    out_features: usize,
    weights: BinaryTensor,
    rows: WeightRows,
}

impl Dense {
    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    /// `[out][in]`
    pub fn weights(&self) -> &BinaryTensor {
        &self.weights
    }

    pub(crate) fn weight_rows(&self) -> &WeightRows {
        &self.rows
    }
}

/// Folded batch-norm + sign: `+1` iff `d_c * (x - t_c) >= 0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Threshold {
    thresholds: Vec<i32>,
    directions: Vec<Sign>,
}

impl Threshold {
    pub fn thresholds(&self) -> &[i32] {
        &self.thresholds
    }

    pub fn directions(&self) -> &[Sign] {
        &self.directions
    }

    pub fn channels(&self) -> usize {
        self.thresholds.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool2d {
    pub window: [usize; 2],
    pub stride: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    InputBinarize { threshold: f64 },
    BinaryConv2D(Conv2d),
    BinaryDense(Dense),
    Threshold(Threshold),
    MaxPool2D(MaxPool2d),
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn input_binarize(name: impl Into<String>, threshold: f64) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::InputBinarize { threshold },
        }
    }

    pub fn conv2d(
        name: impl Into<String>,
        in_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: Padding,
        weights: BinaryTensor,
    ) -> Result<Self> {
        let name = name.into();
        if weights.shape().len() != 4 {
            return Err(Error::model(&name, "weights", "expected [out][k_h][k_w][in]"));
        }
        let out_channels = weights.shape()[0];
        let expect = [out_channels, kernel[0], kernel[1], in_channels];
        if weights.shape() != expect {
            return Err(Error::model(
                &name,
                "weights",
                format!("shape {:?}, expected {:?}", weights.shape(), expect),
            ));
        }
        if expect.contains(&0) {
            return Err(Error::model(&name, "kernel", "zero-sized dimension"));
        }
        if stride.contains(&0) {
            return Err(Error::model(&name, "stride", "must be positive"));
        }
        let rows = WeightRows::new(&weights, out_channels);
        Ok(Self {
            name,
            kind: LayerKind::BinaryConv2D(Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weights,
                rows,
            }),
        })
    }

    pub fn dense(name: impl Into<String>, weights: BinaryTensor) -> Result<Self> {
        let name = name.into();
        let &[out_features, in_features] = weights.shape() else {
            return Err(Error::model(&name, "weights", "expected [out][in]"));
        };
        if out_features == 0 || in_features == 0 {
            return Err(Error::model(&name, "weights", "zero-sized dimension"));
        }
        let rows = WeightRows::new(&weights, out_features);
        Ok(Self {
            name,
            kind: LayerKind::BinaryDense(Dense {
                in_features,
                out_features,
                weights,
                rows,
            }),
        })
    }

    pub fn threshold(
        name: impl Into<String>,
        thresholds: Vec<i32>,
        directions: Vec<i32>,
    ) -> Result<Self> {
        let name = name.into();
        if thresholds.len() != directions.len() || thresholds.is_empty() {
            return Err(Error::model(
                &name,
                "directions",
                format!(
                    "{} thresholds but {} directions",
                    thresholds.len(),
                    directions.len()
                ),
            ));
        }
        let directions = directions
            .iter()
            .map(|&d| {
                Sign::from_value(d)
                    .ok_or_else(|| Error::model(&name, "directions", format!("{d} is not ±1")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            name,
            kind: LayerKind::Threshold(Threshold {
                thresholds,
                directions,
            }),
        })
    }

    pub fn max_pool2d(name: impl Into<String>, window: [usize; 2], stride: [usize; 2]) -> Result<Self> {
        let name = name.into();
        if window.contains(&0) || stride.contains(&0) {
            return Err(Error::model(&name, "window", "window and stride must be positive"));
        }
        Ok(Self {
            name,
            kind: LayerKind::MaxPool2D(MaxPool2d { window, stride }),
        })
    }

    pub fn flatten(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Flatten,
        }
    }

    /// Only binary conv and dense layers are mapped onto crossbars.
    pub fn is_injectable(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::BinaryConv2D(_) | LayerKind::BinaryDense(_)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActKind {
    Real,
    Binary,
    Int,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActShape {
    pub kind: ActKind,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Activation {
    Binary(BinaryTensor),
    Int(IntTensor),
}

impl Activation {
    pub fn shape(&self) -> &[usize] {
        match self {
            Activation::Binary(t) => t.shape(),
            Activation::Int(t) => t.shape(),
        }
    }
}

pub fn binarize_input<T: Real>(image: &RealTensor<T>, threshold: T) -> BinaryTensor {
    let bits = PackedBits::from_bools(image.data().iter().map(|&v| v > threshold));
    BinaryTensor::from_bits(bits, image.shape().to_vec()).expect("same element count")
}

fn conv_geometry(name: &str, conv: &Conv2d, shape: &[usize]) -> Result<ConvGeometry> {
    let &[h, w, c] = shape else {
        return Err(Error::shape(name, format!("conv input must be [h][w][c], got {shape:?}")));
    };
    if c != conv.in_channels {
        return Err(Error::shape(
            name,
            format!("input has {c} channels, kernel expects {}", conv.in_channels),
        ));
    }
    conv.geometry(h, w).ok_or_else(|| {
        Error::shape(
            name,
            format!("input {h}x{w} smaller than kernel {:?}", conv.kernel),
        )
    })
}

pub(crate) fn conv_forward(name: &str, conv: &Conv2d, input: &BinaryTensor) -> Result<IntTensor> {
    let g = conv_geometry(name, conv, input.shape())?;
    let patches = Patches::build(conv, &g, input);
    let k = conv.reduction_len();
    let oc = conv.out_channels;
    let mut out = Vec::with_capacity(patches.positions * oc);
    for p in 0..patches.positions {
        let patch = patches.patch(p);
        for c in 0..oc {
            out.push(dot_words(patch, conv.rows.row(c), k));
        }
    }
    IntTensor::new(vec![g.out_h, g.out_w, oc], out)
}

pub(crate) fn check_dense_input(name: &str, dense: &Dense, input: &BinaryTensor) -> Result<()> {
    if input.shape() != [dense.in_features] {
        return Err(Error::shape(
            name,
            format!(
                "dense input must be [{}], got {:?}",
                dense.in_features,
                input.shape()
            ),
        ));
    }
    Ok(())
}

pub(crate) fn dense_forward(name: &str, dense: &Dense, input: &BinaryTensor) -> Result<IntTensor> {
    check_dense_input(name, dense, input)?;
    let x = input.bits().words();
    let out = (0..dense.out_features)
        .map(|j| dot_words(x, dense.rows.row(j), dense.in_features))
        .collect();
    IntTensor::new(vec![dense.out_features], out)
}

fn wrong_kind(layer: &LayerSpec, want: &str) -> Error {
    Error::shape(&layer.name, format!("not a {want} layer"))
}

/// Binary convolution: each output is the XNOR-popcount of its receptive field.
pub fn conv2d_binary(input: &BinaryTensor, layer: &LayerSpec) -> Result<IntTensor> {
    match &layer.kind {
        LayerKind::BinaryConv2D(conv) => conv_forward(&layer.name, conv, input),
        _ => Err(wrong_kind(layer, "binary conv2d")),
    }
}

pub fn dense_binary(input: &BinaryTensor, layer: &LayerSpec) -> Result<IntTensor> {
    match &layer.kind {
        LayerKind::BinaryDense(dense) => dense_forward(&layer.name, dense, input),
        _ => Err(wrong_kind(layer, "binary dense")),
    }
}

/// Per-channel comparison over the last axis; ties resolve to `+1`.
pub fn threshold(x: &IntTensor, thresholds: &[i32], directions: &[Sign]) -> Result<BinaryTensor> {
    let channels = thresholds.len();
    if channels == 0
        || directions.len() != channels
        || x.shape().last().copied() != Some(channels)
    {
        return Err(Error::shape(
            "threshold",
            format!(
                "input {:?} vs {} thresholds / {} directions",
                x.shape(),
                channels,
                directions.len()
            ),
        ));
    }
    let bits = PackedBits::from_bools(x.data().iter().enumerate().map(|(i, &v)| {
        let c = i % channels;
        directions[c].value() as i64 * (v as i64 - thresholds[c] as i64) >= 0
    }));
    BinaryTensor::from_bits(bits, x.shape().to_vec())
}

fn pool_dims(name: &str, pool: &MaxPool2d, shape: &[usize]) -> Result<[usize; 5]> {
    let &[h, w, c] = shape else {
        return Err(Error::shape(name, format!("pool input must be [h][w][c], got {shape:?}")));
    };
    if h < pool.window[0] || w < pool.window[1] {
        return Err(Error::shape(
            name,
            format!("input {h}x{w} smaller than window {:?}", pool.window),
        ));
    }
    let oh = (h - pool.window[0]) / pool.stride[0] + 1;
    let ow = (w - pool.window[1]) / pool.stride[1] + 1;
    Ok([h, w, c, oh, ow])
}

fn pool_generic<V: Copy + Ord>(
    pool: &MaxPool2d,
    [_, w, c, oh, ow]: [usize; 5],
    get: impl Fn(usize) -> V,
) -> Vec<V> {
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = None;
                for ky in 0..pool.window[0] {
                    for kx in 0..pool.window[1] {
                        let y = oy * pool.stride[0] + ky;
                        let x = ox * pool.stride[1] + kx;
                        let v = get((y * w + x) * c + ch);
                        best = Some(best.map_or(v, |b: V| b.max(v)));
                    }
                }
                out.push(best.expect("non-empty window"));
            }
        }
    }
    out
}

/// Per-channel window maximum over an `[h][w][c]` accumulator tensor.
pub fn maxpool2d(x: &IntTensor, pool: &MaxPool2d) -> Result<IntTensor> {
    let dims = pool_dims("maxpool2d", pool, x.shape())?;
    let data = pool_generic(pool, dims, |i| x.data()[i]);
    IntTensor::new(vec![dims[3], dims[4], dims[2]], data)
}

/// Max over `{-1, +1}` is a logical OR of the bits.
pub fn maxpool2d_binary(x: &BinaryTensor, pool: &MaxPool2d) -> Result<BinaryTensor> {
    let dims = pool_dims("maxpool2d", pool, x.shape())?;
    let data = pool_generic(pool, dims, |i| x.bits().get(i));
    BinaryTensor::from_bits(PackedBits::from_bools(data), vec![dims[3], dims[4], dims[2]])
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[i32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Computes the XNOR layers of a forward pass. The fault-free backend is
/// [`FaultFree`]; fault injection sessions provide the others.
pub trait XnorBackend {
    fn conv2d(&mut self, layer: &LayerSpec, conv: &Conv2d, input: &BinaryTensor) -> Result<IntTensor>;

    fn dense(&mut self, layer: &LayerSpec, dense: &Dense, input: &BinaryTensor) -> Result<IntTensor>;

    /// Called after every layer with that layer's output.
    fn after_layer(&mut self, _index: usize, _layer: &LayerSpec, _out: &mut Activation) -> Result<()> {
        Ok(())
    }

    /// Called once per image after the last layer.
    fn finish_image(&mut self) {}
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FaultFree;

impl XnorBackend for FaultFree {
    fn conv2d(&mut self, layer: &LayerSpec, conv: &Conv2d, input: &BinaryTensor) -> Result<IntTensor> {
        conv_forward(&layer.name, conv, input)
    }

    fn dense(&mut self, layer: &LayerSpec, dense: &Dense, input: &BinaryTensor) -> Result<IntTensor> {
        dense_forward(&layer.name, dense, input)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub class: usize,
    pub logits: Vec<i32>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<i32>) -> Self {
        Self {
            class: argmax(&logits),
            logits,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    name: String,
    input_shape: Vec<usize>,
    class_count: usize,
    input_threshold: f64,
    layers: Vec<LayerSpec>,
    shapes: Vec<ActShape>,
}

impl ModelGraph {
    /// Validates layer names and the shape chain. When the first layer is not
    /// an `InputBinarize`, real inputs are binarized at `input_threshold`.
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        class_count: usize,
        input_threshold: f64,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        let mut model = Self {
            name: name.into(),
            input_shape,
            class_count,
            input_threshold,
            layers,
            shapes: Vec::new(),
        };
        model.shapes = model.compute_shapes()?;
        Ok(model)
    }

    fn compute_shapes(&self) -> Result<Vec<ActShape>> {
        let mut seen = HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::model(&l.name, "name", "duplicate layer name"));
            }
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::model(&self.name, "input_shape", "must be non-empty and positive"));
        }
        let mut cur = ActShape {
            kind: ActKind::Real,
            shape: self.input_shape.clone(),
        };
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let name = layer.name.as_str();
            if cur.kind == ActKind::Real && !matches!(layer.kind, LayerKind::InputBinarize { .. }) {
                cur.kind = ActKind::Binary;
            }
            let need = |cur: &ActShape, kind: ActKind| -> Result<()> {
                if cur.kind != kind {
                    return Err(Error::shape(
                        name,
                        format!("expects {kind:?} input, previous layer yields {:?}", cur.kind),
                    ));
                }
                Ok(())
            };
            cur = match &layer.kind {
                LayerKind::InputBinarize { .. } => {
                    if i != 0 {
                        return Err(Error::model(name, "kind", "input_binarize must be the first layer"));
                    }
                    ActShape {
                        kind: ActKind::Binary,
                        shape: cur.shape,
                    }
                }
                LayerKind::BinaryConv2D(conv) => {
                    need(&cur, ActKind::Binary)?;
                    let g = conv_geometry(name, conv, &cur.shape)?;
                    ActShape {
                        kind: ActKind::Int,
                        shape: vec![g.out_h, g.out_w, conv.out_channels],
                    }
                }
                LayerKind::BinaryDense(dense) => {
                    need(&cur, ActKind::Binary)?;
                    if cur.shape != [dense.in_features] {
                        return Err(Error::shape(
                            name,
                            format!("dense input must be [{}], got {:?}", dense.in_features, cur.shape),
                        ));
                    }
                    ActShape {
                        kind: ActKind::Int,
                        shape: vec![dense.out_features],
                    }
                }
                LayerKind::Threshold(t) => {
                    need(&cur, ActKind::Int)?;
                    if cur.shape.last() != Some(&t.channels()) {
                        return Err(Error::shape(
                            name,
                            format!("{} thresholds for input {:?}", t.channels(), cur.shape),
                        ));
                    }
                    ActShape {
                        kind: ActKind::Binary,
                        shape: cur.shape,
                    }
                }
                LayerKind::MaxPool2D(pool) => {
                    let d = pool_dims(name, pool, &cur.shape)?;
                    ActShape {
                        kind: cur.kind,
                        shape: vec![d[3], d[4], d[2]],
                    }
                }
                LayerKind::Flatten => ActShape {
                    kind: cur.kind,
                    shape: vec![cur.shape.iter().product()],
                },
            };
            shapes.push(cur.clone());
        }
        if cur.kind != ActKind::Int || cur.shape != [self.class_count] {
            return Err(Error::model(
                &self.name,
                "class_count",
                format!(
                    "last layer yields {:?} {:?}, expected integer logits [{}]",
                    cur.kind, cur.shape, self.class_count
                ),
            ));
        }
        Ok(shapes)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_threshold(&self) -> f64 {
        self.input_threshold
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Output shape of every layer, in order.
    pub fn shape_chain(&self) -> &[ActShape] {
        &self.shapes
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn injectable_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_injectable())
    }

    /// Output shape of `layer_index` (for conv: `[out_h][out_w][out_ch]`).
    pub fn output_shape(&self, layer_index: usize) -> &[usize] {
        &self.shapes[layer_index].shape
    }

    /// Input shape seen by `layer_index`.
    pub fn layer_input_shape(&self, layer_index: usize) -> &[usize] {
        if layer_index == 0 {
            &self.input_shape
        } else {
            &self.shapes[layer_index - 1].shape
        }
    }

    pub fn forward<T: Real, B: XnorBackend + ?Sized>(
        &self,
        image: &RealTensor<T>,
        backend: &mut B,
    ) -> Result<IntTensor> {
        if image.shape() != self.input_shape.as_slice() {
            return Err(Error::shape(
                &self.name,
                format!("image shape {:?}, model expects {:?}", image.shape(), self.input_shape),
            ));
        }
        let mut act = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = match act.take() {
                Some(a) => a,
                None => {
                    let theta = match layer.kind {
                        LayerKind::InputBinarize { threshold } => threshold,
                        _ => self.input_threshold,
                    };
                    let theta = T::from_f64(theta).ok_or_else(|| {
                        Error::model(&layer.name, "threshold", "not representable")
                    })?;
                    let bin = Activation::Binary(binarize_input(image, theta));
                    if let LayerKind::InputBinarize { .. } = layer.kind {
                        let mut bin = bin;
                        backend.after_layer(i, layer, &mut bin)?;
                        act = Some(bin);
                        continue;
                    }
                    bin
                }
            };
            let mut out = self.apply(layer, input, backend)?;
            backend.after_layer(i, layer, &mut out)?;
            act = Some(out);
        }
        backend.finish_image();
        match act {
            Some(Activation::Int(logits)) => Ok(logits),
            _ => Err(Error::model(&self.name, "layers", "model produced no integer logits")),
        }
    }

    fn apply<B: XnorBackend + ?Sized>(
        &self,
        layer: &LayerSpec,
        input: Activation,
        backend: &mut B,
    ) -> Result<Activation> {
        let name = layer.name.as_str();
        let mismatch = |what: &str| Error::shape(name, format!("expects {what} input"));
        Ok(match (&layer.kind, input) {
            (LayerKind::BinaryConv2D(conv), Activation::Binary(x)) => {
                Activation::Int(backend.conv2d(layer, conv, &x)?)
            }
            (LayerKind::BinaryDense(dense), Activation::Binary(x)) => {
                Activation::Int(backend.dense(layer, dense, &x)?)
            }
            (LayerKind::Threshold(t), Activation::Int(x)) => {
                Activation::Binary(threshold(&x, &t.thresholds, &t.directions)?)
            }
            (LayerKind::MaxPool2D(pool), Activation::Int(x)) => Activation::Int(maxpool2d(&x, pool)?),
            (LayerKind::MaxPool2D(pool), Activation::Binary(x)) => {
                Activation::Binary(maxpool2d_binary(&x, pool)?)
            }
            (LayerKind::Flatten, Activation::Int(x)) => {
                let n = x.len();
                Activation::Int(x.reshape(vec![n]))
            }
            (LayerKind::Flatten, Activation::Binary(x)) => {
                let n = x.len();
                Activation::Binary(x.reshape(vec![n]))
            }
            (LayerKind::InputBinarize { .. }, _) => return Err(mismatch("real")),
            (LayerKind::Threshold(_), _) => return Err(mismatch("integer")),
            (_, _) => return Err(mismatch("binary")),
        })
    }

    pub fn infer_image<T: Real>(&self, image: &RealTensor<T>) -> Result<Prediction> {
        Ok(Prediction::from_logits(
            self.forward(image, &mut FaultFree)?.into_data(),
        ))
    }

    /// Fault-free inference over a batch; images are processed in parallel
    /// and results keep input order.
    pub fn infer_batch<T: Real>(&self, images: &[RealTensor<T>]) -> Result<Vec<Prediction>> {
        images.par_iter().map(|img| self.infer_image(img)).collect()
    }
}
