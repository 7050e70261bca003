//! Fault injection during inference.
//!
//! Faults perturb individual XNOR products before accumulation. Three modes:
//!
//! * [`Mode::Exact`] walks every product in schedule order and routes it
//!   through [`faulty_product`]. Slow; it is the reference.
//! * [`Mode::Fast`] precomputes, per crossbar column, which reduction indices
//!   land on flipped or stuck gates and applies them with word-wide bit
//!   operations. Bit-identical to `Exact`.
//! * [`Mode::FeatureMap`] computes the layer fault-free and then XNORs the
//!   flattened mask, tiled by repetition, onto the binarized feature map
//!   produced by the next threshold stage. It approximates rather than
//!   reproduces the product-level semantics.
//!
//! When several masks target the same gate the resolved fault is stuck-at,
//! then bit-flip, then dynamic; among dynamic masks the first one wins.
//! A mask grid describes one crossbar and is replicated on every crossbar of
//! the layer; dynamic counters are kept per physical gate.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::bitpack::{copy_bits, words_for, xnor, BinaryTensor, PackedBits, Sign};
use crate::crossbar::{
    channel_hits, channel_rank, gate_op_counts, row_hits, schedule_conv_product, schedule_dense_product,
    CrossbarConfig, GateCoord, ProductGrid,
};
use crate::engine::{
    check_dense_input, conv_forward, dense_forward, Activation, Conv2d, Dense, LayerKind, LayerSpec, ModelGraph,
    Patches, Prediction, WeightRows, XnorBackend,
};
use crate::error::{Error, Result};
use crate::faultgen::{FaultMask, FaultType};
use crate::scalar::Real;
use crate::tensor::{IntTensor, RealTensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Exact,
    #[default]
    Fast,
    #[serde(rename = "featuremap")]
    FeatureMap,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Exact => "exact",
            Mode::Fast => "fast",
            Mode::FeatureMap => "featuremap",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Mode::Exact),
            "fast" => Ok(Mode::Fast),
            "featuremap" => Ok(Mode::FeatureMap),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (exact, fast, featuremap)"
            ))),
        }
    }
}

/// Resolved fault state of one gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateFault {
    #[default]
    Healthy,
    Flip,
    Stuck(Sign),
    /// Flips on every `(period + 1)`-th operation, starting with the first.
    Dynamic { period: u64 },
}

/// Product `p` as produced by a gate in state `fault` whose operation counter
/// reads `counter`.
#[inline]
pub fn faulty_product(p: Sign, fault: GateFault, counter: u64) -> Sign {
    match fault {
        GateFault::Healthy => p,
        GateFault::Flip => -p,
        GateFault::Stuck(s) => s,
        GateFault::Dynamic { period } => {
            if counter.is_multiple_of(period + 1) {
                -p
            } else {
                p
            }
        }
    }
}

/// Per-gate faults of one layer's grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerFaults {
    rows: usize,
    cols: usize,
    gates: Vec<GateFault>,
}

impl LayerFaults {
    pub fn from_masks<'a>(cfg: &CrossbarConfig, masks: impl IntoIterator<Item = &'a FaultMask>) -> Result<Self> {
        let mut gates = vec![GateFault::Healthy; cfg.gate_count()];
        for m in masks {
            m.check_config(cfg)?;
            for i in m.grid.iter_ones() {
                let new = match m.fault_type {
                    FaultType::StuckAt => GateFault::Stuck(Sign::from_bit(m.stuck.get(i))),
                    FaultType::BitFlip => GateFault::Flip,
                    FaultType::Dynamic => GateFault::Dynamic { period: m.period },
                };
                let slot = &mut gates[i];
                *slot = match (*slot, new) {
                    (GateFault::Healthy, n) => n,
                    (GateFault::Stuck(s), _) => GateFault::Stuck(s),
                    (_, GateFault::Stuck(s)) => GateFault::Stuck(s),
                    (GateFault::Flip, _) | (_, GateFault::Flip) => GateFault::Flip,
                    (old, _) => old,
                };
            }
        }
        Ok(Self {
            rows: cfg.gate_rows,
            cols: cfg.gate_cols,
            gates,
        })
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> GateFault {
        self.gates[row * self.cols + col]
    }

    pub fn has_dynamic(&self) -> bool {
        self.gates.iter().any(|g| matches!(g, GateFault::Dynamic { .. }))
    }

    pub fn is_healthy(&self) -> bool {
        self.gates.iter().all(|g| *g == GateFault::Healthy)
    }

    /// Flattened `(flip, stuck, stuck_values)` vectors for feature-map mode.
    /// A dynamic gate counts as flipped on image `image` iff
    /// `image % (period + 1) == 0`.
    pub fn featuremap_vectors(&self, image: u64) -> (PackedBits, PackedBits, PackedBits) {
        let n = self.rows * self.cols;
        let mut flip = PackedBits::zeros(n);
        let mut stuck = PackedBits::zeros(n);
        let mut vals = PackedBits::zeros(n);
        for (i, g) in self.gates.iter().enumerate() {
            match *g {
                GateFault::Healthy => {}
                GateFault::Flip => flip.set(i, true),
                GateFault::Dynamic { period } => flip.set(i, image.is_multiple_of(period + 1)),
                GateFault::Stuck(s) => {
                    stuck.set(i, true);
                    vals.set(i, s.bit());
                }
            }
        }
        (flip, stuck, vals)
    }
}

/// Per-column bit masks over the reduction index.
#[derive(Clone, Debug)]
struct FastPlan {
    words: usize,
    flip: Vec<u64>,
    stuck_sel: Vec<u64>,
    stuck_val: Vec<u64>,
    dynamic: Vec<Vec<(usize, u64)>>,
    touched: Vec<bool>,
}

impl FastPlan {
    fn new(faults: &LayerFaults, cfg: &CrossbarConfig, reduction: usize) -> Self {
        let words = words_for(reduction);
        let cols = cfg.gate_cols;
        let mut plan = Self {
            words,
            flip: vec![0; words * cols],
            stuck_sel: vec![0; words * cols],
            stuck_val: vec![0; words * cols],
            dynamic: vec![Vec::new(); cols],
            touched: vec![false; cols],
        };
        for col in 0..cols {
            for row in 0..cfg.gate_rows.min(reduction) {
                let fault = faults.at(row, col);
                if fault == GateFault::Healthy {
                    continue;
                }
                plan.touched[col] = true;
                if let GateFault::Dynamic { period } = fault {
                    plan.dynamic[col].push((row, period));
                    continue;
                }
                for k in (row..reduction).step_by(cfg.gate_rows) {
                    let (w, b) = (col * words + k / 64, 1u64 << (k % 64));
                    match fault {
                        GateFault::Flip => plan.flip[w] |= b,
                        GateFault::Stuck(s) => {
                            plan.stuck_sel[w] |= b;
                            if s == Sign::Pos {
                                plan.stuck_val[w] |= b;
                            }
                        }
                        _ => unreachable!(),
                    }
                }
            }
        }
        plan
    }

    #[inline]
    fn column(v: &[u64], col: usize, words: usize) -> &[u64] {
        &v[col * words..(col + 1) * words]
    }
}

#[derive(Clone, Debug)]
struct PendingFeatureMap {
    layer: String,
    reduction: usize,
}

/// Mutable state of one fault-injection run.
#[derive(Clone, Debug)]
pub struct InjectionSession {
    mode: Mode,
    cfg: CrossbarConfig,
    faults: BTreeMap<String, LayerFaults>,
    counters: HashMap<String, Vec<u64>>,
    plans: HashMap<String, FastPlan>,
    image_index: u64,
    layer_count: usize,
    pending: Option<PendingFeatureMap>,
}

impl InjectionSession {
    /// Masks are grouped by layer name; every name must be an injectable
    /// layer of `model`.
    pub fn new(model: &ModelGraph, cfg: CrossbarConfig, masks: &[FaultMask], mode: Mode) -> Result<Self> {
        cfg.validate()?;
        let mut grouped: BTreeMap<&str, Vec<&FaultMask>> = BTreeMap::new();
        for m in masks {
            let layer = model.layer(&m.layer).ok_or_else(|| Error::UnknownLayer(m.layer.clone()))?;
            if !layer.is_injectable() {
                return Err(Error::NotInjectable(m.layer.clone()));
            }
            grouped.entry(&m.layer).or_default().push(m);
        }
        let mut faults = BTreeMap::new();
        for (name, ms) in grouped {
            faults.insert(name.to_owned(), LayerFaults::from_masks(&cfg, ms)?);
        }
        Ok(Self {
            mode,
            cfg,
            faults,
            counters: HashMap::new(),
            plans: HashMap::new(),
            image_index: 0,
            layer_count: model.layers().len(),
            pending: None,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &CrossbarConfig {
        &self.cfg
    }

    pub fn layer_faults(&self, layer: &str) -> Option<&LayerFaults> {
        self.faults.get(layer)
    }

    pub fn has_dynamic(&self) -> bool {
        self.faults.values().any(LayerFaults::has_dynamic)
    }

    /// Images completed so far in this run.
    pub fn images_processed(&self) -> u64 {
        self.image_index
    }

    /// Per-gate operation counters of a layer with dynamic faults, indexed by
    /// [`CrossbarConfig::gate_index`].
    pub fn counters(&self, layer: &str) -> Option<&[u64]> {
        self.counters.get(layer).map(Vec::as_slice)
    }

    /// Starts a new run: counters and image index return to zero.
    pub fn reset(&mut self) {
        self.counters.clear();
        self.image_index = 0;
        self.pending = None;
    }

    pub fn infer<T: Real>(&mut self, model: &ModelGraph, image: &RealTensor<T>) -> Result<Prediction> {
        Ok(Prediction::from_logits(model.forward(image, self)?.into_data()))
    }

    /// Images run in order; dynamic counters carry over between them.
    pub fn infer_batch<T: Real>(&mut self, model: &ModelGraph, images: &[RealTensor<T>]) -> Result<Vec<Prediction>> {
        images.iter().map(|img| self.infer(model, img)).collect()
    }

    fn counters_for(&mut self, layer: &str) -> Option<&mut Vec<u64>> {
        let dynamic = self.faults.get(layer).is_some_and(LayerFaults::has_dynamic);
        if !dynamic {
            return None;
        }
        let n = self.cfg.total_gates();
        Some(self.counters.entry(layer.to_owned()).or_insert_with(|| vec![0; n]))
    }
}

fn conv_grid(name: &str, conv: &Conv2d, input: &BinaryTensor) -> Result<(crate::engine::ConvGeometry, ProductGrid)> {
    let shape = input.shape();
    let g = match shape {
        &[h, w, c] if c == conv.in_channels() => conv.geometry(h, w),
        _ => None,
    }
    .ok_or_else(|| Error::shape(name, format!("conv input {shape:?} does not fit kernel")))?;
    let grid = ProductGrid::conv(g.out_h, g.out_w, conv.out_channels(), conv.reduction_len());
    Ok((g, grid))
}

fn conv_layer(layer: &LayerSpec) -> Result<&Conv2d> {
    match &layer.kind {
        LayerKind::BinaryConv2D(c) => Ok(c),
        _ => Err(Error::NotInjectable(layer.name.clone())),
    }
}

fn dense_layer(layer: &LayerSpec) -> Result<&Dense> {
    match &layer.kind {
        LayerKind::BinaryDense(d) => Ok(d),
        _ => Err(Error::NotInjectable(layer.name.clone())),
    }
}

/// Convolution with every product routed through its scheduled gate.
pub fn inject_conv_exact(input: &BinaryTensor, layer: &LayerSpec, session: &mut InjectionSession) -> Result<IntTensor> {
    let conv = conv_layer(layer)?;
    let (g, _) = conv_grid(&layer.name, conv, input)?;
    let [_, kw] = conv.kernel();
    let [sh, sw] = conv.stride();
    let cin = conv.in_channels();
    let oc = conv.out_channels();
    let k_len = conv.reduction_len();
    let cfg = session.cfg;
    let faults = session.faults.get(&layer.name).cloned();
    let mut counters = session.counters_for(&layer.name);
    let weights = conv.weights();
    let mut out = Vec::with_capacity(g.out_h * g.out_w * oc);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for c in 0..oc {
                let mut acc = 0i32;
                for k in 0..k_len {
                    let (ky, kx, ci) = (k / (kw * cin), (k / cin) % kw, k % cin);
                    let iy = (oy * sh + ky) as isize - g.pad_top as isize;
                    let ix = (ox * sw + kx) as isize - g.pad_left as isize;
                    let x = if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                        input.get((iy as usize * g.in_w + ix as usize) * cin + ci)
                    } else {
                        Sign::Neg
                    };
                    let p = xnor(x, weights.get(c * k_len + k));
                    let gate = schedule_conv_product(oy, ox, c, k, &cfg);
                    acc += route(p, gate, &cfg, faults.as_ref(), counters.as_deref_mut()).value();
                }
                out.push(acc);
            }
        }
    }
    session.pending_if_featuremap(layer, k_len);
    IntTensor::new(vec![g.out_h, g.out_w, oc], out)
}

#[inline]
fn route(p: Sign, gate: GateCoord, cfg: &CrossbarConfig, faults: Option<&LayerFaults>, counters: Option<&mut Vec<u64>>) -> Sign {
    let fault = faults.map_or(GateFault::Healthy, |f| f.at(gate.row, gate.col));
    let count = match counters {
        Some(c) => {
            let slot = &mut c[cfg.gate_index(gate)];
            let now = *slot;
            *slot += 1;
            now
        }
        None => 0,
    };
    faulty_product(p, fault, count)
}

pub fn inject_dense_exact(input: &BinaryTensor, layer: &LayerSpec, session: &mut InjectionSession) -> Result<IntTensor> {
    let dense = dense_layer(layer)?;
    check_dense_input(&layer.name, dense, input)?;
    let cfg = session.cfg;
    let faults = session.faults.get(&layer.name).cloned();
    let mut counters = session.counters_for(&layer.name);
    let (n_in, n_out) = (dense.in_features(), dense.out_features());
    let weights = dense.weights();
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let mut acc = 0i32;
        for i in 0..n_in {
            let p = xnor(input.get(i), weights.get(j * n_in + i));
            let gate = schedule_dense_product(j, i, &cfg);
            acc += route(p, gate, &cfg, faults.as_ref(), counters.as_deref_mut()).value();
        }
        out.push(acc);
    }
    session.pending_if_featuremap(layer, n_in);
    IntTensor::new(vec![n_out], out)
}

/// Bit-parallel injection; bit-identical to the exact path.
pub fn inject_fast(input: &BinaryTensor, layer: &LayerSpec, session: &mut InjectionSession) -> Result<IntTensor> {
    match &layer.kind {
        LayerKind::BinaryConv2D(conv) => {
            let (g, grid) = conv_grid(&layer.name, conv, input)?;
            if !session.faults.contains_key(&layer.name) {
                return conv_forward(&layer.name, conv, input);
            }
            let patches = Patches::build(conv, &g, input);
            let data = session.fast_accumulate(&layer.name, grid, conv.weight_rows(), |p| patches.patch(p));
            IntTensor::new(vec![g.out_h, g.out_w, grid.channels], data)
        }
        LayerKind::BinaryDense(dense) => {
            check_dense_input(&layer.name, dense, input)?;
            if !session.faults.contains_key(&layer.name) {
                return dense_forward(&layer.name, dense, input);
            }
            let grid = ProductGrid::dense(dense.out_features(), dense.in_features());
            let x = input.bits().words();
            let data = session.fast_accumulate(&layer.name, grid, dense.weight_rows(), |_| x);
            IntTensor::new(vec![grid.channels], data)
        }
        _ => Err(Error::NotInjectable(layer.name.clone())),
    }
}

impl InjectionSession {
    fn fast_accumulate<'a>(
        &mut self,
        layer: &str,
        grid: ProductGrid,
        rows: &WeightRows,
        patch: impl Fn(usize) -> &'a [u64],
    ) -> Vec<i32> {
        let cfg = self.cfg;
        let faults = &self.faults[layer];
        let plan = self
            .plans
            .entry(layer.to_owned())
            .or_insert_with(|| FastPlan::new(faults, &cfg, grid.reduction));
        let dynamic = faults.has_dynamic();
        let counters = if dynamic {
            let n = cfg.total_gates();
            Some(self.counters.entry(layer.to_owned()).or_insert_with(|| vec![0; n]))
        } else {
            None
        };

        let k = grid.reduction;
        let words = plan.words;
        let tail = if k.is_multiple_of(64) { u64::MAX } else { (1u64 << (k % 64)) - 1 };
        let mut dyn_flip = vec![0u64; words];
        let mut out = Vec::with_capacity(grid.positions * grid.channels);
        for p in 0..grid.positions {
            let x = patch(p);
            for c in 0..grid.channels {
                let w = rows.row(c);
                let col = c % cfg.gate_cols;
                if !plan.touched[col] {
                    out.push(crate::bitpack::dot_words(x, w, k));
                    continue;
                }
                let has_dyn = !plan.dynamic[col].is_empty();
                if has_dyn {
                    let counters = counters.as_deref().expect("dynamic layer has counters");
                    dyn_flip.iter_mut().for_each(|v| *v = 0);
                    let xbar = (c / cfg.gate_cols) % cfg.crossbars_per_layer;
                    let peers = channel_hits(grid.channels, col, xbar, &cfg) as u64;
                    let rank = channel_rank(c, &cfg) as u64;
                    for &(row, period) in &plan.dynamic[col] {
                        let hits = row_hits(k, row, &cfg) as u64;
                        let gi = cfg.gate_index(GateCoord { crossbar: xbar, row, col });
                        let start = counters[gi] + (p as u64 * peers + rank) * hits;
                        let m = period + 1;
                        let first = (m - start % m) % m;
                        let mut u = first;
                        while u < hits {
                            let kk = row + cfg.gate_rows * u as usize;
                            dyn_flip[kk / 64] |= 1 << (kk % 64);
                            u += m;
                        }
                    }
                }
                let flip = FastPlan::column(&plan.flip, col, words);
                let sel = FastPlan::column(&plan.stuck_sel, col, words);
                let val = FastPlan::column(&plan.stuck_val, col, words);
                let mut matches = 0u32;
                for i in 0..words {
                    let mut e = !(x[i] ^ w[i]) ^ flip[i];
                    if has_dyn {
                        e ^= dyn_flip[i];
                    }
                    e = (e & !sel[i]) | (val[i] & sel[i]);
                    if i + 1 == words {
                        e &= tail;
                    }
                    matches += e.count_ones();
                }
                out.push(2 * matches as i32 - k as i32);
            }
        }
        if let Some(counters) = counters {
            for (c, n) in counters.iter_mut().zip(gate_op_counts(&grid, &cfg)) {
                *c += n;
            }
        }
        out
    }

    fn pending_if_featuremap(&mut self, layer: &LayerSpec, reduction: usize) {
        if self.mode == Mode::FeatureMap && self.faults.contains_key(&layer.name) {
            self.pending = Some(PendingFeatureMap {
                layer: layer.name.clone(),
                reduction,
            });
        }
    }
}

fn tile(v: &PackedBits, len: usize) -> PackedBits {
    let mut words = vec![0u64; words_for(len)];
    let mut off = 0;
    while off < len {
        let n = v.len().min(len - off);
        copy_bits(v.words(), 0, &mut words, off, n);
        off += n;
    }
    PackedBits::from_words(len, words)
}

/// XNORs flattened fault vectors onto a binary feature map. Element `i` uses
/// vector bit `i mod L`: flipped elements negate, stuck elements take their
/// stuck value, and stuck wins when both apply.
pub fn apply_featuremap_mask(
    feature: &BinaryTensor,
    flip: &PackedBits,
    stuck: &PackedBits,
    stuck_values: &PackedBits,
) -> Result<BinaryTensor> {
    let l = flip.len();
    if stuck.len() != l || stuck_values.len() != l {
        return Err(Error::LengthMismatch {
            expected: l,
            actual: if stuck.len() != l { stuck.len() } else { stuck_values.len() },
        });
    }
    let n = feature.len();
    if n == 0 {
        return Ok(feature.clone());
    }
    if l == 0 {
        return Err(Error::EmptyFaultVector(n));
    }
    let (f, s, v) = (tile(flip, n), tile(stuck, n), tile(stuck_values, n));
    let words = feature
        .bits()
        .words()
        .iter()
        .zip(f.words())
        .zip(s.words().iter().zip(v.words()))
        .map(|((x, f), (s, v))| ((x ^ f) & !s) | (v & s))
        .collect();
    let bits = PackedBits::from_words(n, words);
    BinaryTensor::from_bits(bits, feature.shape().to_vec())
}

/// Integer counterpart used when a faulty layer feeds the logits directly:
/// flipped logits negate, stuck logits become `±reduction`.
fn apply_featuremap_logits(x: &mut IntTensor, flip: &PackedBits, stuck: &PackedBits, vals: &PackedBits, reduction: usize) {
    let l = flip.len();
    if l == 0 {
        return;
    }
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        let j = i % l;
        if stuck.get(j) {
            *v = Sign::from_bit(vals.get(j)).value() * reduction as i32;
        } else if flip.get(j) {
            *v = -*v;
        }
    }
}

impl XnorBackend for InjectionSession {
    fn conv2d(&mut self, layer: &LayerSpec, conv: &Conv2d, input: &BinaryTensor) -> Result<IntTensor> {
        match self.mode {
            Mode::Exact => inject_conv_exact(input, layer, self),
            Mode::Fast => inject_fast(input, layer, self),
            Mode::FeatureMap => {
                let out = conv_forward(&layer.name, conv, input)?;
                self.pending_if_featuremap(layer, conv.reduction_len());
                Ok(out)
            }
        }
    }

    fn dense(&mut self, layer: &LayerSpec, dense: &Dense, input: &BinaryTensor) -> Result<IntTensor> {
        match self.mode {
            Mode::Exact => inject_dense_exact(input, layer, self),
            Mode::Fast => inject_fast(input, layer, self),
            Mode::FeatureMap => {
                let out = dense_forward(&layer.name, dense, input)?;
                self.pending_if_featuremap(layer, dense.in_features());
                Ok(out)
            }
        }
    }

    fn after_layer(&mut self, index: usize, layer: &LayerSpec, out: &mut Activation) -> Result<()> {
        if self.mode != Mode::FeatureMap {
            return Ok(());
        }
        let Some(pending) = &self.pending else {
            return Ok(());
        };
        let is_threshold = matches!(layer.kind, LayerKind::Threshold(_));
        let is_last = index + 1 == self.layer_count;
        if !is_threshold && !is_last {
            return Ok(());
        }
        let (flip, stuck, vals) = self.faults[&pending.layer].featuremap_vectors(self.image_index);
        match out {
            Activation::Binary(t) => *t = apply_featuremap_mask(t, &flip, &stuck, &vals)?,
            Activation::Int(x) => apply_featuremap_logits(x, &flip, &stuck, &vals, pending.reduction),
        }
        self.pending = None;
        Ok(())
    }

    fn finish_image(&mut self) {
        self.pending = None;
        self.image_index += 1;
    }
}
