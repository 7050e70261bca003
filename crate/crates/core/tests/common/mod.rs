#![allow(dead_code)]

use std::path::PathBuf;

use flim::engine::Padding;
use flim::faultgen::{gen_bitflip_mask, gen_dynamic_mask, gen_stuckat_mask, FaultRng};
use flim::injector::{inject_conv_exact, inject_dense_exact, inject_fast};
use flim::{
    read_idx, read_model, BinaryTensor, CrossbarConfig, Dataset, FaultMask, FaultType, InjectionSession, LayerSpec,
    ModelGraph, Mode, Sign,
};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

pub fn tiny_lenet() -> (ModelGraph, Dataset) {
    let d = data_dir();
    let model = read_model(d.join("tiny_lenet.flimmd")).unwrap();
    let data = read_idx(d.join("test-images-idx3-ubyte"), d.join("test-labels-idx1-ubyte")).unwrap();
    (model, data)
}

/// Fault of one gate as the oracle sees it.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Gate {
    Ok,
    Flip,
    Stuck(i32),
    Dyn(u64),
}

/// Per-product reference: walks products in schedule order and keeps its own
/// per-gate counters.
pub struct Oracle {
    rows: usize,
    cols: usize,
    xbars: usize,
    gates: Vec<Gate>,
    pub counters: Vec<u64>,
}

impl Oracle {
    pub fn new(cfg: &CrossbarConfig, masks: &[FaultMask]) -> Self {
        let (rows, cols) = (cfg.gate_rows, cfg.gate_cols);
        let mut gates = vec![Gate::Ok; rows * cols];
        for (i, g) in gates.iter_mut().enumerate() {
            let hit = |t: FaultType| masks.iter().filter(move |m| m.fault_type == t && m.grid.get(i));
            *g = if let Some(m) = hit(FaultType::StuckAt).next() {
                Gate::Stuck(if m.stuck.get(i) { 1 } else { -1 })
            } else if hit(FaultType::BitFlip).next().is_some() {
                Gate::Flip
            } else if let Some(m) = hit(FaultType::Dynamic).next() {
                Gate::Dyn(m.period)
            } else {
                Gate::Ok
            };
        }
        Self {
            rows,
            cols,
            xbars: cfg.crossbars_per_layer,
            gates,
            counters: vec![0; rows * cols * cfg.crossbars_per_layer],
        }
    }

    pub fn has_dynamic(&self) -> bool {
        self.gates.iter().any(|g| matches!(g, Gate::Dyn(_)))
    }

    fn product(&mut self, ch: usize, k: usize, p: i32) -> i32 {
        let (row, col, xbar) = (k % self.rows, ch % self.cols, (ch / self.cols) % self.xbars);
        let phys = (xbar * self.rows + row) * self.cols + col;
        let n = self.counters[phys];
        self.counters[phys] += 1;
        match self.gates[row * self.cols + col] {
            Gate::Ok => p,
            Gate::Flip => -p,
            Gate::Stuck(s) => s,
            Gate::Dyn(period) => {
                if n.is_multiple_of(period + 1) {
                    -p
                } else {
                    p
                }
            }
        }
    }
}

pub struct ConvCase {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub same: bool,
    /// `[cout][kh][kw][cin]`, ±1.
    pub weights: Vec<i32>,
}

fn signs(rng: &mut FaultRng, n: usize) -> Vec<i32> {
    (0..n).map(|_| if rng.below(2) == 1 { 1 } else { -1 }).collect()
}

pub fn pack(v: &[i32], shape: Vec<usize>) -> BinaryTensor {
    let s: Vec<Sign> = v.iter().map(|&x| Sign::from_value(x).unwrap()).collect();
    BinaryTensor::pack(&s, shape).unwrap()
}

impl ConvCase {
    pub fn random(rng: &mut FaultRng) -> Self {
        let h = 1 + rng.below(8);
        let w = 1 + rng.below(8);
        let cin = 1 + rng.below(4);
        let cout = 1 + rng.below(8);
        let same = rng.below(2) == 1;
        let kernel = if same {
            [1 + rng.below(4), 1 + rng.below(4)]
        } else {
            [1 + rng.below(h.min(4)), 1 + rng.below(w.min(4))]
        };
        let stride = [1 + rng.below(2), 1 + rng.below(2)];
        let weights = signs(rng, cout * kernel[0] * kernel[1] * cin);
        Self {
            h,
            w,
            cin,
            cout,
            kernel,
            stride,
            same,
            weights,
        }
    }

    pub fn layer(&self) -> LayerSpec {
        let padding = if self.same { Padding::Same } else { Padding::Valid };
        let shape = vec![self.cout, self.kernel[0], self.kernel[1], self.cin];
        LayerSpec::conv2d("conv", self.cin, self.kernel, self.stride, padding, pack(&self.weights, shape)).unwrap()
    }

    pub fn model(&self) -> ModelGraph {
        let layer = self.layer();
        let (oh, ow) = self.out_hw();
        let flat = LayerSpec::flatten("flat");
        ModelGraph::new("case", vec![self.h, self.w, self.cin], oh * ow * self.cout, 0.5, vec![layer, flat]).unwrap()
    }

    fn out_hw(&self) -> (usize, usize) {
        let [kh, kw] = self.kernel;
        let [sh, sw] = self.stride;
        if self.same {
            (self.h.div_ceil(sh), self.w.div_ceil(sw))
        } else {
            ((self.h - kh) / sh + 1, (self.w - kw) / sw + 1)
        }
    }

    /// Per-product convolution in `(y, x, out_ch, k)` order.
    pub fn oracle(&self, x: &[i32], oracle: &mut Oracle) -> Vec<i32> {
        let [kh, kw] = self.kernel;
        let [sh, sw] = self.stride;
        let (oh, ow) = self.out_hw();
        let (pt, pl) = if self.same {
            let th = ((oh - 1) * sh + kh).saturating_sub(self.h);
            let tw = ((ow - 1) * sw + kw).saturating_sub(self.w);
            (th / 2, tw / 2)
        } else {
            (0, 0)
        };
        let mut out = Vec::new();
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..self.cout {
                    let mut acc = 0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for ci in 0..self.cin {
                                let iy = (oy * sh + ky) as isize - pt as isize;
                                let ix = (ox * sw + kx) as isize - pl as isize;
                                let a = if iy < 0 || ix < 0 || iy as usize >= self.h || ix as usize >= self.w {
                                    -1
                                } else {
                                    x[(iy as usize * self.w + ix as usize) * self.cin + ci]
                                };
                                let b = self.weights[((co * kh + ky) * kw + kx) * self.cin + ci];
                                let k = (ky * kw + kx) * self.cin + ci;
                                acc += oracle.product(co, k, a * b);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }
}

pub struct DenseCase {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<i32>,
}

impl DenseCase {
    pub fn random(rng: &mut FaultRng) -> Self {
        let n_in = 1 + rng.below(128);
        let n_out = 1 + rng.below(16);
        Self {
            n_in,
            n_out,
            weights: signs(rng, n_in * n_out),
        }
    }

    pub fn model(&self) -> ModelGraph {
        let fc = LayerSpec::dense("fc", pack(&self.weights, vec![self.n_out, self.n_in])).unwrap();
        ModelGraph::new("case", vec![self.n_in], self.n_out, 0.5, vec![fc]).unwrap()
    }

    pub fn oracle(&self, x: &[i32], oracle: &mut Oracle) -> Vec<i32> {
        (0..self.n_out)
            .map(|j| (0..self.n_in).map(|i| oracle.product(j, i, x[i] * self.weights[j * self.n_in + i])).sum())
            .collect()
    }
}

pub fn random_config(rng: &mut FaultRng) -> CrossbarConfig {
    CrossbarConfig::new(1 + rng.below(6), 1 + rng.below(5), 1 + rng.below(3)).unwrap()
}

/// One to three masks of random types; dynamic periods come from {0, 1, 2, 5}.
pub fn random_masks(rng: &mut FaultRng, cfg: &CrossbarConfig, layer: &str) -> Vec<FaultMask> {
    let (r, c) = (cfg.gate_rows, cfg.gate_cols);
    (0..1 + rng.below(3))
        .map(|_| {
            let rate = rng.unit();
            let seed = rng.next_u64();
            let m = match rng.below(3) {
                0 => gen_bitflip_mask(r, c, rate, seed),
                1 => gen_stuckat_mask(r, c, rate, seed, 0.5),
                _ => gen_dynamic_mask(r, c, rate, [0, 1, 2, 5][rng.below(4)], seed),
            };
            m.unwrap().with_layer(layer)
        })
        .collect()
}

/// Checks exact and fast paths against the oracle over `images` consecutive
/// inputs. Returns a description of the first disagreement.
pub fn check_conv(rng: &mut FaultRng, images: usize) -> Result<(), String> {
    let case = ConvCase::random(rng);
    let cfg = random_config(rng);
    let masks = random_masks(rng, &cfg, "conv");
    let model = case.model();
    let layer = &model.layers()[0];
    let mut oracle = Oracle::new(&cfg, &masks);
    let mut exact = InjectionSession::new(&model, cfg, &masks, Mode::Exact).unwrap();
    let mut fast = InjectionSession::new(&model, cfg, &masks, Mode::Fast).unwrap();
    for img in 0..images {
        let x = signs(rng, case.h * case.w * case.cin);
        let xt = pack(&x, vec![case.h, case.w, case.cin]);
        let want = case.oracle(&x, &mut oracle);
        let e = inject_conv_exact(&xt, layer, &mut exact).unwrap();
        let f = inject_fast(&xt, layer, &mut fast).unwrap();
        if e.data() != want || f.data() != want {
            return Err(format!(
                "conv {}x{}x{} -> {} k{:?} s{:?} same={} cfg {:?} image {img}",
                case.h, case.w, case.cin, case.cout, case.kernel, case.stride, case.same, cfg
            ));
        }
    }
    let want = oracle.has_dynamic().then_some(&oracle.counters[..]);
    if exact.counters("conv") != want || fast.counters("conv") != want {
        return Err(format!("conv counters diverge, cfg {cfg:?}"));
    }
    Ok(())
}

pub fn check_dense(rng: &mut FaultRng, images: usize) -> Result<(), String> {
    let case = DenseCase::random(rng);
    let cfg = random_config(rng);
    let masks = random_masks(rng, &cfg, "fc");
    let model = case.model();
    let layer = &model.layers()[0];
    let mut oracle = Oracle::new(&cfg, &masks);
    let mut exact = InjectionSession::new(&model, cfg, &masks, Mode::Exact).unwrap();
    let mut fast = InjectionSession::new(&model, cfg, &masks, Mode::Fast).unwrap();
    for img in 0..images {
        let x = signs(rng, case.n_in);
        let xt = pack(&x, vec![case.n_in]);
        let want = case.oracle(&x, &mut oracle);
        let e = inject_dense_exact(&xt, layer, &mut exact).unwrap();
        let f = inject_fast(&xt, layer, &mut fast).unwrap();
        if e.data() != want || f.data() != want {
            return Err(format!("dense {} -> {} cfg {:?} image {img}", case.n_in, case.n_out, cfg));
        }
    }
    let want = oracle.has_dynamic().then_some(&oracle.counters[..]);
    if exact.counters("fc") != want || fast.counters("fc") != want {
        return Err(format!("dense counters diverge, cfg {cfg:?}"));
    }
    Ok(())
}
