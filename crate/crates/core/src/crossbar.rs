//! Logical XNOR-gate grid and the static product-to-gate schedule.
//!
//! A crossbar is `gate_rows x gate_cols` XNOR gates (four memristors each).
//! Output channels map to columns and reduction indices map to rows, so a
//! faulty column corrupts entire output channels. When a layer spans several
//! crossbars, channel blocks of `gate_cols` are dealt round-robin.
//!
//! Within one image the products of a layer are issued in row-major order of
//! `(position, out_ch, k)`, where `position` is `out_y * out_w + out_x` for a
//! convolution and always 0 for a dense layer. Images follow each other.
//! A gate's operation counter is its rank in that stream.

use serde::{Deserialize, Serialize};

use crate::engine::{LayerKind, ModelGraph};
use crate::error::{Error, Result};

pub const MEMRISTORS_PER_GATE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CrossbarConfig {
    pub gate_rows: usize,
    pub gate_cols: usize,
    pub crossbars_per_layer: usize,
}

impl Default for CrossbarConfig {
    fn default() -> Self {
        Self {
            gate_rows: 40,
            gate_cols: 10,
            crossbars_per_layer: 1,
        }
    }
}

impl CrossbarConfig {
    pub fn new(gate_rows: usize, gate_cols: usize, crossbars_per_layer: usize) -> Result<Self> {
        let cfg = Self {
            gate_rows,
            gate_cols,
            crossbars_per_layer,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gate_rows == 0 || self.gate_cols == 0 || self.crossbars_per_layer == 0 {
            return Err(Error::Config(format!(
                "crossbar dimensions must be positive, got {}x{} x{}",
                self.gate_rows, self.gate_cols, self.crossbars_per_layer
            )));
        }
        Ok(())
    }

    /// Gates in one crossbar.
    pub fn gate_count(&self) -> usize {
        self.gate_rows * self.gate_cols
    }

    /// Memristors in one crossbar.
    pub fn memristor_count(&self) -> usize {
        MEMRISTORS_PER_GATE * self.gate_count()
    }

    /// Gates across all crossbars of a layer.
    pub fn total_gates(&self) -> usize {
        self.gate_count() * self.crossbars_per_layer
    }

    /// Dense index over all crossbars: `(crossbar * rows + row) * cols + col`.
    #[inline]
    pub fn gate_index(&self, g: GateCoord) -> usize {
        (g.crossbar * self.gate_rows + g.row) * self.gate_cols + g.col
    }

    pub fn coord(&self, index: usize) -> GateCoord {
        GateCoord {
            crossbar: index / self.gate_count(),
            row: (index / self.gate_cols) % self.gate_rows,
            col: index % self.gate_cols,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GateCoord {
    pub crossbar: usize,
    pub row: usize,
    pub col: usize,
}

/// Gate executing product `k` of output channel `out_ch` at `(out_y, out_x)`.
/// The spatial position does not affect placement.
#[inline]
pub fn schedule_conv_product(
    _out_y: usize,
    _out_x: usize,
    out_ch: usize,
    k: usize,
    cfg: &CrossbarConfig,
) -> GateCoord {
    GateCoord {
        crossbar: (out_ch / cfg.gate_cols) % cfg.crossbars_per_layer,
        row: k % cfg.gate_rows,
        col: out_ch % cfg.gate_cols,
    }
}

#[inline]
pub fn schedule_dense_product(out_j: usize, in_i: usize, cfg: &CrossbarConfig) -> GateCoord {
    schedule_conv_product(0, 0, out_j, in_i, cfg)
}

/// Product geometry of one injectable layer for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ProductGrid {
    /// Output spatial positions (1 for dense).
    pub positions: usize,
    /// Output channels / features.
    pub channels: usize,
    /// Products per output element.
    pub reduction: usize,
}

impl ProductGrid {
    pub fn conv(out_h: usize, out_w: usize, out_ch: usize, reduction: usize) -> Self {
        Self {
            positions: out_h * out_w,
            channels: out_ch,
            reduction,
        }
    }

    pub fn dense(out: usize, inp: usize) -> Self {
        Self {
            positions: 1,
            channels: out,
            reduction: inp,
        }
    }

    pub fn products(&self) -> u64 {
        self.positions as u64 * self.channels as u64 * self.reduction as u64
    }

    /// Grid of the injectable layer at `layer_index`, `None` otherwise.
    pub fn of_layer(model: &ModelGraph, layer_index: usize) -> Option<Self> {
        let out = model.output_shape(layer_index);
        match &model.layers()[layer_index].kind {
            LayerKind::BinaryConv2D(conv) => Some(Self::conv(out[0], out[1], out[2], conv.reduction_len())),
            LayerKind::BinaryDense(d) => Some(Self::dense(d.out_features(), d.in_features())),
            _ => None,
        }
    }
}

/// Number of reduction indices `k < reduction` placed on gate row `row`.
#[inline]
pub fn row_hits(reduction: usize, row: usize, cfg: &CrossbarConfig) -> usize {
    if row < reduction {
        (reduction - row).div_ceil(cfg.gate_rows)
    } else {
        0
    }
}

/// Number of output channels placed on `(col, crossbar)`.
#[inline]
pub fn channel_hits(channels: usize, col: usize, crossbar: usize, cfg: &CrossbarConfig) -> usize {
    if col >= channels {
        return 0;
    }
    let blocks = (channels - col).div_ceil(cfg.gate_cols);
    if crossbar < blocks {
        (blocks - crossbar).div_ceil(cfg.crossbars_per_layer)
    } else {
        0
    }
}

/// Rank of channel `c` among the channels sharing its column and crossbar.
#[inline]
pub fn channel_rank(c: usize, cfg: &CrossbarConfig) -> usize {
    c / (cfg.gate_cols * cfg.crossbars_per_layer)
}

/// Products each gate executes per image, indexed by [`CrossbarConfig::gate_index`].
pub fn gate_op_counts(grid: &ProductGrid, cfg: &CrossbarConfig) -> Vec<u64> {
    (0..cfg.total_gates())
        .map(|i| {
            let g = cfg.coord(i);
            grid.positions as u64
                * channel_hits(grid.channels, g.col, g.crossbar, cfg) as u64
                * row_hits(grid.reduction, g.row, cfg) as u64
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProductRef {
    pub image: usize,
    pub position: usize,
    pub channel: usize,
    pub k: usize,
}

/// Ordered product list per gate for `images` consecutive images. The
/// position of a product inside its gate's list is that gate's counter when
/// the product executes. Intended for small layers and testing.
pub fn gate_op_sequence(grid: &ProductGrid, cfg: &CrossbarConfig, images: usize) -> Vec<Vec<ProductRef>> {
    let mut per_gate = vec![Vec::new(); cfg.total_gates()];
    for image in 0..images {
        for position in 0..grid.positions {
            for channel in 0..grid.channels {
                for k in 0..grid.reduction {
                    let g = schedule_conv_product(0, 0, channel, k, cfg);
                    per_gate[cfg.gate_index(g)].push(ProductRef {
                        image,
                        position,
                        channel,
                        k,
                    });
                }
            }
        }
    }
    per_gate
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCapacity {
    pub layer: String,
    pub products_per_image: u64,
    pub gates: usize,
    pub memristors: usize,
    /// Products per gate per image, rounded up.
    pub multiplexing: u64,
    /// Gates that receive at least one product.
    pub gates_used: usize,
}

pub fn capacity_report(model: &ModelGraph, cfg: &CrossbarConfig) -> Vec<LayerCapacity> {
    model
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let grid = ProductGrid::of_layer(model, i)?;
            let products = grid.products();
            Some(LayerCapacity {
                layer: l.name.clone(),
                products_per_image: products,
                gates: cfg.total_gates(),
                memristors: cfg.memristor_count() * cfg.crossbars_per_layer,
                multiplexing: products.div_ceil(cfg.total_gates() as u64),
                gates_used: gate_op_counts(&grid, cfg).iter().filter(|&&n| n > 0).count(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(r: usize, c: usize, x: usize) -> CrossbarConfig {
        CrossbarConfig::new(r, c, x).unwrap()
    }

    #[test]
    fn formula_examples() {
        let c = cfg(10, 10, 1);
        assert_eq!(
            schedule_conv_product(4, 2, 3, 7, &c),
            GateCoord { crossbar: 0, row: 7, col: 3 }
        );
        assert_eq!(schedule_conv_product(0, 0, 13, 0, &c).col, 3);
        assert_eq!(schedule_dense_product(0, 0, &c), GateCoord { crossbar: 0, row: 0, col: 0 });
        let g = schedule_dense_product(10, 23, &c);
        assert_eq!(g, GateCoord { crossbar: 0, row: 3, col: 0 });
        let g = schedule_dense_product(10, 0, &cfg(10, 10, 2));
        assert_eq!(g.crossbar, 1);
    }

    #[test]
    fn invalid_config() {
        assert!(CrossbarConfig::new(0, 10, 1).is_err());
        assert!(CrossbarConfig::new(4, 10, 0).is_err());
        let c = cfg(40, 10, 1);
        assert_eq!(c.gate_count(), 400);
        assert_eq!(c.memristor_count(), 1600);
    }

    #[test]
    fn dense_64x10_on_40x10_uses_every_gate() {
        let c = cfg(40, 10, 1);
        let grid = ProductGrid::dense(10, 64);
        let seq = gate_op_sequence(&grid, &c, 1);
        assert!(seq.iter().all(|ops| !ops.is_empty()));
        assert_eq!(seq.iter().map(Vec::len).sum::<usize>(), 640);
    }

    #[test]
    fn exactly_gate_count_products_gives_one_each() {
        let c = cfg(5, 4, 1);
        let grid = ProductGrid::dense(4, 5);
        assert!(gate_op_sequence(&grid, &c, 1).iter().all(|ops| ops.len() == 1));
        // conv with two positions doubles every counter
        let grid = ProductGrid::conv(1, 2, 4, 5);
        assert!(gate_op_sequence(&grid, &c, 1).iter().all(|ops| ops.len() == 2));
    }

    #[test]
    fn closed_form_counts_match_enumeration() {
        for (r, c, x) in [(3, 2, 1), (4, 3, 2), (7, 5, 3), (40, 10, 1)] {
            let cfg = cfg(r, c, x);
            for grid in [
                ProductGrid::conv(2, 3, 7, 11),
                ProductGrid::dense(13, 9),
                ProductGrid::conv(1, 1, 1, 1),
            ] {
                let seq = gate_op_sequence(&grid, &cfg, 2);
                let counts = gate_op_counts(&grid, &cfg);
                for (i, ops) in seq.iter().enumerate() {
                    assert_eq!(ops.len() as u64, 2 * counts[i]);
                    let g = cfg.coord(i);
                    assert_eq!(cfg.gate_index(g), i);
                    assert!(g.row < r && g.col < c && g.crossbar < x);
                }
                assert_eq!(counts.iter().sum::<u64>(), grid.products());
            }
        }
    }

    #[test]
    fn schedule_is_reproducible() {
        let c = cfg(6, 4, 2);
        let grid = ProductGrid::conv(3, 3, 9, 8);
        assert_eq!(gate_op_sequence(&grid, &c, 1), gate_op_sequence(&grid, &c, 1));
    }
}
