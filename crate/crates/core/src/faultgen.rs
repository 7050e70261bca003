//! Seeded fault-mask generation and the `FLIMFV01` fault-vector file.
//!
//! Random masks draw from SplitMix64 seeded directly with the mask seed.
//! Faulty gates are the first `m` entries of a partial Fisher-Yates shuffle
//! of the row-major gate indices, where step `i` swaps position `i` with
//! `i + below(n - i)` and `below(b) = (next_u64() * b) >> 64`. Stuck values
//! are drawn afterwards from the same stream, one per faulty gate in
//! selection order: `+1` iff `(next_u64() >> 11) * 2^-53 < p_one`.

use std::io::Write;
use std::path::Path;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::bitpack::{PackedBits, Sign};
use crate::crossbar::CrossbarConfig;
use crate::error::{Error, Result};

pub const FAULT_FILE_MAGIC: &[u8; 8] = b"FLIMFV01";
pub const FAULT_FILE_VERSION: u64 = 1;

/// Deterministic stream used for every random fault decision.
#[derive(Clone, Debug)]
pub struct FaultRng(SplitMix64);

impl FaultRng {
    pub fn new(seed: u64) -> Self {
        Self(SplitMix64::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `0..bound` by multiply-shift.
    pub fn below(&mut self, bound: usize) -> usize {
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Uniform in `[0, 1)` with 53 bits.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// `count` distinct values from `0..n`, in selection order.
    pub fn sample_distinct(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(count);
        idx
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultType {
    BitFlip,
    StuckAt,
    Dynamic,
}

impl FaultType {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultType::BitFlip => "bitflip",
            FaultType::StuckAt => "stuckat",
            FaultType::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for FaultType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bitflip" => Ok(FaultType::BitFlip),
            "stuckat" => Ok(FaultType::StuckAt),
            "dynamic" => Ok(FaultType::Dynamic),
            other => Err(Error::Config(format!(
                "unknown fault type `{other}` (bitflip, stuckat, dynamic)"
            ))),
        }
    }
}

/// Faulty gates of one crossbar grid assigned to one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FaultMask {
    pub layer: String,
    pub fault_type: FaultType,
    pub gate_rows: usize,
    pub gate_cols: usize,
    /// Row-major `row * gate_cols + col`; 1 = faulty.
    pub grid: PackedBits,
    /// 1 = stuck at `+1`. Only set where `grid` is set.
    pub stuck: PackedBits,
    /// Dynamic faults fire on every `(period + 1)`-th operation.
    pub period: u64,
    pub seed: u64,
    pub rate: f64,
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    Ok(())
}

/// `round(rate * gates)`, halves away from zero.
pub fn faulty_gate_count(rate: f64, gates: usize) -> usize {
    (rate * gates as f64).round() as usize
}

fn random_grid(rows: usize, cols: usize, rate: f64, rng: &mut FaultRng) -> Result<(PackedBits, Vec<usize>)> {
    check_rate(rate)?;
    let n = rows * cols;
    let picked = rng.sample_distinct(n, faulty_gate_count(rate, n).min(n));
    let mut grid = PackedBits::zeros(n);
    for &i in &picked {
        grid.set(i, true);
    }
    Ok((grid, picked))
}

fn check_dims(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!("mask grid {rows}x{cols} is empty")));
    }
    Ok(())
}

pub fn gen_bitflip_mask(rows: usize, cols: usize, rate: f64, seed: u64) -> Result<FaultMask> {
    check_dims(rows, cols)?;
    let (grid, _) = random_grid(rows, cols, rate, &mut FaultRng::new(seed))?;
    Ok(FaultMask {
        layer: String::new(),
        fault_type: FaultType::BitFlip,
        gate_rows: rows,
        gate_cols: cols,
        stuck: PackedBits::zeros(grid.len()),
        grid,
        period: 0,
        seed,
        rate,
    })
}

pub fn gen_stuckat_mask(rows: usize, cols: usize, rate: f64, seed: u64, p_one: f64) -> Result<FaultMask> {
    check_dims(rows, cols)?;
    if !(0.0..=1.0).contains(&p_one) {
        return Err(Error::InvalidProbability(p_one));
    }
    let mut rng = FaultRng::new(seed);
    let (grid, picked) = random_grid(rows, cols, rate, &mut rng)?;
    let mut stuck = PackedBits::zeros(grid.len());
    for &i in &picked {
        if rng.unit() < p_one {
            stuck.set(i, true);
        }
    }
    Ok(FaultMask {
        layer: String::new(),
        fault_type: FaultType::StuckAt,
        gate_rows: rows,
        gate_cols: cols,
        grid,
        stuck,
        period: 0,
        seed,
        rate,
    })
}

/// Every gate in the listed rows and columns; overlaps count once.
pub fn gen_line_fault_mask(rows: usize, cols: usize, fault_rows: &[usize], fault_cols: &[usize]) -> Result<FaultMask> {
    check_dims(rows, cols)?;
    let mut grid = PackedBits::zeros(rows * cols);
    for &r in fault_rows {
        if r >= rows {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: r,
                bound: rows,
            });
        }
        for c in 0..cols {
            grid.set(r * cols + c, true);
        }
    }
    for &c in fault_cols {
        if c >= cols {
            return Err(Error::IndexOutOfRange {
                what: "column",
                index: c,
                bound: cols,
            });
        }
        for r in 0..rows {
            grid.set(r * cols + c, true);
        }
    }
    let rate = grid.count_ones() as f64 / (rows * cols) as f64;
    Ok(FaultMask {
        layer: String::new(),
        fault_type: FaultType::BitFlip,
        gate_rows: rows,
        gate_cols: cols,
        stuck: PackedBits::zeros(grid.len()),
        grid,
        period: 0,
        seed: 0,
        rate,
    })
}

pub fn gen_dynamic_mask(rows: usize, cols: usize, rate: f64, period: u64, seed: u64) -> Result<FaultMask> {
    let mut mask = gen_bitflip_mask(rows, cols, rate, seed)?;
    mask.fault_type = FaultType::Dynamic;
    mask.period = period;
    Ok(mask)
}

impl FaultMask {
    pub fn with_layer(mut self, layer: impl Into<String>) -> Self {
        self.layer = layer.into();
        self
    }

    pub fn faulty_count(&self) -> usize {
        self.grid.count_ones()
    }

    #[inline]
    pub fn is_faulty(&self, row: usize, col: usize) -> bool {
        self.grid.get(row * self.gate_cols + col)
    }

    /// Stuck value at a faulty gate of a stuck-at mask.
    pub fn stuck_value(&self, row: usize, col: usize) -> Sign {
        Sign::from_bit(self.stuck.get(row * self.gate_cols + col))
    }

    pub(crate) fn check_config(&self, cfg: &CrossbarConfig) -> Result<()> {
        if self.gate_rows != cfg.gate_rows || self.gate_cols != cfg.gate_cols {
            return Err(Error::MaskDims {
                layer: self.layer.clone(),
                rows: cfg.gate_rows,
                cols: cfg.gate_cols,
                actual_rows: self.gate_rows,
                actual_cols: self.gate_cols,
            });
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let n = self.gate_rows * self.gate_cols;
        if self.grid.len() != n || self.stuck.len() != n {
            return Err(Error::Inconsistent(format!(
                "mask `{}` planes do not match {}x{}",
                self.layer, self.gate_rows, self.gate_cols
            )));
        }
        if self.stuck.iter_ones().any(|i| !self.grid.get(i)) {
            return Err(Error::Inconsistent(format!(
                "mask `{}` has stuck values on healthy gates",
                self.layer
            )));
        }
        if self.fault_type != FaultType::StuckAt && self.stuck.count_ones() != 0 {
            return Err(Error::Inconsistent(format!(
                "{} mask `{}` carries stuck values",
                self.fault_type.as_str(),
                self.layer
            )));
        }
        Ok(())
    }
}

/// Crossbar configuration plus an ordered list of per-layer masks.
#[derive(Clone, Debug, PartialEq)]
pub struct FaultVectorFile {
    pub config: CrossbarConfig,
    pub masks: Vec<FaultMask>,
}

#[derive(Serialize, Deserialize)]
struct FileManifest {
    version: u64,
    gate_rows: usize,
    gate_cols: usize,
    crossbars_per_layer: usize,
    masks: Vec<MaskRecord>,
}

#[derive(Serialize, Deserialize)]
struct MaskRecord {
    layer: String,
    #[serde(rename = "type")]
    fault_type: FaultType,
    period: u64,
    rate: f64,
    seed: u64,
    grid_offset: usize,
    grid_len: usize,
    stuck_offset: usize,
    stuck_len: usize,
}

pub(crate) fn split_container<'a>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<(&'a [u8], &'a [u8])> {
    let head = bytes.get(..8).ok_or(Error::Truncated {
        what: "magic",
        needed: 8,
        available: bytes.len(),
    })?;
    if head != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(head).into_owned(),
        });
    }
    let len_bytes = bytes.get(8..12).ok_or(Error::Truncated {
        what: "manifest length",
        needed: 12,
        available: bytes.len(),
    })?;
    let m = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    let manifest = bytes.get(12..12 + m).ok_or(Error::Truncated {
        what: "manifest",
        needed: 12 + m,
        available: bytes.len(),
    })?;
    Ok((manifest, &bytes[12 + m..]))
}

pub(crate) fn join_container(magic: &[u8; 8], manifest: &[u8], payload: &[u8]) -> Result<Vec<u8>> {
    let m = u32::try_from(manifest.len())
        .map_err(|_| Error::Config("manifest larger than 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + manifest.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&m.to_le_bytes());
    out.extend_from_slice(manifest);
    out.extend_from_slice(payload);
    Ok(out)
}

pub(crate) fn blob<'a>(payload: &'a [u8], offset: usize, len: usize, what: &'static str) -> Result<&'a [u8]> {
    offset
        .checked_add(len)
        .and_then(|end| payload.get(offset..end))
        .ok_or(Error::Truncated {
            what,
            needed: offset.saturating_add(len),
            available: payload.len(),
        })
}

/// Writes to a temporary file in the target directory, then renames it.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::file(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::file(path, e))?;
    tmp.persist(path).map_err(|e| Error::file(path, e.error))?;
    Ok(())
}

impl FaultVectorFile {
    pub fn new(config: CrossbarConfig, masks: Vec<FaultMask>) -> Result<Self> {
        config.validate()?;
        for m in &masks {
            m.check_config(&config)?;
            m.validate()?;
        }
        Ok(Self { config, masks })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut records = Vec::with_capacity(self.masks.len());
        for m in &self.masks {
            m.check_config(&self.config)?;
            m.validate()?;
            let grid = m.grid.to_bytes();
            let stuck = m.stuck.to_bytes();
            records.push(MaskRecord {
                layer: m.layer.clone(),
                fault_type: m.fault_type,
                period: m.period,
                rate: m.rate,
                seed: m.seed,
                grid_offset: payload.len(),
                grid_len: grid.len(),
                stuck_offset: payload.len() + grid.len(),
                stuck_len: stuck.len(),
            });
            payload.extend_from_slice(&grid);
            payload.extend_from_slice(&stuck);
        }
        let manifest = serde_json::to_vec(&FileManifest {
            version: FAULT_FILE_VERSION,
            gate_rows: self.config.gate_rows,
            gate_cols: self.config.gate_cols,
            crossbars_per_layer: self.config.crossbars_per_layer,
            masks: records,
        })?;
        join_container(FAULT_FILE_MAGIC, &manifest, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = split_container(bytes, FAULT_FILE_MAGIC)?;
        let value: serde_json::Value = serde_json::from_slice(manifest)?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(FAULT_FILE_VERSION) => {}
            Some(v) => return Err(Error::UnsupportedVersion(v)),
            None => return Err(Error::Inconsistent("manifest lacks a numeric version".into())),
        }
        let manifest: FileManifest = serde_json::from_value(value)?;
        let config = CrossbarConfig::new(
            manifest.gate_rows,
            manifest.gate_cols,
            manifest.crossbars_per_layer,
        )
        .map_err(|e| Error::Inconsistent(e.to_string()))?;
        let n = config.gate_count();
        let mut masks = Vec::with_capacity(manifest.masks.len());
        for r in manifest.masks {
            let grid = PackedBits::from_bytes(n, blob(payload, r.grid_offset, r.grid_len, "mask grid")?)?;
            let stuck = PackedBits::from_bytes(n, blob(payload, r.stuck_offset, r.stuck_len, "stuck plane")?)?;
            let mask = FaultMask {
                layer: r.layer,
                fault_type: r.fault_type,
                gate_rows: config.gate_rows,
                gate_cols: config.gate_cols,
                grid,
                stuck,
                period: r.period,
                seed: r.seed,
                rate: r.rate,
            };
            mask.validate()?;
            masks.push(mask);
        }
        Ok(Self { config, masks })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splitmix_reference_vector() {
        // published SplitMix64 outputs for seed 1234567
        let mut rng = FaultRng::new(1234567);
        let expect = [
            6457827717110365317u64,
            3203168211198807973,
            9817491932198370423,
            4593380528125082431,
            16408922859458223821,
        ];
        for e in expect {
            assert_eq!(rng.next_u64(), e);
        }
    }

    #[test]
    fn bitflip_cardinality() {
        assert_eq!(gen_bitflip_mask(40, 10, 0.10, 1).unwrap().faulty_count(), 40);
        assert_eq!(gen_bitflip_mask(40, 10, 0.0, 1).unwrap().faulty_count(), 0);
        assert_eq!(gen_bitflip_mask(40, 10, 1.0, 1).unwrap().faulty_count(), 400);
        // 0.5 * 5 = 2.5 rounds away from zero
        assert_eq!(gen_bitflip_mask(1, 5, 0.5, 9).unwrap().faulty_count(), 3);
        assert!(matches!(gen_bitflip_mask(4, 4, 1.5, 0), Err(Error::InvalidRate(_))));
        assert!(gen_bitflip_mask(4, 4, -0.1, 0).is_err());
        assert!(gen_bitflip_mask(4, 4, f64::NAN, 0).is_err());
    }

    #[test]
    fn seeds_are_deterministic() {
        let a = gen_bitflip_mask(40, 10, 0.2, 5).unwrap();
        let b = gen_bitflip_mask(40, 10, 0.2, 5).unwrap();
        let c = gen_bitflip_mask(40, 10, 0.2, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.grid, c.grid);
    }

    #[test]
    fn stuckat_values() {
        let m = gen_stuckat_mask(40, 10, 0.0, 3, 0.5).unwrap();
        assert_eq!(m.faulty_count(), 0);
        let m = gen_stuckat_mask(40, 10, 0.3, 3, 1.0).unwrap();
        assert_eq!(m.stuck, m.grid);
        let m = gen_stuckat_mask(40, 10, 0.3, 3, 0.0).unwrap();
        assert_eq!(m.stuck.count_ones(), 0);
        assert!(matches!(gen_stuckat_mask(4, 4, 0.1, 0, 1.1), Err(Error::InvalidProbability(_))));
        // bitflip and stuck-at masks pick the same gates for the same seed
        let b = gen_bitflip_mask(40, 10, 0.3, 3).unwrap();
        assert_eq!(b.grid, m.grid);
    }

    #[test]
    fn stuck_fraction_within_three_sigma() {
        for p in [0.5, 0.2, 0.9] {
            let m = gen_stuckat_mask(100, 100, 1.0, 17, p).unwrap();
            let n = 10_000.0;
            let frac = m.stuck.count_ones() as f64 / n;
            let sigma = (p * (1.0 - p) / n).sqrt();
            assert!((frac - p).abs() <= 3.0 * sigma, "p={p} frac={frac}");
        }
    }

    #[test]
    fn line_faults() {
        assert_eq!(gen_line_fault_mask(40, 10, &[0], &[]).unwrap().faulty_count(), 10);
        assert_eq!(gen_line_fault_mask(40, 10, &[], &[0, 1]).unwrap().faulty_count(), 80);
        let m = gen_line_fault_mask(40, 10, &[0], &[0]).unwrap();
        assert_eq!(m.faulty_count(), 49);
        assert_eq!(m.fault_type, FaultType::BitFlip);
        assert!(matches!(
            gen_line_fault_mask(40, 10, &[40], &[]),
            Err(Error::IndexOutOfRange { what: "row", .. })
        ));
        assert!(gen_line_fault_mask(40, 10, &[], &[10]).is_err());
    }

    #[test]
    fn dynamic_mask_matches_bitflip_selection() {
        let d = gen_dynamic_mask(40, 10, 0.3, 4, 11).unwrap();
        let b = gen_bitflip_mask(40, 10, 0.3, 11).unwrap();
        assert_eq!(d.grid, b.grid);
        assert_eq!(d.fault_type, FaultType::Dynamic);
        assert_eq!(d.period, 4);
    }

    #[test]
    fn empty_file_round_trip() {
        let f = FaultVectorFile::new(CrossbarConfig::default(), vec![]).unwrap();
        let bytes = f.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"FLIMFV01");
        assert_eq!(FaultVectorFile::from_bytes(&bytes).unwrap(), f);
    }

    fn sample_file() -> FaultVectorFile {
        let cfg = CrossbarConfig::new(6, 5, 2).unwrap();
        FaultVectorFile::new(
            cfg,
            vec![
                gen_bitflip_mask(6, 5, 0.2, 1).unwrap().with_layer("conv_1"),
                gen_stuckat_mask(6, 5, 0.5, 2, 0.5).unwrap().with_layer("dense_0"),
                gen_dynamic_mask(6, 5, 0.1, 3, 3).unwrap().with_layer("dense_1"),
            ],
        )
        .unwrap()
    }

    #[test]
    fn error_kinds_are_distinct() {
        let bytes = sample_file().to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FaultVectorFile::from_bytes(&bad), Err(Error::BadMagic { .. })));

        assert!(matches!(
            FaultVectorFile::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(FaultVectorFile::from_bytes(&bytes[..10]), Err(Error::Truncated { .. })));

        let text = String::from_utf8_lossy(&bytes[12..]).replace("\"version\":1", "\"version\":2");
        let m_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest = &text.as_bytes()[..m_len];
        let v2 = join_container(FAULT_FILE_MAGIC, manifest, &bytes[12 + m_len..]).unwrap();
        assert!(matches!(FaultVectorFile::from_bytes(&v2), Err(Error::UnsupportedVersion(2))));

        let manifest = String::from_utf8(bytes[12..12 + m_len].to_vec())
            .unwrap()
            .replacen("\"grid_len\":4", "\"grid_len\":3", 1);
        let short = join_container(FAULT_FILE_MAGIC, manifest.as_bytes(), &bytes[12 + m_len..]).unwrap();
        assert!(matches!(FaultVectorFile::from_bytes(&short), Err(Error::Inconsistent(_))));
    }

    #[test]
    fn mismatched_mask_rejected() {
        let m = gen_bitflip_mask(4, 4, 0.5, 0).unwrap();
        assert!(matches!(
            FaultVectorFile::new(CrossbarConfig::default(), vec![m]),
            Err(Error::MaskDims { .. })
        ));
    }

    #[test]
    fn atomic_write_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("masks.flimfv");
        let f = sample_file();
        f.write(&path).unwrap();
        assert_eq!(FaultVectorFile::read(&path).unwrap(), f);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn file_round_trip(
            rows in 1usize..50, cols in 1usize..20, xbars in 1usize..4,
            rate in 0.0f64..=1.0, seed in any::<u64>(), period in 0u64..10, p_one in 0.0f64..=1.0,
        ) {
            let cfg = CrossbarConfig::new(rows, cols, xbars).unwrap();
            let masks = vec![
                gen_bitflip_mask(rows, cols, rate, seed).unwrap().with_layer("a"),
                gen_stuckat_mask(rows, cols, rate, seed ^ 1, p_one).unwrap().with_layer("b"),
                gen_dynamic_mask(rows, cols, rate, period, seed ^ 2).unwrap().with_layer("c"),
            ];
            for m in &masks {
                prop_assert_eq!(m.faulty_count(), faulty_gate_count(rate, rows * cols));
            }
            let f = FaultVectorFile::new(cfg, masks).unwrap();
            let bytes = f.to_bytes().unwrap();
            let back = FaultVectorFile::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
