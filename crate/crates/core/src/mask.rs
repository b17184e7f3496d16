//! Weight masks and the rules that build them from importance maps.
//!
//! Two selection rules live here:
//!
//! * per-matrix percentile thresholding, used by the (extended) confounding
//!   filter: inside every selected matrix, the `⌈p·n/100⌉` entries with the
//!   largest importance are masked;
//! * global top-k ranking across all matrices, and the dual-filter set
//!   algebra built on it (`M_I = top_p ∩ top_c`, `M_D = top_c \ top_p`).
//!
//! All ties are broken by canonical coordinate order (matrix id, then flat
//! row-major index), so masks are identical across platforms and reruns.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::delta::ImportanceMap;
use crate::error::{Error, Result};
use crate::model::{Block, TrackedMatrixId};

/// One maskable weight: a flat row-major index into a tracked matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coord {
    pub matrix: TrackedMatrixId,
    pub index: usize,
}

/// A sorted, duplicate-free set of coordinates over a universe of
/// `universe_size` tracked entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightMask {
    coords: Vec<Coord>,
    universe_size: usize,
}

impl WeightMask {
    pub fn new(coords: impl IntoIterator<Item = Coord>, universe_size: usize) -> Result<Self> {
        let mut coords: Vec<Coord> = coords.into_iter().collect();
        coords.sort_unstable();
        let before = coords.len();
        coords.dedup();
        if coords.len() != before {
            return Err(Error::Validation("mask contains duplicate coordinates".into()));
        }
        if coords.len() > universe_size {
            return Err(Error::Validation(format!(
                "mask of {} coordinates exceeds universe of {universe_size}",
                coords.len()
            )));
        }
        Ok(Self { coords, universe_size })
    }

    /// Builds from coordinates already sorted and unique.
    fn from_sorted(coords: Vec<Coord>, universe_size: usize) -> Self {
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        Self { coords, universe_size }
    }

    pub fn empty(universe_size: usize) -> Self {
        Self { coords: Vec::new(), universe_size }
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn universe_size(&self) -> usize {
        self.universe_size
    }

    pub fn contains(&self, c: &Coord) -> bool {
        self.coords.binary_search(c).is_ok()
    }

    /// `|coords| / universe_size`, zero for an empty universe.
    pub fn ablation_ratio(&self) -> f64 {
        if self.universe_size == 0 {
            0.0
        } else {
            self.coords.len() as f64 / self.universe_size as f64
        }
    }

    /// Same coordinates, re-expressed against a larger universe.
    pub fn with_universe(mut self, universe_size: usize) -> Result<Self> {
        if self.coords.len() > universe_size {
            return Err(Error::Validation("universe smaller than mask".into()));
        }
        self.universe_size = universe_size;
        Ok(self)
    }

    pub fn count_in(&self, matrix: TrackedMatrixId) -> usize {
        self.coords.iter().filter(|c| c.matrix == matrix).count()
    }

    fn check_universe(&self, other: &WeightMask) -> Result<()> {
        if self.universe_size != other.universe_size {
            return Err(Error::Validation(format!(
                "mask universes differ: {} vs {}",
                self.universe_size, other.universe_size
            )));
        }
        Ok(())
    }

    pub fn union(&self, other: &WeightMask) -> Result<WeightMask> {
        self.check_universe(other)?;
        let mut out = Vec::with_capacity(self.len() + other.len());
        let (mut i, mut j) = (0, 0);
        while i < self.coords.len() && j < other.coords.len() {
            match self.coords[i].cmp(&other.coords[j]) {
                std::cmp::Ordering::Less => {
                    out.push(self.coords[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(other.coords[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(self.coords[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&self.coords[i..]);
        out.extend_from_slice(&other.coords[j..]);
        Ok(Self::from_sorted(out, self.universe_size))
    }

    pub fn intersection(&self, other: &WeightMask) -> Result<WeightMask> {
        self.check_universe(other)?;
        let out = self.coords.iter().filter(|c| other.contains(c)).copied().collect();
        Ok(Self::from_sorted(out, self.universe_size))
    }

    pub fn difference(&self, other: &WeightMask) -> Result<WeightMask> {
        self.check_universe(other)?;
        let out = self.coords.iter().filter(|c| !other.contains(c)).copied().collect();
        Ok(Self::from_sorted(out, self.universe_size))
    }

    /// Binary encoding; see [`WeightMask::read_from`] for the layout.
    pub fn to_bytes(&self, source: &str) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out, source)?;
        Ok(out)
    }

    /// SHA-256 of the binary encoding.
    pub fn digest(&self, source: &str) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes(source)?)))
    }

    /// Layout (all integers little-endian):
    ///
    /// ```text
    /// b"WMSK"            magic
    /// u32                version = 1
    /// u64                universe size
    /// u32 + bytes        source-run identifier, UTF-8
    /// u32                number of matrix groups
    /// per group, in ascending matrix-id order:
    ///   u16 + bytes      matrix id, UTF-8 (e.g. "layer2.W_V")
    ///   u64              entry count n
    ///   n × u32          flat indices, strictly ascending
    /// ```
    pub fn write_to<W: Write>(&self, w: &mut W, source: &str) -> Result<()> {
        let mut groups: BTreeMap<TrackedMatrixId, Vec<u32>> = BTreeMap::new();
        for c in &self.coords {
            let idx = u32::try_from(c.index).map_err(|_| Error::Format("flat index exceeds u32".into()))?;
            groups.entry(c.matrix).or_default().push(idx);
        }
        w.write_all(MASK_MAGIC)?;
        w.write_all(&MASK_VERSION.to_le_bytes())?;
        w.write_all(&(self.universe_size as u64).to_le_bytes())?;
        w.write_all(&(source.len() as u32).to_le_bytes())?;
        w.write_all(source.as_bytes())?;
        w.write_all(&(groups.len() as u32).to_le_bytes())?;
        for (id, idx) in groups {
            let name = id.to_string();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(idx.len() as u64).to_le_bytes())?;
            for i in idx {
                w.write_all(&i.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Inverse of [`WeightMask::write_to`]; returns the mask and source id.
    pub fn read_from<R: Read>(r: &mut R) -> Result<(WeightMask, String)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MASK_MAGIC {
            return Err(Error::Format("bad mask magic".into()));
        }
        let version = read_u32(r)?;
        if version != MASK_VERSION {
            return Err(Error::Format(format!("unsupported mask version {version}")));
        }
        let universe = read_u64(r)? as usize;
        let source_len = read_u32(r)? as usize;
        let source = read_string(r, source_len)?;
        let n_groups = read_u32(r)?;
        let mut coords = Vec::new();
        for _ in 0..n_groups {
            let len = {
                let mut b = [0u8; 2];
                r.read_exact(&mut b)?;
                u16::from_le_bytes(b) as usize
            };
            let matrix: TrackedMatrixId = read_string(r, len)?.parse()?;
            let count = read_u64(r)?;
            let mut prev: Option<u32> = None;
            for _ in 0..count {
                let i = read_u32(r)?;
                if prev.is_some_and(|p| p >= i) {
                    return Err(Error::Format(format!("indices for {matrix} not strictly ascending")));
                }
                prev = Some(i);
                coords.push(Coord { matrix, index: i as usize });
            }
        }
        Ok((WeightMask::new(coords, universe)?, source))
    }
}

const MASK_MAGIC: &[u8; 4] = b"WMSK";
const MASK_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(e.to_string()))
}

fn check_pct(pct: f64, what: &str) -> Result<()> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::Validation(format!("{what} must lie in [0, 100], got {pct}")));
    }
    Ok(())
}

/// `⌊pct·n/100⌋`, tolerant of binary rounding in `pct`.
pub fn floor_count(pct: f64, n: usize) -> usize {
    (((pct * n as f64) / 100.0 + 1e-9).floor() as usize).min(n)
}

/// `⌈pct·n/100⌉`, tolerant of binary rounding in `pct`.
pub fn ceil_count(pct: f64, n: usize) -> usize {
    (((pct * n as f64) / 100.0 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Indices of `values` ordered by descending value, ascending index on ties.
pub(crate) fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Per-matrix nearest-rank thresholding: inside each listed matrix, mask
/// the `⌈mask_pct·n/100⌉` entries with the largest importance. The mask's
/// universe is the total size of the listed matrices.
pub fn threshold_mask_per_matrix(
    pi: &ImportanceMap,
    matrices: &[TrackedMatrixId],
    mask_pct: f64,
) -> Result<WeightMask> {
    check_pct(mask_pct, "mask_pct")?;
    let mut selected: Vec<TrackedMatrixId> = matrices.to_vec();
    selected.sort();
    selected.dedup();
    let mut coords = Vec::new();
    let mut universe = 0;
    for id in selected {
        let t = pi.get(&id).ok_or_else(|| Error::Validation(format!("matrix {id} missing from importance map")))?;
        universe += t.len();
        let count = ceil_count(mask_pct, t.len());
        let order = descending_order(t.data());
        coords.extend(order[..count].iter().map(|&index| Coord { matrix: id, index }));
    }
    WeightMask::new(coords, universe)
}

/// Global ranking of every entry in an importance map, descending by value,
/// ties by (matrix id, flat index).
#[derive(Clone, Debug)]
pub struct GlobalRanking {
    order: Vec<Coord>,
    shapes: BTreeMap<TrackedMatrixId, usize>,
}

impl GlobalRanking {
    pub fn new(pi: &ImportanceMap) -> Self {
        let mut entries: Vec<(f64, Coord)> = Vec::with_capacity(pi.values().map(|t| t.len()).sum());
        for (&matrix, t) in pi {
            entries.extend(t.data().iter().enumerate().map(|(index, &v)| (v, Coord { matrix, index })));
        }
        entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Self {
            order: entries.into_iter().map(|(_, c)| c).collect(),
            shapes: pi.iter().map(|(id, t)| (*id, t.len())).collect(),
        }
    }

    pub fn universe_size(&self) -> usize {
        self.order.len()
    }

    /// Number of coordinates selected at `k_pct`: `⌊k_pct·U/100⌋`.
    pub fn count_for(&self, k_pct: f64) -> usize {
        floor_count(k_pct, self.order.len())
    }

    /// Top `count` coordinates in rank order.
    pub fn prefix(&self, count: usize) -> &[Coord] {
        &self.order[..count.min(self.order.len())]
    }

    pub fn top(&self, k_pct: f64) -> Result<WeightMask> {
        check_pct(k_pct, "k_pct")?;
        let mut coords = self.prefix(self.count_for(k_pct)).to_vec();
        coords.sort_unstable();
        Ok(WeightMask::from_sorted(coords, self.universe_size()))
    }

    fn same_universe(&self, other: &GlobalRanking) -> bool {
        self.shapes == other.shapes
    }
}

/// Top `k_pct` percent of all entries of `pi`, ranked globally.
pub fn topk_set(pi: &ImportanceMap, k_pct: f64) -> Result<WeightMask> {
    GlobalRanking::new(pi).top(k_pct)
}

/// The three dual-filter masks at one `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualMasks {
    pub intersection: WeightMask,
    pub difference: WeightMask,
    pub union: WeightMask,
}

impl DualMasks {
    pub fn get(&self, kind: MaskType) -> &WeightMask {
        match kind {
            MaskType::Intersection => &self.intersection,
            MaskType::Difference => &self.difference,
            MaskType::Union => &self.union,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MaskType {
    #[serde(rename = "M_I")]
    Intersection,
    #[serde(rename = "M_D")]
    Difference,
    #[serde(rename = "M_union")]
    Union,
}

impl MaskType {
    pub const ALL: [MaskType; 3] = [MaskType::Intersection, MaskType::Difference, MaskType::Union];

    pub fn name(self) -> &'static str {
        match self {
            MaskType::Intersection => "M_I",
            MaskType::Difference => "M_D",
            MaskType::Union => "M_union",
        }
    }
}

impl fmt::Display for MaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M_I" | "intersection" => Ok(MaskType::Intersection),
            "M_D" | "difference" => Ok(MaskType::Difference),
            "M_union" | "union" => Ok(MaskType::Union),
            _ => Err(Error::Validation(format!("unknown mask type '{s}'"))),
        }
    }
}

/// Precomputed rankings of a primary and a confounder importance map, from
/// which the dual-filter masks at any `k` are cheap to extract.
#[derive(Clone, Debug)]
pub struct DualFilter {
    primary: GlobalRanking,
    confounder: GlobalRanking,
    primary_rank: BTreeMap<TrackedMatrixId, Vec<usize>>,
}

impl DualFilter {
    pub fn new(delta_p: &ImportanceMap, delta_c: &ImportanceMap) -> Result<Self> {
        let primary = GlobalRanking::new(delta_p);
        let confounder = GlobalRanking::new(delta_c);
        if !primary.same_universe(&confounder) {
            return Err(Error::Validation("primary and confounder importance maps cover different universes".into()));
        }
        let mut primary_rank: BTreeMap<TrackedMatrixId, Vec<usize>> =
            primary.shapes.iter().map(|(id, &n)| (*id, vec![0; n])).collect();
        for (rank, c) in primary.order.iter().enumerate() {
            primary_rank.get_mut(&c.matrix).expect("known matrix")[c.index] = rank;
        }
        Ok(Self { primary, confounder, primary_rank })
    }

    pub fn universe_size(&self) -> usize {
        self.primary.universe_size()
    }

    pub fn masks(&self, k_pct: f64) -> Result<DualMasks> {
        check_pct(k_pct, "k_pct")?;
        let count = self.primary.count_for(k_pct);
        let mut union = self.confounder.prefix(count).to_vec();
        union.sort_unstable();
        let (intersection, difference): (Vec<Coord>, Vec<Coord>) =
            union.iter().partition(|c| self.primary_rank[&c.matrix][c.index] < count);
        let u = self.universe_size();
        Ok(DualMasks {
            intersection: WeightMask::from_sorted(intersection, u),
            difference: WeightMask::from_sorted(difference, u),
            union: WeightMask::from_sorted(union, u),
        })
    }
}

/// `(M_I, M_D, M_I ∪ M_D)` for one `k`.
pub fn dual_filter_masks(delta_p: &ImportanceMap, delta_c: &ImportanceMap, k_pct: f64) -> Result<DualMasks> {
    DualFilter::new(delta_p, delta_c)?.masks(k_pct)
}

/// Drops the classification head from an importance map (the dual-filter
/// universe excludes it).
pub fn without_head(pi: &ImportanceMap) -> ImportanceMap {
    pi.iter().filter(|(id, _)| id.block() != Block::Cls).map(|(id, t)| (*id, t.clone())).collect()
}
