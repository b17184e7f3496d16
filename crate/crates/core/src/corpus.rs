//! Synthetic confounded text pool.
//!
//! The vocabulary holds four disjoint marker sets, one per value of each
//! label, followed by neutral filler. Every cell of the `(y_p, y_c)` table
//! gets the same number of examples, so the labels are independent in the
//! pool; correlation is introduced only when a split is sampled.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SeedRng;
use crate::sampler::{derive_seed, write_examples, Cell, Example};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    /// Size of each of the four marker sets.
    pub markers_per_set: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Per-position probability of a primary marker for the example's `y_p`.
    pub marker_rate_primary: f64,
    /// Per-position probability (given no primary marker) of a confounder
    /// marker for the example's `y_c`.
    pub marker_rate_confounder: f64,
    pub pool_size_per_cell: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            markers_per_set: 16,
            min_len: 32,
            max_len: 64,
            marker_rate_primary: 0.06,
            marker_rate_confounder: 0.10,
            pool_size_per_cell: 500,
            seed: 0,
        }
    }
}

/// Role of a vocabulary entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    Primary(u8),
    Confounder(u8),
    Neutral,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.markers_per_set == 0 || 4 * self.markers_per_set >= self.vocab_size {
            return Err(Error::Validation(format!(
                "4 marker sets of {} leave no neutral tokens in a vocabulary of {}",
                self.markers_per_set, self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Validation(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        for (name, r) in [("marker_rate_primary", self.marker_rate_primary), ("marker_rate_confounder", self.marker_rate_confounder)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Validation(format!("{name} = {r} outside [0, 1]")));
            }
        }
        if self.pool_size_per_cell == 0 {
            return Err(Error::Validation("pool_size_per_cell must be positive".into()));
        }
        Ok(())
    }

    /// First id of the marker set: primary sets come first, then confounder.
    fn set_start(&self, confounder: bool, label: u8) -> u32 {
        let slot = 2 * confounder as usize + label as usize;
        (slot * self.markers_per_set) as u32
    }

    pub fn primary_markers(&self, y_p: u8) -> std::ops::Range<u32> {
        let s = self.set_start(false, y_p);
        s..s + self.markers_per_set as u32
    }

    pub fn confounder_markers(&self, y_c: u8) -> std::ops::Range<u32> {
        let s = self.set_start(true, y_c);
        s..s + self.markers_per_set as u32
    }

    pub fn neutral_tokens(&self) -> std::ops::Range<u32> {
        (4 * self.markers_per_set) as u32..self.vocab_size as u32
    }

    pub fn classify(&self, token: u32) -> TokenClass {
        let m = self.markers_per_set as u32;
        match token / m {
            0 | 1 if token < 2 * m => TokenClass::Primary((token / m) as u8),
            2 | 3 if token < 4 * m => TokenClass::Confounder((token / m - 2) as u8),
            _ => TokenClass::Neutral,
        }
    }

    fn example(&self, cell: Cell, i: usize, rng: &mut SeedRng) -> Example {
        let len = rng.random_range(self.min_len..=self.max_len);
        let pick = |rng: &mut SeedRng, r: std::ops::Range<u32>| rng.random_range(r);
        let token_ids = (0..len)
            .map(|_| {
                if rng.random::<f64>() < self.marker_rate_primary {
                    pick(rng, self.primary_markers(cell.y_p))
                } else if rng.random::<f64>() < self.marker_rate_confounder {
                    pick(rng, self.confounder_markers(cell.y_c))
                } else {
                    pick(rng, self.neutral_tokens())
                }
            })
            .collect();
        Example { token_ids, y_p: cell.y_p, y_c: cell.y_c, source_id: format!("p{}c{}-{i:05}", cell.y_p, cell.y_c) }
    }
}

/// `pool_size_per_cell` examples per cell, cells in canonical order. Each
/// cell draws from its own seed stream.
pub fn generate_pool(spec: &CorpusSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut pool = Vec::with_capacity(4 * spec.pool_size_per_cell);
    for cell in Cell::ALL {
        let mut rng = SeedRng::seed_from_u64(derive_seed(spec.seed, 0x100 + cell.index() as u64));
        pool.extend((0..spec.pool_size_per_cell).map(|i| spec.example(cell, i, &mut rng)));
    }
    Ok(pool)
}

/// Tab-separated `id, token, class` lines.
pub fn vocabulary(spec: &CorpusSpec) -> String {
    let mut out = String::new();
    for id in 0..spec.vocab_size as u32 {
        let (name, class) = match spec.classify(id) {
            TokenClass::Primary(y) => (format!("prim{y}_{:02}", id - spec.primary_markers(y).start), format!("primary-{y}")),
            TokenClass::Confounder(y) => {
                (format!("conf{y}_{:02}", id - spec.confounder_markers(y).start), format!("confounder-{y}"))
            }
            TokenClass::Neutral => (format!("w{id:04}"), "neutral".to_string()),
        };
        out.push_str(&format!("{id}\t{name}\t{class}\n"));
    }
    out
}

/// Writes `pool.jsonl`, `vocab.tsv` and `corpus_spec.json` into `dir`.
pub fn export_pool(spec: &CorpusSpec, pool: &[Example], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_examples(&dir.join("pool.jsonl"), pool)?;
    std::fs::write(dir.join("vocab.tsv"), vocabulary(spec))?;
    let mut f = std::fs::File::create(dir.join("corpus_spec.json"))?;
    serde_json::to_writer_pretty(&mut f, spec)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec { pool_size_per_cell: 40, ..Default::default() }
    }

    #[test]
    fn marker_sets_are_disjoint_and_precede_neutral() {
        let s = CorpusSpec::default();
        assert_eq!(s.primary_markers(0), 0..16);
        assert_eq!(s.primary_markers(1), 16..32);
        assert_eq!(s.confounder_markers(0), 32..48);
        assert_eq!(s.confounder_markers(1), 48..64);
        assert_eq!(s.neutral_tokens(), 64..1024);
        assert_eq!(s.classify(17), TokenClass::Primary(1));
        assert_eq!(s.classify(50), TokenClass::Confounder(1));
        assert_eq!(s.classify(64), TokenClass::Neutral);
    }

    #[test]
    fn equal_cells_and_determinism() {
        let a = generate_pool(&small()).unwrap();
        assert_eq!(a, generate_pool(&small()).unwrap());
        let mut counts = [0; 4];
        a.iter().for_each(|e| counts[e.cell()] += 1);
        assert_eq!(counts, [40; 4]);
        assert!(a.iter().all(|e| (32..=64).contains(&e.token_ids.len())));
    }

    #[test]
    fn markers_follow_labels() {
        let s = small();
        for e in generate_pool(&s).unwrap() {
            for &t in &e.token_ids {
                match s.classify(t) {
                    TokenClass::Primary(y) => assert_eq!(y, e.y_p),
                    TokenClass::Confounder(y) => assert_eq!(y, e.y_c),
                    TokenClass::Neutral => {}
                }
            }
        }
    }

    #[test]
    fn zero_rates_give_only_neutral_tokens() {
        let s = CorpusSpec { marker_rate_primary: 0.0, marker_rate_confounder: 0.0, ..small() };
        let pool = generate_pool(&s).unwrap();
        assert!(pool.iter().flat_map(|e| &e.token_ids).all(|&t| s.classify(t) == TokenClass::Neutral));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(CorpusSpec { markers_per_set: 300, ..small() }.validate().is_err());
        assert!(CorpusSpec { min_len: 10, max_len: 5, ..small() }.validate().is_err());
        assert!(CorpusSpec { marker_rate_primary: 1.5, ..small() }.validate().is_err());
    }

    #[test]
    fn vocabulary_lists_every_id() {
        let v = vocabulary(&CorpusSpec::default());
        assert_eq!(v.lines().count(), 1024);
        assert!(v.starts_with("0\tprim0_00\tprimary-0\n"));
        assert!(v.contains("48\tconf1_00\tconfounder-1\n"));
    }
}
