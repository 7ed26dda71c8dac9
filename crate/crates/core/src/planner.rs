//! Accuracy tables and the (split point, feature size) planner.
//!
//! The planner is an exhaustive search: every table row at the link's SNR is
//! costed with the latency model and the cheapest row that meets the
//! accuracy floor wins. Rows are matched to the SNR exactly when possible,
//! otherwise to the nearest lower SNR present for that split; accuracies are
//! never interpolated.

use crate::channel::{payload_bits, ChannelProfile};
use crate::cost::{task_time_from_flops, CostReport, DeviceProfile};
use crate::graph::{
    apply_split_with, count_flops, GraphError, ModelGraph, SplitOptions, SplitPoint,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;
use thiserror::Error;

/// Accuracy measurements shipped with the crate: the minimum-feature-size
/// cells, the per-split two-stage results at 5 dB and the single-stage split
/// comparison (model `resnet34-d1`).
pub const PAPER_TABLE_CSV: &str = include_str!("../data/paper_tables.csv");

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("accuracy table has no records")]
    NoRecords,
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("line {line}: duplicate record {key} (first on line {first})")]
    Duplicate { line: u64, first: u64, key: String },
    #[error("accuracy table header must start with `model,split,n_c,snr_db,top1`, got `{0}`")]
    BadHeader(String),
    #[error("no FLOP figures for {split} at n_c = {n_c}")]
    MissingFlops { split: SplitPoint, n_c: usize },
    #[error("accuracy floor must lie in [0, 1], got {0}")]
    InvalidFloor(f64),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("cannot read accuracy table: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub model: String,
    pub split: SplitPoint,
    pub n_c: usize,
    pub snr_db: f64,
    pub top1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl AccuracyRecord {
    fn key(&self) -> String {
        format!("({}, {}, {}, {} dB)", self.model, self.split, self.n_c, self.snr_db)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub records: Vec<AccuracyRecord>,
    /// Where the table came from plus a SHA-256 of its bytes.
    pub source: String,
    pub sha256: String,
}

impl AccuracyTable {
    /// The table bundled with the crate.
    pub fn bundled() -> Self {
        load_accuracy_table_from_str(PAPER_TABLE_CSV, "bundled:paper_tables.csv")
            .expect("bundled accuracy table is valid")
    }

    pub fn models(&self) -> Vec<&str> {
        let mut m: Vec<&str> = self.records.iter().map(|r| r.model.as_str()).collect();
        m.sort_unstable();
        m.dedup();
        m
    }

    /// Rows of one model only.
    pub fn for_model(&self, model: &str) -> AccuracyTable {
        AccuracyTable {
            records: self.records.iter().filter(|r| r.model == model).cloned().collect(),
            source: format!("{}#{model}", self.source),
            sha256: self.sha256.clone(),
        }
    }

    /// SNR used for `split` when the link runs at `snr_db`: an exact match,
    /// else the nearest lower SNR with rows for that split.
    pub fn matched_snr(&self, split: SplitPoint, snr_db: f64) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.snr_db <= snr_db)
            .map(|r| r.snr_db)
            .max_by(f64::total_cmp)
    }
}

/// Parse an accuracy CSV. The header must begin with
/// `model,split,n_c,snr_db,top1`; an optional `provenance` column follows.
pub fn load_accuracy_table<R: Read>(mut reader: R, source: &str) -> Result<AccuracyTable, PlanError> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    load_accuracy_table_from_str(&text, source)
}

pub fn load_accuracy_table_from_str(text: &str, source: &str) -> Result<AccuracyTable, PlanError> {
    let sha256 = Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| PlanError::Malformed {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let expected = ["model", "split", "n_c", "snr_db", "top1"];
    let names: Vec<&str> = header.iter().collect();
    if names.is_empty() || names.iter().all(|n| n.is_empty()) {
        return Err(PlanError::NoRecords);
    }
    if names.len() < 5 || names[..5] != expected {
        return Err(PlanError::BadHeader(names.join(",")));
    }
    let has_provenance = names.get(5) == Some(&"provenance");

    let mut records = Vec::new();
    let mut seen: HashMap<(String, SplitPoint, usize, u64), u64> = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| PlanError::Malformed {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let bad = |reason: String| PlanError::Malformed { line, reason };
        if row.len() < 5 || (row.len() > 5 && !has_provenance) || row.len() > 6 {
            return Err(bad(format!("expected 5 or 6 fields, got {}", row.len())));
        }
        let model = row[0].to_string();
        if model.is_empty() {
            return Err(bad("empty model name".into()));
        }
        let split: SplitPoint = row[1].parse().map_err(|e: GraphError| bad(e.to_string()))?;
        let n_c: usize = row[2]
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| bad(format!("n_c `{}` is not a positive integer", &row[2])))?;
        let snr_db: f64 = row[3]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| bad(format!("snr_db `{}` is not a number", &row[3])))?;
        let top1: f64 = row[4]
            .parse()
            .ok()
            .filter(|v| (0.0..=1.0).contains(v))
            .ok_or_else(|| bad(format!("top1 `{}` is not in [0, 1]", &row[4])))?;
        let provenance = row.get(5).filter(|s| !s.is_empty()).map(str::to_string);
        let rec = AccuracyRecord {
            model,
            split,
            n_c,
            snr_db,
            top1,
            provenance,
        };
        // -0.0 and 0.0 are the same SNR
        let snr_key = (snr_db + 0.0).to_bits();
        match seen.get(&(rec.model.clone(), split, n_c, snr_key)) {
            Some(&first) => {
                return Err(PlanError::Duplicate {
                    line,
                    first,
                    key: rec.key(),
                })
            }
            None => {
                seen.insert((rec.model.clone(), split, n_c, snr_key), line);
            }
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(PlanError::NoRecords);
    }
    Ok(AccuracyTable {
        records,
        source: source.to_string(),
        sha256,
    })
}

/// Smallest `n_c` at `(split, snr)` whose accuracy reaches `floor`, or
/// `None` when no row qualifies. SNR matching follows
/// [`AccuracyTable::matched_snr`].
pub fn min_nc(table: &AccuracyTable, split: SplitPoint, snr_db: f64, floor: f64) -> Option<usize> {
    let snr = table.matched_snr(split, snr_db)?;
    table
        .records
        .iter()
        .filter(|r| r.split == split && r.snr_db == snr && r.top1 >= floor)
        .map(|r| r.n_c)
        .min()
}

/// FLOPs and payload size of one `(split, n_c)` configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopEntry {
    pub f_m_t: u64,
    pub f_m_r: u64,
    pub f_m: u64,
    /// Values crossing the link.
    pub payload_elements: usize,
}

/// FLOP figures keyed by `(split, n_c)`. SP-0 and SP-6 ignore `n_c`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopCatalog {
    entries: BTreeMap<(SplitPoint, usize), FlopEntry>,
}

impl FlopCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(split: SplitPoint, n_c: usize) -> (SplitPoint, usize) {
        if split.is_inner() {
            (split, n_c)
        } else {
            (split, 0)
        }
    }

    pub fn insert(&mut self, split: SplitPoint, n_c: usize, entry: FlopEntry) {
        self.entries.insert(Self::key(split, n_c), entry);
    }

    pub fn get(&self, split: SplitPoint, n_c: usize) -> Option<&FlopEntry> {
        self.entries.get(&Self::key(split, n_c))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Count FLOPs of `graph` split at every `(split, n_c)` row of `table`.
    pub fn covering(
        table: &AccuracyTable,
        graph: &ModelGraph,
        options: SplitOptions,
    ) -> Result<Self, PlanError> {
        let mut cat = Self::new();
        for r in &table.records {
            if cat.get(r.split, r.n_c).is_some() {
                continue;
            }
            let m = apply_split_with(graph, r.split, r.n_c, options)?;
            let f = count_flops(&m);
            cat.insert(
                r.split,
                r.n_c,
                FlopEntry {
                    f_m_t: f.f_m_t,
                    f_m_r: f.f_m_r,
                    f_m: f.f_m,
                    payload_elements: m.n_c,
                },
            );
        }
        Ok(cat)
    }
}

/// One costed table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub split: SplitPoint,
    pub n_c: usize,
    pub snr_db: f64,
    pub top1: f64,
    pub cost: CostReport,
}

/// Closest row that missed the accuracy floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearestMiss {
    pub split: SplitPoint,
    pub n_c: usize,
    pub snr_db: f64,
    pub top1: f64,
    pub shortfall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub feasible: bool,
    pub split: Option<SplitPoint>,
    pub n_c: Option<usize>,
    pub top1: Option<f64>,
    pub cost: Option<CostReport>,
    pub floor: f64,
    pub link_snr_db: f64,
    /// SNR of the matched table rows for the chosen split.
    pub matched_snr_db: Option<f64>,
    pub candidates: usize,
    pub feasible_candidates: usize,
    pub nearest_miss: Option<NearestMiss>,
}

impl fmt::Display for PlanResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.split, self.n_c, self.top1, self.cost) {
            (Some(split), Some(n_c), Some(top1), Some(cost)) if self.feasible => {
                writeln!(f, "feasible: {split} with n_c = {n_c}")?;
                writeln!(
                    f,
                    "  top-1 {top1:.4} (floor {:.4}) at {} dB table rows (link {} dB)",
                    self.floor,
                    self.matched_snr_db.unwrap_or(self.link_snr_db),
                    self.link_snr_db
                )?;
                writeln!(
                    f,
                    "  t_task {:.6} s = t_m_t {:.6} s + t_m_r {:.6} s + t_comm {:.6} s ({} bits)",
                    cost.t_task,
                    cost.breakdown.t_m_t,
                    cost.breakdown.t_m_r,
                    cost.t_comm,
                    cost.breakdown.payload_bits
                )?;
                write!(
                    f,
                    "  {} of {} candidates met the floor",
                    self.feasible_candidates, self.candidates
                )
            }
            _ => {
                writeln!(
                    f,
                    "infeasible: no configuration reaches top-1 {:.4} at {} dB ({} candidates)",
                    self.floor, self.link_snr_db, self.candidates
                )?;
                match &self.nearest_miss {
                    Some(m) => write!(
                        f,
                        "  nearest miss: {} with n_c = {} at {} dB, top-1 {:.4} (short by {:.4})",
                        m.split, m.n_c, m.snr_db, m.top1, m.shortfall
                    ),
                    None => write!(f, "  no table rows at or below this SNR"),
                }
            }
        }
    }
}

/// Cost every row matched to the link SNR.
pub fn candidates(
    table: &AccuracyTable,
    catalog: &FlopCatalog,
    dev_t: DeviceProfile,
    dev_r: DeviceProfile,
    channel: &ChannelProfile,
) -> Result<Vec<Candidate>, PlanError> {
    let mut matched: HashMap<SplitPoint, Option<f64>> = HashMap::new();
    let mut out = Vec::new();
    for r in &table.records {
        let snr = *matched
            .entry(r.split)
            .or_insert_with(|| table.matched_snr(r.split, channel.snr_db));
        if snr != Some(r.snr_db) {
            continue;
        }
        let e = catalog.get(r.split, r.n_c).ok_or(PlanError::MissingFlops {
            split: r.split,
            n_c: r.n_c,
        })?;
        let bits = payload_bits(e.payload_elements, channel.payload_dtype, r.split);
        out.push(Candidate {
            split: r.split,
            n_c: r.n_c,
            snr_db: r.snr_db,
            top1: r.top1,
            cost: task_time_from_flops(e.f_m_t, e.f_m_r, dev_t, dev_r, bits, channel),
        });
    }
    Ok(out)
}

/// Order used to pick the winner: task time, then `n_c`, then split.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    a.cost
        .t_task
        .total_cmp(&b.cost.t_task)
        .then(a.n_c.cmp(&b.n_c))
        .then(a.split.cmp(&b.split))
}

pub fn plan(
    table: &AccuracyTable,
    catalog: &FlopCatalog,
    dev_t: DeviceProfile,
    dev_r: DeviceProfile,
    channel: &ChannelProfile,
    floor: f64,
) -> Result<PlanResult, PlanError> {
    if !(0.0..=1.0).contains(&floor) {
        return Err(PlanError::InvalidFloor(floor));
    }
    let all = candidates(table, catalog, dev_t, dev_r, channel)?;
    let feasible: Vec<&Candidate> = all.iter().filter(|c| c.top1 >= floor).collect();
    let best = feasible.iter().copied().min_by(|a, b| candidate_order(a, b));
    let nearest_miss = if best.is_none() {
        all.iter()
            .max_by(|a, b| {
                a.top1
                    .total_cmp(&b.top1)
                    .then_with(|| candidate_order(b, a))
            })
            .map(|c| NearestMiss {
                split: c.split,
                n_c: c.n_c,
                snr_db: c.snr_db,
                top1: c.top1,
                shortfall: floor - c.top1,
            })
    } else {
        None
    };
    Ok(PlanResult {
        feasible: best.is_some(),
        split: best.map(|c| c.split),
        n_c: best.map(|c| c.n_c),
        top1: best.map(|c| c.top1),
        cost: best.map(|c| c.cost),
        floor,
        link_snr_db: channel.snr_db,
        matched_snr_db: best.map(|c| c.snr_db),
        candidates: all.len(),
        feasible_candidates: feasible.len(),
        nearest_miss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::PayloadDtype;

    fn table(text: &str) -> Result<AccuracyTable, PlanError> {
        load_accuracy_table_from_str(text, "test")
    }

    #[test]
    fn parses_example_row() {
        let t = table("model,split,n_c,snr_db,top1\nresnet34,SP-4,16,5,0.6601\n").unwrap();
        assert_eq!(t.records[0].split, SplitPoint::Sp4);
        assert_eq!(t.records[0].n_c, 16);
        assert_eq!(t.records[0].top1, 0.6601);
    }

    #[test]
    fn empty_and_duplicate_rejected() {
        assert!(matches!(table(""), Err(PlanError::NoRecords)));
        assert!(matches!(table("model,split,n_c,snr_db,top1\n"), Err(PlanError::NoRecords)));
        let err = table("model,split,n_c,snr_db,top1\nm,SP-2,8,5,0.5\nm,SP-2,8,5.0,0.6\n").unwrap_err();
        match &err {
            PlanError::Duplicate { line, first, key } => {
                assert_eq!((*line, *first), (3, 2));
                assert!(key.contains("SP-2") && key.contains('8'));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_report_line() {
        for (body, line) in [
            ("m,SP-9,8,5,0.5", 2),
            ("m,SP-2,0,5,0.5", 2),
            ("m,SP-2,8,x,0.5", 2),
            ("m,SP-2,8,5,1.5", 2),
        ] {
            let text = format!("model,split,n_c,snr_db,top1\n{body}\n");
            match table(&text).unwrap_err() {
                PlanError::Malformed { line: l, .. } => assert_eq!(l, line, "{body}"),
                other => panic!("unexpected {other:?}"),
            }
        }
        assert!(matches!(
            table("a,b,c\n1,2,3\n"),
            Err(PlanError::BadHeader(_))
        ));
    }

    #[test]
    fn bundled_min_nc() {
        let t = AccuracyTable::bundled().for_model("resnet34");
        assert_eq!(min_nc(&t, SplitPoint::Sp4, 5.0, 0.66), Some(16));
        assert_eq!(min_nc(&t, SplitPoint::Sp2, 0.0, 0.66), Some(1024));
        assert_eq!(min_nc(&t, SplitPoint::Sp2, 4.0, 0.66), Some(512));
        assert_eq!(min_nc(&t, SplitPoint::Sp2, -1.0, 0.66), None);
        assert_eq!(min_nc(&t, SplitPoint::Sp2, 5.0, 0.99), None);
    }

    #[test]
    fn plan_single_and_infeasible() {
        let t = table("model,split,n_c,snr_db,top1\nm,SP-3,32,5,0.7\nm,SP-2,64,5,0.5\n").unwrap();
        let mut cat = FlopCatalog::new();
        let e = FlopEntry {
            f_m_t: 10,
            f_m_r: 10,
            f_m: 20,
            payload_elements: 32,
        };
        cat.insert(SplitPoint::Sp3, 32, e);
        cat.insert(SplitPoint::Sp2, 64, FlopEntry { payload_elements: 64, ..e });
        let d = DeviceProfile::new(1e-9).unwrap();
        let ch = ChannelProfile::new(5.0, 1e6, PayloadDtype::F32).unwrap();
        let p = plan(&t, &cat, d, d, &ch, 0.6).unwrap();
        assert!(p.feasible);
        assert_eq!((p.split, p.n_c), (Some(SplitPoint::Sp3), Some(32)));
        let p = plan(&t, &cat, d, d, &ch, 0.9).unwrap();
        assert!(!p.feasible);
        let miss = p.nearest_miss.as_ref().unwrap();
        assert_eq!(miss.split, SplitPoint::Sp3);
        assert!((miss.shortfall - 0.2).abs() < 1e-12);
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"feasible\":false"));
    }
}
