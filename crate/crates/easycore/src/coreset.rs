//! Hardness ledger and coreset selection.
//!
//! The ledger accumulates per-sample input-gradient norms across epochs;
//! the average is the sample's hardness score. Selection keeps the lowest
//! scores: plain prefix of the ascending order, a class-balanced variant,
//! or a seeded uniform baseline. Score arrays are indexed by sample id.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Per-sample running sums of input-gradient norms across epochs.
#[derive(Debug, Clone)]
pub struct AignLedger {
    ids: Vec<usize>,
    sum_norm: Vec<f64>,
    count: Vec<u64>,
    per_epoch: Option<Vec<Vec<f64>>>,
}

impl AignLedger {
    /// `ids[i]` is the sample id of slot i; `track_per_epoch` keeps the raw
    /// per-epoch norm matrix for trajectory plots.
    pub fn new(ids: &[usize], track_per_epoch: bool) -> Self {
        AignLedger {
            ids: ids.to_vec(),
            sum_norm: vec![0.0; ids.len()],
            count: vec![0; ids.len()],
            per_epoch: track_per_epoch.then(Vec::new),
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn epochs_recorded(&self) -> u64 {
        self.count.first().copied().unwrap_or(0)
    }

    /// Record one epoch's norms, aligned with the ledger's id slots.
    pub fn record_epoch(&mut self, norms: &[f64]) {
        assert_eq!(norms.len(), self.ids.len(), "ledger width mismatch");
        for (slot, &n) in norms.iter().enumerate() {
            self.sum_norm[slot] += n;
            self.count[slot] += 1;
        }
        if let Some(m) = &mut self.per_epoch {
            m.push(norms.to_vec());
        }
    }

    /// Merge norms for a disjoint id range computed by a shard; slots are
    /// addressed by position so merge order cannot change the result.
    pub fn record_epoch_sharded(&mut self, shards: &[(usize, Vec<f64>)]) {
        let mut norms = vec![0.0; self.ids.len()];
        for (offset, part) in shards {
            norms[*offset..offset + part.len()].copy_from_slice(part);
        }
        self.record_epoch(&norms);
    }

    pub fn per_epoch(&self) -> Option<&[Vec<f64>]> {
        self.per_epoch.as_deref()
    }

    /// Average norm per slot, in ledger slot order (use [`AignLedger::ids`]
    /// for the id of each slot).
    pub fn scores(&self) -> Result<Vec<f64>> {
        self.ids
            .iter()
            .zip(self.sum_norm.iter().zip(&self.count))
            .map(|(&id, (&sum, &count))| {
                if count == 0 {
                    Err(Error::ZeroCount { id })
                } else {
                    Ok(sum / count as f64)
                }
            })
            .collect()
    }

    /// Scores as a dense array indexed by id. Requires the ledger to cover
    /// ids 0..n-1 exactly (the usual full-dataset scoring run).
    pub fn dense_scores(&self) -> Result<Vec<f64>> {
        let scores = self.scores()?;
        let n = self.ids.len();
        let mut dense = vec![f64::NAN; n];
        for (slot, &id) in self.ids.iter().enumerate() {
            if id >= n {
                return Err(Error::UnknownId { id });
            }
            dense[id] = scores[slot];
        }
        if dense.iter().any(|v| v.is_nan()) {
            return Err(Error::config(
                "ledger ids do not cover 0..n-1; no dense score array exists",
            ));
        }
        Ok(dense)
    }
}

/// Mean of the recorded norms per sample; errors on any zero-count id.
pub fn aign_scores(ledger: &AignLedger) -> Result<Vec<f64>> {
    ledger.dense_scores()
}

/// Ascending stable order of scores; ties broken by ascending id.
/// `scores[id]` is the score of sample id; the result is a permutation of
/// ids, easiest first.
pub fn hardness_order(scores: &[f64]) -> Result<Vec<usize>> {
    if let Some(idx) = scores.iter().position(|v| v.is_nan()) {
        return Err(Error::NanScore { index: idx });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("NaN checked")
            .then(a.cmp(&b))
    });
    Ok(order)
}

fn selection_size(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!(
            "select.fraction must be in (0, 1], got {fraction}"
        )));
    }
    let k = (fraction * n as f64).floor() as usize;
    if k == 0 {
        return Err(Error::EmptySelection { fraction, n });
    }
    Ok(k)
}

/// The floor(fraction * n) lowest-score ids, in ascending score order.
pub fn easycore_select(scores: &[f64], fraction: f64) -> Result<Vec<usize>> {
    let k = selection_size(fraction, scores.len())?;
    let mut order = hardness_order(scores)?;
    order.truncate(k);
    Ok(order)
}

/// Class-balanced selection result. A class whose quota floors to zero is
/// reported, not treated as a failure.
#[derive(Debug, Clone)]
pub struct BalancedSelection {
    pub ids: Vec<usize>,
    /// Classes that contributed no samples at this fraction.
    pub empty_classes: Vec<usize>,
}

/// Per class c with n_c samples, the floor(fraction * n_c) lowest-score ids
/// of that class; classes concatenated in class order, each segment in
/// ascending score order.
pub fn easycore_balanced(
    scores: &[f64],
    labels: &[usize],
    fraction: f64,
) -> Result<BalancedSelection> {
    if scores.len() != labels.len() {
        return Err(Error::shape("easycore_balanced", &[scores.len()], &[labels.len()]));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!(
            "select.fraction must be in (0, 1], got {fraction}"
        )));
    }
    let order = hardness_order(scores)?;
    let class_count = labels.iter().map(|&l| l + 1).max().unwrap_or(0);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for &id in &order {
        per_class[labels[id]].push(id);
    }
    let mut ids = Vec::new();
    let mut empty_classes = Vec::new();
    for (class, members) in per_class.iter().enumerate() {
        let quota = (fraction * members.len() as f64).floor() as usize;
        if quota == 0 {
            empty_classes.push(class);
            continue;
        }
        ids.extend_from_slice(&members[..quota]);
    }
    if ids.is_empty() {
        return Err(Error::EmptySelection {
            fraction,
            n: scores.len(),
        });
    }
    Ok(BalancedSelection { ids, empty_classes })
}

/// Seeded uniform sample without replacement of floor(fraction * n) ids.
pub fn uniform_select(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let k = selection_size(fraction, n)?;
    let mut stream = Stream::derived(seed, "uniform-select", 0);
    Ok(rng::sample_without_replacement(&mut stream, n, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMethod {
    EasyCore,
    EasyCoreBalanced,
    Uniform,
}

/// A selection rule: which method, what fraction, and the seed used by the
/// uniform baseline.
#[derive(Debug, Clone)]
pub struct CoresetSpec {
    pub method: SelectionMethod,
    pub fraction: f64,
    pub seed: u64,
}

impl CoresetSpec {
    /// Run the selection. The balanced method needs labels; their absence
    /// is an error rather than a silent fallback.
    pub fn select(&self, scores: &[f64], labels: Option<&[usize]>) -> Result<Vec<usize>> {
        match self.method {
            SelectionMethod::EasyCore => easycore_select(scores, self.fraction),
            SelectionMethod::EasyCoreBalanced => {
                let labels = labels.ok_or_else(|| {
                    Error::config("the balanced selection method requires labels")
                })?;
                Ok(easycore_balanced(scores, labels, self.fraction)?.ids)
            }
            SelectionMethod::Uniform => uniform_select(scores.len(), self.fraction, self.seed),
        }
    }
}

/// Scores divided by their maximum; preserves rank order.
pub fn normalize_scores(scores: &[f64]) -> Result<Vec<f64>> {
    if let Some(idx) = scores.iter().position(|v| v.is_nan()) {
        return Err(Error::NanScore { index: idx });
    }
    let max = scores.iter().cloned().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return Err(Error::AllZeroScores);
    }
    Ok(scores.iter().map(|&s| s / max).collect())
}

/// Write the score interchange file: header `id,label,aign,normalized`.
pub fn write_score_csv<P: AsRef<Path>>(
    path: P,
    labels: &[usize],
    scores: &[f64],
) -> Result<()> {
    let normalized = normalize_scores(scores)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "id,label,aign,normalized")?;
    for (id, ((&label, &score), &norm)) in labels
        .iter()
        .zip(scores)
        .zip(&normalized)
        .enumerate()
    {
        writeln!(w, "{id},{label},{score},{norm}")?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed score file rows, dense by id.
pub struct ScoreFile {
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
}

pub fn read_score_csv<P: AsRef<Path>>(path: P) -> Result<ScoreFile> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == "id,label,aign,normalized" => {}
        Some((_, header)) => {
            return Err(Error::CsvFormat {
                path: display,
                line: 1,
                msg: format!("unexpected header {header:?}"),
            })
        }
        None => return Err(Error::EmptyDataset),
    }
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::CsvFormat {
                path: display,
                line: line_no + 1,
                msg: format!("expected 4 columns, got {}", fields.len()),
            });
        }
        let id: usize = fields[0].parse().map_err(|_| Error::CsvFormat {
            path: display.clone(),
            line: line_no + 1,
            msg: format!("bad id {:?}", fields[0]),
        })?;
        if id != labels.len() {
            return Err(Error::CsvFormat {
                path: display,
                line: line_no + 1,
                msg: format!("ids must be dense and ascending; expected {}, got {id}", labels.len()),
            });
        }
        labels.push(fields[1].parse().map_err(|_| Error::CsvFormat {
            path: display.clone(),
            line: line_no + 1,
            msg: format!("bad label {:?}", fields[1]),
        })?);
        scores.push(fields[2].parse().map_err(|_| Error::CsvFormat {
            path: display.clone(),
            line: line_no + 1,
            msg: format!("bad score {:?}", fields[2]),
        })?);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ScoreFile { labels, scores })
}

/// Write the selection interchange file: header `rank,id`.
pub fn write_selection_csv<P: AsRef<Path>>(path: P, ids: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "rank,id")?;
    for (rank, id) in ids.iter().enumerate() {
        writeln!(w, "{rank},{id}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_selection_csv<P: AsRef<Path>>(path: P) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "rank,id")) => {}
        Some((_, header)) => {
            return Err(Error::CsvFormat {
                path: display,
                line: 1,
                msg: format!("unexpected header {header:?}"),
            })
        }
        None => return Err(Error::EmptyDataset),
    }
    let mut ids = Vec::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(Error::CsvFormat {
                path: display,
                line: line_no + 1,
                msg: format!("expected 2 columns, got {}", fields.len()),
            });
        }
        ids.push(fields[1].parse().map_err(|_| Error::CsvFormat {
            path: display.clone(),
            line: line_no + 1,
            msg: format!("bad id {:?}", fields[1]),
        })?);
    }
    Ok(ids)
}

/// Per-epoch trajectory dump, long format: `epoch,id,norm`.
pub fn write_trajectory_csv<P: AsRef<Path>>(path: P, ledger: &AignLedger) -> Result<()> {
    let rows = ledger
        .per_epoch()
        .ok_or_else(|| Error::config("ledger was not tracking per-epoch norms"))?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "epoch,id,norm")?;
    let mut line = String::new();
    for (epoch, norms) in rows.iter().enumerate() {
        for (slot, &norm) in norms.iter().enumerate() {
            line.clear();
            let _ = write!(line, "{epoch},{},{norm}", ledger.ids()[slot]);
            writeln!(w, "{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}
