//! Cross-layer traces: ingestion, CSV persistence and dataset splitting.
//!
//! A trace holds one sample per chunk download: the application-layer
//! throughput plus three lower-layer readings (MAC rate, PRB count, MCS
//! index).
//!
//! CSV layout, one row per sample:
//!
//! ```text
//! trace_id,chunk_index,app_throughput_mbps,mac_rate_mbps,prb_count,mcs_index
//! ```
//!
//! `trace_id` is optional when a file holds a single trace (the file stem is
//! used). Lines starting with `#` are comments; `#meta\t<id>\t<key>\t<value>`
//! comment lines carry trace metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AbrError, Result};

/// Highest valid MCS index.
pub const MAX_MCS_INDEX: u32 = 31;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub app_throughput_mbps: f64,
    pub mac_rate_mbps: f64,
    pub prb_count: u32,
    pub mcs_index: u32,
}

impl TraceSample {
    pub fn new(app_throughput_mbps: f64, mac_rate_mbps: f64, prb_count: u32, mcs_index: u32) -> Self {
        Self {
            app_throughput_mbps,
            mac_rate_mbps,
            prb_count,
            mcs_index,
        }
    }

    /// Lower-layer vector in the canonical order MAC, PRB, MCS.
    pub fn lower_layers(&self) -> [f64; 3] {
        [self.mac_rate_mbps, self.prb_count as f64, self.mcs_index as f64]
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Trace {
    pub id: String,
    pub samples: Vec<TraceSample>,
    pub metadata: BTreeMap<String, String>,
}

impl Trace {
    pub fn new(id: impl Into<String>, samples: Vec<TraceSample>) -> Self {
        Self {
            id: id.into(),
            samples,
            metadata: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn throughputs(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.app_throughput_mbps).collect()
    }

    pub fn mac_rates(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.mac_rate_mbps).collect()
    }

    /// Field invariants plus a minimum length of `min_len` samples.
    pub fn validate(&self, min_len: usize) -> Result<()> {
        if self.id.is_empty() || self.id.chars().any(|c| c.is_whitespace() || c == ',') {
            return Err(AbrError::Validation(format!(
                "trace id {:?} must be non-empty without whitespace or commas",
                self.id
            )));
        }
        if self.samples.len() < min_len {
            return Err(AbrError::Validation(format!(
                "trace {} has {} samples, need length >= k = {min_len}",
                self.id,
                self.samples.len()
            )));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if !(s.app_throughput_mbps > 0.0 && s.app_throughput_mbps.is_finite()) {
                return Err(AbrError::Validation(format!(
                    "trace {} sample {i}: throughput must be > 0, got {}",
                    self.id, s.app_throughput_mbps
                )));
            }
            if !(s.mac_rate_mbps >= 0.0 && s.mac_rate_mbps.is_finite()) {
                return Err(AbrError::Validation(format!(
                    "trace {} sample {i}: MAC rate must be >= 0, got {}",
                    self.id, s.mac_rate_mbps
                )));
            }
            if s.mcs_index > MAX_MCS_INDEX {
                return Err(AbrError::Validation(format!(
                    "trace {} sample {i}: MCS index {} outside [0, {MAX_MCS_INDEX}]",
                    self.id, s.mcs_index
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct Row {
    trace_id: Option<String>,
    chunk_index: usize,
    app_throughput_mbps: f64,
    mac_rate_mbps: f64,
    prb_count: u32,
    mcs_index: u32,
}

/// Loads every trace under `path` (a CSV file or a directory of CSV files)
/// and validates each against `min_len`.
pub fn load_traces(path: &Path, min_len: usize) -> Result<Vec<Trace>> {
    let mut traces = Vec::new();
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|e| AbrError::io(path, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "csv"))
            .collect();
        files.sort();
        for file in files {
            traces.extend(load_trace_file(&file)?);
        }
    } else {
        traces = load_trace_file(path)?;
    }
    if traces.is_empty() {
        log::warn!("no traces found in {}", path.display());
    }
    for t in &traces {
        t.validate(min_len)?;
    }
    Ok(traces)
}

fn load_trace_file(path: &Path) -> Result<Vec<Trace>> {
    let text = fs::read_to_string(path).map_err(|e| AbrError::io(path, e))?;
    let default_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".to_string());

    let mut metadata: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut body = String::with_capacity(text.len());
    // Comment lines are blanked rather than dropped so csv line numbers stay
    // aligned with the file.
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("#meta\t") {
            let parts: Vec<&str> = rest.splitn(3, '\t').collect();
            if let [id, key, value] = parts[..] {
                metadata
                    .entry(id.to_string())
                    .or_default()
                    .insert(key.to_string(), value.to_string());
            }
        }
        if !line.starts_with('#') {
            body.push_str(line);
        }
        body.push('\n');
    }
    if body.trim().is_empty() {
        log::warn!("{} is empty", path.display());
        return Ok(Vec::new());
    }

    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, Vec<(usize, TraceSample)>> = BTreeMap::new();
    for record in reader.deserialize::<Row>() {
        let row = record.map_err(|e| AbrError::Parse {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let id = row.trace_id.clone().unwrap_or_else(|| default_id.clone());
        let entry = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            Vec::new()
        });
        entry.push((
            row.chunk_index,
            TraceSample::new(row.app_throughput_mbps, row.mac_rate_mbps, row.prb_count, row.mcs_index),
        ));
    }

    let mut traces = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = by_id.remove(&id).unwrap_or_default();
        rows.sort_by_key(|(idx, _)| *idx);
        if rows.iter().enumerate().any(|(i, (idx, _))| *idx != i) {
            return Err(AbrError::Validation(format!(
                "trace {id} in {}: chunk_index must run 0..n without gaps",
                path.display()
            )));
        }
        let mut trace = Trace::new(id.clone(), rows.into_iter().map(|(_, s)| s).collect());
        trace.metadata = metadata.remove(&id).unwrap_or_default();
        traces.push(trace);
    }
    Ok(traces)
}

/// Serializes traces as CSV text with an optional leading comment line.
pub fn traces_to_csv(traces: &[Trace], header_comment: Option<&str>) -> Result<String> {
    let mut out = String::new();
    if let Some(comment) = header_comment {
        out.push_str("# ");
        out.push_str(comment);
        out.push('\n');
    }
    for t in traces {
        for (k, v) in &t.metadata {
            if k.contains(['\t', '\n']) || v.contains(['\t', '\n']) {
                return Err(AbrError::Validation(format!(
                    "metadata of trace {} contains tabs or newlines",
                    t.id
                )));
            }
            out.push_str(&format!("#meta\t{}\t{k}\t{v}\n", t.id));
        }
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record([
        "trace_id",
        "chunk_index",
        "app_throughput_mbps",
        "mac_rate_mbps",
        "prb_count",
        "mcs_index",
    ])?;
    for t in traces {
        for (i, s) in t.samples.iter().enumerate() {
            writer.write_record(&[
                t.id.clone(),
                i.to_string(),
                s.app_throughput_mbps.to_string(),
                s.mac_rate_mbps.to_string(),
                s.prb_count.to_string(),
                s.mcs_index.to_string(),
            ])?;
        }
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| AbrError::Validation(format!("csv buffer: {e}")))?;
    out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
    Ok(out)
}

/// Writes all traces into a single CSV file with a `trace_id` column.
pub fn save_traces(traces: &[Trace], path: &Path) -> Result<()> {
    save_traces_with_header(traces, path, None)
}

pub fn save_traces_with_header(traces: &[Trace], path: &Path, header_comment: Option<&str>) -> Result<()> {
    let text = traces_to_csv(traces, header_comment)?;
    fs::write(path, text).map_err(|e| AbrError::io(path, e))
}

/// Fractions for the two-level offline/online split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub offline_fraction: f64,
    pub online_fraction: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            offline_fraction: 0.67,
            online_fraction: 0.33,
            train_fraction: 0.6,
            val_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        let fractions = [
            self.offline_fraction,
            self.online_fraction,
            self.train_fraction,
            self.val_fraction,
            self.test_fraction,
        ];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(AbrError::Config("split fractions must lie in [0, 1]".into()));
        }
        let top = self.offline_fraction + self.online_fraction;
        let sub = self.train_fraction + self.val_fraction + self.test_fraction;
        if (top - 1.0).abs() > 1e-9 || (sub - 1.0).abs() > 1e-9 {
            return Err(AbrError::Config(format!(
                "split fractions must sum to 1 per level (got {top} and {sub})"
            )));
        }
        Ok(())
    }
}

/// Part sizes for `n` items: every part but the last is `floor(n * f)`, the
/// last part takes the remainder.
pub fn split_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut sizes: Vec<usize> = fractions[..fractions.len() - 1]
        .iter()
        .map(|f| (n as f64 * f + 1e-9).floor() as usize)
        .collect();
    let used: usize = sizes.iter().sum();
    sizes.push(n.saturating_sub(used));
    sizes
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub offline_train: Vec<Trace>,
    pub offline_val: Vec<Trace>,
    pub offline_test: Vec<Trace>,
    /// One online set per input dataset.
    pub online: Vec<Vec<Trace>>,
}

impl DatasetSplit {
    /// `(name, traces)` pairs using the Set-OFF-*/Set-i-ON naming.
    pub fn named_sets(&self) -> Vec<(String, &[Trace])> {
        let mut sets = vec![
            ("Set-OFF-Train".to_string(), self.offline_train.as_slice()),
            ("Set-OFF-Val".to_string(), self.offline_val.as_slice()),
            ("Set-OFF-Test".to_string(), self.offline_test.as_slice()),
        ];
        for (i, on) in self.online.iter().enumerate() {
            sets.push((format!("Set-{}-ON", i + 1), on.as_slice()));
        }
        sets
    }
}

/// Splits one dataset into offline train/val/test and an online set.
pub fn split(traces: &[Trace], plan: &SplitPlan, seed: u64) -> Result<DatasetSplit> {
    split_datasets(&[traces.to_vec()], plan, seed)
}

/// Splits each dataset independently, then merges the offline parts.
pub fn split_datasets(datasets: &[Vec<Trace>], plan: &SplitPlan, seed: u64) -> Result<DatasetSplit> {
    plan.validate()?;
    let mut out = DatasetSplit::default();
    for (d, traces) in datasets.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(d as u64));
        let mut order: Vec<usize> = (0..traces.len()).collect();
        order.shuffle(&mut rng);

        let top = split_sizes(traces.len(), &[plan.offline_fraction, plan.online_fraction]);
        let sub = split_sizes(top[0], &[plan.train_fraction, plan.val_fraction, plan.test_fraction]);
        let sets = [
            ("offline train", sub[0], plan.train_fraction),
            ("offline val", sub[1], plan.val_fraction),
            ("offline test", sub[2], plan.test_fraction),
            ("online", top[1], plan.online_fraction),
        ];
        for (name, size, fraction) in sets {
            if size == 0 && fraction > 0.0 {
                return Err(AbrError::Config(format!(
                    "dataset {} with {} traces leaves the {name} split empty",
                    d + 1,
                    traces.len()
                )));
            }
        }
        let pick = |range: std::ops::Range<usize>| -> Vec<Trace> {
            order[range].iter().map(|&i| traces[i].clone()).collect()
        };
        let (a, b, c) = (sub[0], sub[0] + sub[1], top[0]);
        out.offline_train.extend(pick(0..a));
        out.offline_val.extend(pick(a..b));
        out.offline_test.extend(pick(b..c));
        out.online.push(pick(c..traces.len()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_trace(id: &str, n: usize) -> Trace {
        Trace::new(
            id,
            (0..n)
                .map(|i| TraceSample::new(0.2 + 0.013 * i as f64, 1.0 / 3.0 + i as f64, (i % 50) as u32, (i % 32) as u32))
                .collect(),
        )
    }

    #[test]
    fn round_trip_200_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut t = sample_trace("user7", 200);
        t.metadata.insert("source".into(), "synthetic lag-1".into());
        save_traces(std::slice::from_ref(&t), &path).unwrap();
        let back = load_traces(&path, 8).unwrap();
        assert_eq!(back, vec![t]);
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        fs::write(&path, "").unwrap();
        assert!(load_traces(&path, 8).unwrap().is_empty());
    }

    #[test]
    fn short_trace_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.csv");
        fs::write(
            &path,
            "chunk_index,app_throughput_mbps,mac_rate_mbps,prb_count,mcs_index\n0,1.5,2.0,10,12\n",
        )
        .unwrap();
        let err = load_traces(&path, 8).unwrap_err();
        assert!(err.to_string().contains("length >= k"), "{err}");
        let ok = load_traces(&path, 1).unwrap();
        assert_eq!(ok[0].id, "one");
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(
            &path,
            "# provenance\nchunk_index,app_throughput_mbps,mac_rate_mbps,prb_count,mcs_index\n0,1.5,2.0,10,12\n1,abc,2.0,10,12\n",
        )
        .unwrap();
        match load_traces(&path, 1) {
            Err(AbrError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_values_rejected() {
        let mut t = sample_trace("x", 10);
        t.samples[3].mcs_index = 32;
        assert!(t.validate(8).is_err());
        let mut t = sample_trace("x", 10);
        t.samples[0].app_throughput_mbps = 0.0;
        assert!(t.validate(8).is_err());
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let traces: Vec<Trace> = (0..100).map(|i| sample_trace(&format!("t{i}"), 10)).collect();
        let s = split(&traces, &SplitPlan::default(), 3).unwrap();
        assert_eq!(
            (s.offline_train.len(), s.offline_val.len(), s.offline_test.len(), s.online[0].len()),
            (40, 13, 14, 33)
        );
        let mut ids: Vec<String> = s
            .named_sets()
            .iter()
            .flat_map(|(_, set)| set.iter().map(|t| t.id.clone()))
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
        assert_eq!(s, split(&traces, &SplitPlan::default(), 3).unwrap());
        assert_ne!(s, split(&traces, &SplitPlan::default(), 4).unwrap());
    }

    #[test]
    fn split_rejects_bad_plans() {
        let traces: Vec<Trace> = (0..10).map(|i| sample_trace(&format!("t{i}"), 10)).collect();
        let mut plan = SplitPlan::default();
        plan.online_fraction = 0.5;
        assert!(matches!(split(&traces, &plan, 0), Err(AbrError::Config(_))));
        assert!(matches!(
            split(&traces[..2], &SplitPlan::default(), 0),
            Err(AbrError::Config(_))
        ));
    }
}
