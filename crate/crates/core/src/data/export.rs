//! Dataset export as one binary file per window plus a plain-text manifest.
//!
//! `manifest.txt` holds one line per sample: `file client split label`,
//! where `split` is `labeled`, `unlabeled` or `test` and the label of
//! unlabeled samples is written as `?`. Window files use the snapshot
//! layout with a single entry named `window`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{ClientSplit, Dataset, SignalSample};
use crate::error::{Error, Result};
use crate::snapshot::Snapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Labeled,
    Unlabeled,
    Test,
}

impl SplitKind {
    fn as_str(self) -> &'static str {
        match self {
            SplitKind::Labeled => "labeled",
            SplitKind::Unlabeled => "unlabeled",
            SplitKind::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "labeled" => Some(SplitKind::Labeled),
            "unlabeled" => Some(SplitKind::Unlabeled),
            "test" => Some(SplitKind::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub client: usize,
    pub split: SplitKind,
    pub label: Option<usize>,
}

pub fn export_dataset(dir: &Path, data: &Dataset, splits: &[ClientSplit]) -> Result<Vec<ManifestEntry>> {
    let windows = dir.join("windows");
    fs::create_dir_all(&windows).map_err(|e| Error::io(&windows, e))?;
    let mut entries = Vec::new();
    let mut manifest = String::new();
    for (k, s) in splits.iter().enumerate() {
        let groups = [
            (SplitKind::Labeled, &s.labeled),
            (SplitKind::Unlabeled, &s.unlabeled),
            (SplitKind::Test, &s.test),
        ];
        for (kind, idx) in groups {
            for &i in idx.iter() {
                let file = format!("windows/{i:06}.bin");
                Snapshot::new(vec![("window".into(), data.window(i).clone())]).write(&dir.join(&file))?;
                let label = (kind != SplitKind::Unlabeled).then(|| data.label(i));
                let shown = label.map_or_else(|| "?".to_string(), |l| l.to_string());
                writeln!(manifest, "{file} {k} {} {shown}", kind.as_str()).unwrap();
                entries.push(ManifestEntry {
                    file,
                    client: k,
                    split: kind,
                    label,
                });
            }
        }
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

/// Reads a directory written by [`export_dataset`]. Unlabeled samples come
/// back with `label: None`; `num_classes` is one past the largest label seen.
pub fn import_dataset(dir: &Path) -> Result<(Dataset, Vec<ClientSplit>)> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut samples = Vec::new();
    let mut splits: Vec<ClientSplit> = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Format(format!("manifest line {}: `{line}`", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        let [file, client, split, label] = f[..] else { return Err(bad()) };
        let client: usize = client.parse().map_err(|_| bad())?;
        let split = SplitKind::parse(split).ok_or_else(bad)?;
        let label = match label {
            "?" => None,
            l => Some(l.parse().map_err(|_| bad())?),
        };
        let snap = Snapshot::read(&dir.join(file))?;
        let window = snap.get("window").cloned().ok_or_else(bad)?;
        if splits.len() <= client {
            splits.resize_with(client + 1, ClientSplit::default);
        }
        let idx = samples.len();
        match split {
            SplitKind::Labeled => splits[client].labeled.push(idx),
            SplitKind::Unlabeled => splits[client].unlabeled.push(idx),
            SplitKind::Test => splits[client].test.push(idx),
        }
        samples.push(SignalSample { window, label });
    }
    let num_classes = samples.iter().filter_map(|s| s.label).max().map_or(0, |m| m + 1);
    Ok((Dataset { samples, num_classes }, splits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, partition_and_split, SyntheticSpec};

    #[test]
    fn export_import_preserves_windows_and_hides_unlabeled() {
        let spec = SyntheticSpec {
            classes: SyntheticSpec::harmonic_families(3, 10.0, 4.0),
            noise_std: 0.2,
            freq_jitter: 0.0,
            samples_per_class: 20,
            length: 32,
            channels: 2,
        };
        let data = generate_dataset(&spec, 3).unwrap();
        let splits = partition_and_split(&data.labels(), 2, 0.5, 0.2, 10, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let entries = export_dataset(dir.path(), &data, &splits).unwrap();
        assert_eq!(entries.len(), 60);
        let (back, back_splits) = import_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 60);
        for (k, s) in splits.iter().enumerate() {
            let b = &back_splits[k];
            assert_eq!((b.labeled.len(), b.unlabeled.len(), b.test.len()), (s.labeled.len(), s.unlabeled.len(), s.test.len()));
            for (&orig, &new) in s.labeled.iter().zip(&b.labeled) {
                assert_eq!(data.window(orig), back.window(new));
                assert_eq!(Some(data.label(orig)), back.samples[new].label);
            }
            assert!(b.unlabeled.iter().all(|&i| back.samples[i].label.is_none()));
        }
        let text = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(text.lines().any(|l| l.ends_with(" unlabeled ?")));
    }
}
