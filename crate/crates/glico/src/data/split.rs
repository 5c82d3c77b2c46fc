//! Reproducible stratified small-sample splits.
//!
//! A split is `spc` uniformly sampled training indices per class, without
//! replacement, deterministic in `(dataset_id, spc, seed)`. The manifest
//! file is plain text with an embedded checksum so published splits are
//! human-diffable and tamper-evident.

use super::Dataset;
use crate::archive::hex;
use crate::error::{Error, Result};
use crate::rng::Stream;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

const FORMAT_LINE: &str = "glico-split v1";

/// A stratified subsample manifest over a dataset's training half.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmallSampleSplit {
    pub dataset_id: String,
    pub spc: usize,
    pub seed: u64,
    /// Sorted per class, classes ascending.
    pub train_indices: Vec<usize>,
    pub classes: usize,
}

/// Draws `spc` indices per class from the dataset's training half.
pub fn make_split(dataset: &Dataset, spc: usize, seed: u64) -> Result<SmallSampleSplit> {
    if spc == 0 {
        return Err(Error::InvalidArgument("spc must be positive".into()));
    }
    let by_class = dataset.class_index();
    let mut rng = Stream::new(seed, "split");
    let mut indices = Vec::with_capacity(spc * by_class.len());
    for (class, members) in &by_class {
        if members.len() < spc {
            return Err(Error::Capacity(format!(
                "class {class} has {} examples, fewer than spc = {spc}",
                members.len()
            )));
        }
        // Partial Fisher-Yates: the first `spc` entries are a uniform
        // sample without replacement.
        let mut pool = members.clone();
        for k in 0..spc {
            let j = k + rng.next_index(pool.len() - k);
            pool.swap(k, j);
        }
        let mut chosen: Vec<usize> = pool[..spc].to_vec();
        chosen.sort_unstable();
        indices.extend(chosen);
    }
    Ok(SmallSampleSplit {
        dataset_id: dataset.id.clone(),
        spc,
        seed,
        train_indices: indices,
        classes: by_class.len(),
    })
}

impl SmallSampleSplit {
    pub fn len(&self) -> usize {
        self.train_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_indices.is_empty()
    }

    /// Class histogram of the split under the dataset's labels.
    pub fn histogram(&self, dataset: &Dataset) -> Result<BTreeMap<usize, usize>> {
        self.check_binding(dataset)?;
        let mut hist = BTreeMap::new();
        for &i in &self.train_indices {
            let label = *dataset
                .train_labels
                .get(i)
                .ok_or_else(|| Error::Binding(format!("split index {i} outside dataset")))?;
            *hist.entry(label).or_insert(0) += 1;
        }
        Ok(hist)
    }

    /// Errors unless the split was made for this dataset.
    pub fn check_binding(&self, dataset: &Dataset) -> Result<()> {
        if self.dataset_id != dataset.id {
            return Err(Error::Binding(format!(
                "split was made for '{}' but the manifest is '{}'",
                self.dataset_id, dataset.id
            )));
        }
        if let Some(&bad) = self
            .train_indices
            .iter()
            .find(|&&i| i >= dataset.train_labels.len())
        {
            return Err(Error::Binding(format!(
                "split index {bad} outside the dataset's {} training examples",
                dataset.train_labels.len()
            )));
        }
        Ok(())
    }

    fn canonical_lines(&self) -> Vec<String> {
        let mut lines = vec![
            FORMAT_LINE.to_string(),
            format!("dataset_id: {}", self.dataset_id),
            format!("spc: {}", self.spc),
            format!("seed: {}", self.seed),
            format!("classes: {}", self.classes),
            format!("count: {}", self.train_indices.len()),
        ];
        for chunk in self.train_indices.chunks(self.spc.max(1)) {
            let items: Vec<String> = chunk.iter().map(|i| i.to_string()).collect();
            lines.push(format!("indices: {}", items.join(" ")));
        }
        lines
    }

    fn checksum_of(lines: &[String]) -> String {
        let joined = lines.join("\n");
        hex(&Sha256::digest(joined.as_bytes()))
    }

    /// Content hash of the split (over its canonical text form).
    pub fn checksum(&self) -> String {
        Self::checksum_of(&self.canonical_lines())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let lines = self.canonical_lines();
        let checksum = Self::checksum_of(&lines);
        let mut text = lines.join("\n");
        text.push_str(&format!("\nchecksum: {checksum}\n"));
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.is_empty() || lines[0] != FORMAT_LINE {
            return Err(Error::Integrity(format!(
                "unsupported split format: {}",
                lines.first().unwrap_or(&"<empty>")
            )));
        }
        let field = |idx: usize, name: &str| -> Result<String> {
            let prefix = format!("{name}: ");
            lines
                .get(idx)
                .and_then(|l| l.strip_prefix(&prefix))
                .map(|s| s.to_string())
                .ok_or_else(|| Error::Integrity(format!("split line {idx} is not '{name}'")))
        };
        let dataset_id = field(1, "dataset_id")?;
        let spc: usize = field(2, "spc")?
            .parse()
            .map_err(|_| Error::Integrity("bad spc".into()))?;
        let seed: u64 = field(3, "seed")?
            .parse()
            .map_err(|_| Error::Integrity("bad seed".into()))?;
        let classes: usize = field(4, "classes")?
            .parse()
            .map_err(|_| Error::Integrity("bad classes".into()))?;
        let count: usize = field(5, "count")?
            .parse()
            .map_err(|_| Error::Integrity("bad count".into()))?;

        let mut train_indices = Vec::with_capacity(count);
        let mut checksum_line = None;
        for line in &lines[6..] {
            if let Some(rest) = line.strip_prefix("indices: ") {
                for tok in rest.split_whitespace() {
                    train_indices.push(
                        tok.parse::<usize>()
                            .map_err(|_| Error::Integrity(format!("bad index '{tok}'")))?,
                    );
                }
            } else if let Some(rest) = line.strip_prefix("checksum: ") {
                checksum_line = Some(rest.to_string());
            } else if !line.trim().is_empty() {
                return Err(Error::Integrity(format!("unexpected split line '{line}'")));
            }
        }
        let split = SmallSampleSplit { dataset_id, spc, seed, train_indices, classes };
        let expect = checksum_line
            .ok_or_else(|| Error::Integrity("split file has no checksum".into()))?;
        if split.checksum() != expect {
            return Err(Error::Integrity("split checksum mismatch".into()));
        }
        if split.train_indices.len() != count {
            return Err(Error::Integrity(format!(
                "split lists {} indices but says count {count}",
                split.train_indices.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &i in &split.train_indices {
            if !seen.insert(i) {
                return Err(Error::InvalidArgument(format!(
                    "split repeats index {i}"
                )));
            }
        }
        Ok(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;

    fn toy() -> Dataset {
        synthetic::gratings("toy", 5, 8, 2, 8, 3)
    }

    #[test]
    fn split_is_deterministic_and_stratified() {
        let ds = toy();
        let a = make_split(&ds, 3, 1).unwrap();
        let b = make_split(&ds, 3, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        let hist = a.histogram(&ds).unwrap();
        assert_eq!(hist.len(), 5);
        assert!(hist.values().all(|&c| c == 3));
        // Different seeds give different draws.
        let c = make_split(&ds, 3, 2).unwrap();
        assert_ne!(a.train_indices, c.train_indices);
    }

    #[test]
    fn full_class_spc_selects_everything() {
        let ds = toy();
        let split = make_split(&ds, 8, 4).unwrap();
        assert_eq!(split.len(), 40);
        let mut got = split.train_indices.clone();
        got.sort_unstable();
        let want: Vec<usize> = (0..40).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn oversized_spc_is_a_capacity_error() {
        let ds = toy();
        assert!(matches!(make_split(&ds, 9, 1), Err(Error::Capacity(_))));
    }

    #[test]
    fn split_roundtrips_through_text() {
        let ds = toy();
        let split = make_split(&ds, 2, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.txt");
        split.save(&path).unwrap();
        let back = SmallSampleSplit::load(&path).unwrap();
        assert_eq!(back, split);
        assert_eq!(back.checksum(), split.checksum());
    }

    #[test]
    fn edited_indices_fail_the_checksum() {
        let ds = toy();
        let split = make_split(&ds, 2, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.txt");
        split.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replacen("indices: ", "indices: 0 ", 1);
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(SmallSampleSplit::load(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn duplicate_index_fails_validation() {
        let ds = toy();
        let mut split = make_split(&ds, 2, 7).unwrap();
        split.train_indices[1] = split.train_indices[0];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.txt");
        split.save(&path).unwrap();
        assert!(matches!(
            SmallSampleSplit::load(&path),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn wrong_dataset_is_a_binding_error() {
        let ds = toy();
        let other = synthetic::gratings("other", 5, 8, 2, 8, 3);
        let split = make_split(&ds, 2, 7).unwrap();
        assert!(matches!(split.check_binding(&other), Err(Error::Binding(_))));
        assert!(split.check_binding(&ds).is_ok());
    }

    #[test]
    fn version_mismatch_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.txt");
        std::fs::write(&path, "glico-split v9\n").unwrap();
        assert!(matches!(SmallSampleSplit::load(&path), Err(Error::Integrity(_))));
    }
}
