//! Streaming arithmetic mean over a window of checkpoints.
//!
//! The SWA model for epochs `m..=n` is `1/(n-m+1) * sum(w_i)`. Checkpoints are
//! absorbed one at a time with the recurrence `mean += (x - mean) / k` in f64,
//! so only one input checkpoint and the accumulator are alive at once.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor_store::{read_checkpoint, write_checkpoint, Checkpoint, DType, NamedTensor};

/// Glob patterns selecting tensors that are carried from the first
/// checkpoint instead of averaged (step counters and the like).
#[derive(Clone, Debug, Default)]
pub struct SkipPolicy {
    patterns: Vec<glob::Pattern>,
}

impl SkipPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn globs<S: AsRef<str>>(patterns: impl IntoIterator<Item = S>) -> Result<Self> {
        let patterns = patterns
            .into_iter()
            .map(|p| {
                glob::Pattern::new(p.as_ref())
                    .map_err(|e| Error::Config(format!("bad skip pattern {:?}: {e}", p.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { patterns })
    }

    pub fn matches(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| p.matches(name))
    }
}

/// Averaging window over 1-indexed epochs `m..=n`, one path per epoch.
#[derive(Clone, Debug)]
pub struct AveragingWindow {
    pub m: u32,
    pub n: u32,
    pub paths: Vec<PathBuf>,
}

impl AveragingWindow {
    pub fn new(m: u32, n: u32, paths: Vec<PathBuf>) -> Result<Self> {
        if m < 1 || m > n {
            return Err(Error::Config(format!("averaging window [{m}, {n}] is empty")));
        }
        if paths.len() as u64 != u64::from(n - m) + 1 {
            return Err(Error::Config(format!(
                "window [{m}, {n}] needs {} checkpoints, got {}",
                n - m + 1,
                paths.len()
            )));
        }
        Ok(Self { m, n, paths })
    }

    /// Window `1..=paths.len()`.
    pub fn from_paths(paths: Vec<PathBuf>) -> Result<Self> {
        let n = u32::try_from(paths.len()).map_err(|_| Error::Config("too many checkpoints".into()))?;
        Self::new(1, n.max(1), paths)
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.m, self.n)
    }
}

#[derive(Clone, Debug)]
struct Slot {
    shape: Vec<usize>,
    dtype: DType,
    mean: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunningAverage {
    count: u64,
    averaged: BTreeMap<String, Slot>,
    skipped: BTreeMap<String, NamedTensor>,
    window: Option<(u32, u32)>,
}

impl RunningAverage {
    /// Starts an average from `first`; tensors matching `skip` are kept verbatim.
    pub fn init(first: &Checkpoint, skip: &SkipPolicy) -> Self {
        let mut averaged = BTreeMap::new();
        let mut skipped = BTreeMap::new();
        for t in first.tensors() {
            if skip.matches(t.name()) {
                skipped.insert(t.name().to_string(), t.clone());
            } else {
                averaged.insert(
                    t.name().to_string(),
                    Slot {
                        shape: t.shape().to_vec(),
                        dtype: t.dtype(),
                        mean: t.to_f64_vec(),
                    },
                );
            }
        }
        Self {
            count: 1,
            averaged,
            skipped,
            window: None,
        }
    }

    /// Records the epoch window this average covers in the finalized metadata.
    pub fn with_window(mut self, m: u32, n: u32) -> Self {
        self.window = Some((m, n));
        self
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn skipped_names(&self) -> impl Iterator<Item = &str> {
        self.skipped.keys().map(String::as_str)
    }

    /// Absorbs one more checkpoint. On error the accumulator is unchanged.
    pub fn update(&mut self, next: &Checkpoint) -> Result<()> {
        self.check_compatible(next)?;
        self.count += 1;
        let k = self.count as f64;
        for (name, slot) in &mut self.averaged {
            let x = next.get(name).expect("checked above").to_f64_vec();
            for (m, x) in slot.mean.iter_mut().zip(x) {
                *m += (x - *m) / k;
            }
        }
        Ok(())
    }

    fn check_compatible(&self, next: &Checkpoint) -> Result<()> {
        let expected = self.averaged.len() + self.skipped.len();
        for (name, slot) in &self.averaged {
            match next.get(name) {
                Some(t) if t.shape() == slot.shape.as_slice() && t.dtype() == slot.dtype => {}
                _ => return Err(Error::Incompatible { names: vec![name.clone()] }),
            }
        }
        for (name, first) in &self.skipped {
            match next.get(name) {
                Some(t) if t.is_compatible(first) => {}
                _ => return Err(Error::Incompatible { names: vec![name.clone()] }),
            }
        }
        if next.len() != expected {
            let extra = next
                .names()
                .find(|n| !self.averaged.contains_key(*n) && !self.skipped.contains_key(*n))
                .unwrap_or_default();
            return Err(Error::Incompatible { names: vec![extra.to_string()] });
        }
        Ok(())
    }

    /// Narrows the averaged tensors to `out_dtype`; skipped tensors keep
    /// their original dtype. Metadata records `count` and `window`.
    pub fn finalize(&self, out_dtype: DType) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (name, slot) in &self.averaged {
            let t = NamedTensor::new(
                name.clone(),
                slot.shape.clone(),
                crate::tensor_store::TensorData::from_f64(slot.mean.clone(), out_dtype),
            )
            .expect("shape preserved from a valid tensor");
            ckpt.insert(t).expect("unique names");
        }
        for t in self.skipped.values() {
            ckpt.insert(t.clone()).expect("unique names");
        }
        let (m, n) = self.window.unwrap_or((1, self.count as u32));
        ckpt.set_metadata("count", self.count.to_string());
        ckpt.set_metadata("window", format!("{m}-{n}"));
        if !self.skipped.is_empty() {
            let names: Vec<&str> = self.skipped_names().collect();
            ckpt.set_metadata("skipped", names.join(","));
        }
        ckpt
    }
}

/// Mean of in-memory checkpoints, in order.
pub fn average_checkpoints(ckpts: &[Checkpoint], skip: &SkipPolicy, out_dtype: DType) -> Result<Checkpoint> {
    let (first, rest) = ckpts
        .split_first()
        .ok_or_else(|| Error::Config("nothing to average".into()))?;
    let mut acc = RunningAverage::init(first, skip);
    for c in rest {
        acc.update(c)?;
    }
    Ok(acc.finalize(out_dtype))
}

/// Streams the window's checkpoints through a [`RunningAverage`] and writes
/// the result to `out_path`.
pub fn average_window(
    window: &AveragingWindow,
    skip: &SkipPolicy,
    out_dtype: DType,
    out_path: &Path,
) -> Result<PathBuf> {
    let ckpt = average_window_in_memory(window, skip, out_dtype)?;
    write_checkpoint(&ckpt, out_path)?;
    Ok(out_path.to_path_buf())
}

pub(crate) fn average_window_in_memory(
    window: &AveragingWindow,
    skip: &SkipPolicy,
    out_dtype: DType,
) -> Result<Checkpoint> {
    let mut paths = window.paths.iter();
    let first_path = paths.next().expect("window is non-empty");
    let first = read_checkpoint(first_path)?;
    let mut acc = RunningAverage::init(&first, skip).with_window(window.m, window.n);
    drop(first);
    for path in paths {
        let next = read_checkpoint(path)?;
        acc.update(&next)
            .map_err(|e| e.context(path.display().to_string()))?;
    }
    Ok(acc.finalize(out_dtype))
}
