//! Loss-landscape probes: loss along the segment between two checkpoints,
//! and mean loss increase under fixed-radius random perturbations.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fsutil::fmt_g17;
use crate::swa_average::SkipPolicy;
use crate::tensor_store::{Checkpoint, NamedTensor};

/// Anything that scores a checkpoint with a scalar loss.
pub trait LossOracle {
    fn loss(&self, ckpt: &Checkpoint) -> Result<f64>;
}

impl<F> LossOracle for F
where
    F: Fn(&Checkpoint) -> Result<f64>,
{
    fn loss(&self, ckpt: &Checkpoint) -> Result<f64> {
        self(ckpt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Interpolation,
    Sharpness,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeSummary {
    /// Interpolation: losses at the first and last α. Sharpness: mean loss
    /// over the `-` and the `+` perturbations.
    pub loss_at_ends: [f64; 2],
    /// Interpolation: loss at the α nearest 0.5. Sharpness: unperturbed loss.
    pub loss_at_mid: f64,
    /// Interpolation: mean excess over the straight chord between the end
    /// losses. Sharpness: mean increase over the unperturbed loss.
    pub mean_loss_increase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub kind: ProbeKind,
    /// α values, or signed direction indices `-n..=-1, 1..=n` for sharpness.
    pub grid: Vec<f64>,
    pub losses: Vec<f64>,
    pub summary: ProbeSummary,
}

impl ProbeResult {
    /// CSV with header `coord,loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("coord,loss\n");
        for (c, l) in self.grid.iter().zip(&self.losses) {
            let _ = writeln!(out, "{},{}", fmt_g17(*c), fmt_g17(*l));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Block<'a> {
            kind: ProbeKind,
            points: usize,
            #[serde(flatten)]
            summary: &'a ProbeSummary,
        }
        serde_json::to_string_pretty(&Block { kind: self.kind, points: self.grid.len(), summary: &self.summary })
            .expect("summary serializes")
    }
}

/// Tensors that are interpolated or perturbed, in lexicographic order.
fn eligible<'a>(ckpt: &'a Checkpoint, skip: &'a SkipPolicy) -> impl Iterator<Item = &'a NamedTensor> {
    ckpt.tensors().filter(move |t| !skip.matches(t.name()))
}

/// `(1 - alpha) * a + alpha * b` on eligible tensors; skipped tensors and
/// metadata come from `a`. Results keep `a`'s dtypes.
pub fn interpolate(a: &Checkpoint, b: &Checkpoint, alpha: f64, skip: &SkipPolicy) -> Result<Checkpoint> {
    a.ensure_compatible(b)?;
    let mut out = Checkpoint::new();
    for ta in a.tensors() {
        if skip.matches(ta.name()) {
            out.insert(ta.clone())?;
            continue;
        }
        let tb = b.get(ta.name()).expect("compatible");
        let values = ta
            .to_f64_vec()
            .into_iter()
            .zip(tb.to_f64_vec())
            .map(|(x, y)| (1.0 - alpha) * x + alpha * y)
            .collect();
        out.insert(ta.with_values(values, ta.dtype())?)?;
    }
    for (k, v) in a.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    Ok(out)
}

/// Loss at `(1 - α) w_a + α w_b` for each α. `alphas` must be non-empty,
/// strictly increasing, and within `[0, 1]`.
pub fn interpolate_loss(
    w_a: &Checkpoint,
    w_b: &Checkpoint,
    alphas: &[f64],
    oracle: &impl LossOracle,
    skip: &SkipPolicy,
) -> Result<ProbeResult> {
    if alphas.is_empty() {
        return Err(Error::Config("need at least one α".into()));
    }
    if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) || alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("α values must be strictly increasing within [0, 1]".into()));
    }
    w_a.ensure_compatible(w_b)?;
    let losses = alphas
        .iter()
        .map(|&alpha| oracle.loss(&interpolate(w_a, w_b, alpha, skip)?))
        .collect::<Result<Vec<f64>>>()?;

    let (first, last) = (losses[0], losses[losses.len() - 1]);
    let (a0, a1) = (alphas[0], alphas[alphas.len() - 1]);
    let mid_idx = (0..alphas.len())
        .min_by(|&i, &j| (alphas[i] - 0.5).abs().total_cmp(&(alphas[j] - 0.5).abs()))
        .expect("non-empty");
    let excess: f64 = alphas
        .iter()
        .zip(&losses)
        .map(|(&alpha, &loss)| {
            let t = if a1 > a0 { (alpha - a0) / (a1 - a0) } else { 0.0 };
            loss - ((1.0 - t) * first + t * last)
        })
        .sum();
    Ok(ProbeResult {
        kind: ProbeKind::Interpolation,
        grid: alphas.to_vec(),
        summary: ProbeSummary {
            loss_at_ends: [first, last],
            loss_at_mid: losses[mid_idx],
            mean_loss_increase: excess / alphas.len() as f64,
        },
        losses,
    })
}

/// Unit-norm direction over the concatenated eligible tensors of `w`,
/// drawn from an isotropic Gaussian on stream `index` of `seed`.
pub fn random_direction(w: &Checkpoint, skip: &SkipPolicy, seed: u64, index: u64) -> Vec<f64> {
    let dim: usize = eligible(w, skip).map(NamedTensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut d: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        d.iter_mut().for_each(|v| *v /= norm);
    }
    d
}

/// `w + scale * direction` on eligible tensors.
pub fn perturb(w: &Checkpoint, direction: &[f64], scale: f64, skip: &SkipPolicy) -> Result<Checkpoint> {
    let mut out = Checkpoint::new();
    let mut offset = 0;
    for t in w.tensors() {
        if skip.matches(t.name()) {
            out.insert(t.clone())?;
            continue;
        }
        let n = t.numel();
        let d = &direction[offset..offset + n];
        offset += n;
        let values = t.to_f64_vec().iter().zip(d).map(|(x, dx)| x + scale * dx).collect();
        out.insert(t.with_values(values, t.dtype())?)?;
    }
    if offset != direction.len() {
        return Err(Error::Config(format!(
            "direction has {} entries, checkpoint has {offset} eligible elements",
            direction.len()
        )));
    }
    for (k, v) in w.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    Ok(out)
}

/// Mean loss increase at `w ± radius * d` over `n_dirs` random unit
/// directions. Both signs of every direction are evaluated and recorded.
pub fn perturbation_sharpness(
    w: &Checkpoint,
    radius: f64,
    n_dirs: usize,
    oracle: &impl LossOracle,
    seed: u64,
    skip: &SkipPolicy,
) -> Result<ProbeResult> {
    if n_dirs == 0 {
        return Err(Error::Config("need at least one direction".into()));
    }
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!("radius {radius} must be finite and non-negative")));
    }
    let base = oracle.loss(w)?;
    let mut minus = vec![0.0; n_dirs];
    let mut plus = vec![0.0; n_dirs];
    for k in 0..n_dirs {
        let d = random_direction(w, skip, seed, k as u64);
        minus[k] = oracle.loss(&perturb(w, &d, -radius, skip)?)?;
        plus[k] = oracle.loss(&perturb(w, &d, radius, skip)?)?;
    }
    let n = n_dirs as f64;
    let increase = minus.iter().chain(&plus).map(|l| l - base).sum::<f64>() / (2.0 * n);
    let summary = ProbeSummary {
        loss_at_ends: [minus.iter().sum::<f64>() / n, plus.iter().sum::<f64>() / n],
        loss_at_mid: base,
        mean_loss_increase: increase,
    };
    // grid: -n, ..., -1, 1, ..., n (coordinate -k is direction k, minus sign)
    let grid = (1..=n_dirs)
        .rev()
        .map(|k| -(k as f64))
        .chain((1..=n_dirs).map(|k| k as f64))
        .collect();
    let losses = minus.iter().rev().chain(&plus).copied().collect();
    Ok(ProbeResult { kind: ProbeKind::Sharpness, grid, losses, summary })
}
