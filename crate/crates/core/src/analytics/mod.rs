//! Embedding-space evaluation: similarity, effective rank, probing
//! distributions, rank statistics and segmentation probes.

mod probe;
mod stats;

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub use probe::{downsample_labels, probe_head_train, HeadKind, ProbeHead, ProbeOptions, ProbeOutcome, ProbeSample};
pub use stats::{
    bca_bootstrap_ci, bootstrap_distribution, mann_whitney_u, median, midranks, percentile_ci, quantile_sorted,
    wilcoxon_signed_rank, BootstrapCi, TestResult, EXACT_MAX,
};

use crate::error::{Error, Result};
use crate::synthvol::{mirror_data, Chirality, Volume};
use crate::tensor::Tensor;

/// Pearson correlation as the cosine of the mean-centered vectors.
///
/// One constant argument gives 0 (no shared variation); two constant
/// arguments are [`Error::Undefined`].
pub fn pearson_sim(u: &Tensor, v: &Tensor) -> Result<f64> {
    let (u, v) = (u.data(), v.data());
    if u.len() != v.len() || u.len() < 2 {
        return Err(Error::Dimension(format!(
            "similarity needs two vectors of equal length >= 2, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    let n = u.len() as f64;
    let (mu, mv) = (u.iter().sum::<f64>() / n, v.iter().sum::<f64>() / n);
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (a - mu, b - mv);
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    match (uu > 0.0, vv > 0.0) {
        (false, false) => Err(Error::Undefined("similarity of two constant vectors".into())),
        (true, true) => Ok((uv / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0)),
        _ => Ok(0.0),
    }
}

/// What a vector in an [`EmbeddingSet`] was computed from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Original,
    /// Mirrored across the left/right axis.
    Mirrored,
    /// A geometric or intensity augmentation, tagged by name.
    Transformed(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbeddingLabel {
    pub phantom: u64,
    pub chirality: Chirality,
    pub view: View,
}

/// Pooled feature vectors with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    vectors: Vec<Tensor>,
    labels: Vec<EmbeddingLabel>,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<Tensor>, labels: Vec<EmbeddingLabel>) -> Result<Self> {
        if vectors.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} vectors but {} labels",
                vectors.len(),
                labels.len()
            )));
        }
        if let Some(first) = vectors.first() {
            let d = first.numel();
            if d == 0 || vectors.iter().any(|v| v.numel() != d) {
                return Err(Error::Dimension(
                    "embedding vectors must share one non-zero dimension".into(),
                ));
            }
        }
        Ok(EmbeddingSet { vectors, labels })
    }

    pub fn vectors(&self) -> &[Tensor] {
        &self.vectors
    }

    pub fn labels(&self) -> &[EmbeddingLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Tensor::numel)
    }

    fn find(&self, phantom: u64, chirality: Chirality, view: &View) -> Option<usize> {
        self.labels
            .iter()
            .position(|l| l.phantom == phantom && l.chirality == chirality && &l.view == view)
    }
}

/// Eigenvalues of the feature covariance, descending, negatives clipped.
pub fn covariance_spectrum(e: &EmbeddingSet) -> Result<Vec<f64>> {
    if e.len() < 2 {
        return Err(Error::Contract("covariance needs at least two vectors".into()));
    }
    let (n, d) = (e.len(), e.dim());
    let mut x = DMatrix::from_fn(n, d, |i, j| e.vectors[i].data()[j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let cov = x.transpose() * &x / (n - 1) as f64;
    let mut eig: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig)
}

/// `exp` of the Shannon entropy of a normalized non-negative spectrum.
pub fn spectral_effective_rank(spectrum: &[f64]) -> Result<f64> {
    let total: f64 = spectrum.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Undefined("effective rank of a zero spectrum".into()));
    }
    let h: f64 = spectrum
        .iter()
        .filter(|l| **l > 0.0)
        .map(|l| {
            let p = l / total;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

pub fn effective_rank(e: &EmbeddingSet) -> Result<f64> {
    spectral_effective_rank(&covariance_spectrum(e)?)
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "dice of masks with {} and {} voxels",
            pred.len(),
            gt.len()
        )));
    }
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let total = pred.iter().filter(|a| **a).count() + gt.iter().filter(|b| **b).count();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Augmentations for the geometric-invariance probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Mirror {
        axis: usize,
    },
    /// `quarter_turns` × 90° in the axial (axis 1, axis 2) plane.
    RotateAxial {
        quarter_turns: usize,
    },
    /// `v * scale + shift` in normalized intensity units.
    Intensity {
        scale: f64,
        shift: f64,
    },
}

impl Transform {
    pub fn tag(&self) -> String {
        match self {
            Transform::Mirror { axis } => format!("mirror{axis}"),
            Transform::RotateAxial { quarter_turns } => format!("rot{}", 90 * quarter_turns),
            Transform::Intensity { scale, shift } => format!("int{scale:+.3}{shift:+.3}"),
        }
    }

    pub fn apply(&self, v: &Volume) -> Result<Volume> {
        let data = match *self {
            Transform::Mirror { axis } => mirror_data(&v.data, v.size, axis)?,
            Transform::RotateAxial { quarter_turns } => {
                let [d, h, w] = v.size;
                if h != w {
                    return Err(Error::Dimension(format!(
                        "axial rotation needs a square plane, got {h}x{w}"
                    )));
                }
                let mut cur = v.data.clone();
                for _ in 0..quarter_turns % 4 {
                    let mut next = vec![0.0; cur.len()];
                    for z in 0..d {
                        for y in 0..h {
                            for x in 0..w {
                                // (y, x) -> (x, h - 1 - y)
                                next[(z * h + x) * w + (h - 1 - y)] = cur[(z * h + y) * w + x];
                            }
                        }
                    }
                    cur = next;
                }
                cur
            }
            Transform::Intensity { scale, shift } => v.data.iter().map(|x| x * scale + shift).collect(),
        };
        Volume::new(v.size, v.spacing_mm, data)
    }
}

/// Fixed augmentation set: three axis mirrors, three axial rotations and
/// two intensity perturbations at the edges of scale `[0.9, 1.1]`, shift
/// `[-0.1, 0.1]`.
pub fn transform_set() -> Vec<Transform> {
    let mut t: Vec<Transform> = (0..3).map(|axis| Transform::Mirror { axis }).collect();
    t.extend((1..4).map(|quarter_turns| Transform::RotateAxial { quarter_turns }));
    t.push(Transform::Intensity { scale: 0.9, shift: 0.1 });
    t.push(Transform::Intensity {
        scale: 1.1,
        shift: -0.1,
    });
    t
}

pub const GEO_INVARIANCE: &str = "geometric_invariance";
pub const INTER_PATIENT: &str = "inter_patient";
pub const INTRA_PATIENT: &str = "intra_patient";
pub const SYMMETRY: &str = "symmetry";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub n_boot: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            n_boot: 9999,
            level: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub name: String,
    pub samples: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    /// BCa interval for the median; absent below ten samples.
    pub ci: Option<BootstrapCi>,
}

impl ProbeResult {
    pub fn from_samples(name: &str, samples: Vec<f64>, opts: &SuiteOptions) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract(format!("probe `{name}` has no samples")));
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile_sorted(&sorted, 0.25), quantile_sorted(&sorted, 0.75));
        let ci = if samples.len() >= 10 {
            Some(bca_bootstrap_ci(
                &samples,
                &|s| median(s),
                opts.n_boot,
                opts.level,
                opts.seed,
            )?)
        } else {
            None
        };
        Ok(ProbeResult {
            name: name.to_string(),
            median: quantile_sorted(&sorted, 0.5),
            mean: samples.iter().sum::<f64>() / samples.len() as f64,
            q1,
            q3,
            iqr: q3 - q1,
            ci,
            samples,
        })
    }
}

/// The four similarity distributions, in fixed order: geometric
/// invariance, inter-patient, intra-patient, symmetry.
pub fn probe_suite(e: &EmbeddingSet, opts: &SuiteOptions) -> Result<Vec<ProbeResult>> {
    let mut phantoms: Vec<u64> = e.labels.iter().map(|l| l.phantom).collect();
    phantoms.sort_unstable();
    phantoms.dedup();
    let sim = |i: usize, j: usize| pearson_sim(&e.vectors[i], &e.vectors[j]);

    let mut geo = Vec::new();
    for (j, l) in e.labels.iter().enumerate() {
        if let View::Transformed(_) = l.view {
            if let Some(i) = e.find(l.phantom, l.chirality, &View::Original) {
                geo.push(sim(i, j)?);
            }
        }
    }

    let mut inter = Vec::new();
    for chir in [Chirality::Right, Chirality::Left] {
        let idx: Vec<usize> = phantoms
            .iter()
            .filter_map(|p| e.find(*p, chir, &View::Original))
            .collect();
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                inter.push(sim(i, j)?);
            }
        }
    }

    let (mut intra, mut sym) = (Vec::new(), Vec::new());
    for &p in &phantoms {
        if let Some(r) = e.find(p, Chirality::Right, &View::Original) {
            if let Some(l) = e.find(p, Chirality::Left, &View::Mirrored) {
                intra.push(sim(r, l)?);
            }
            if let Some(m) = e.find(p, Chirality::Right, &View::Mirrored) {
                sym.push(sim(r, m)?);
            }
        }
    }

    let classes = [
        (GEO_INVARIANCE, geo, "an original and a transformed view of one phantom"),
        (
            INTER_PATIENT,
            inter,
            "originals of two phantoms with the same chirality",
        ),
        (
            INTRA_PATIENT,
            intra,
            "a right original and the mirrored left of one phantom",
        ),
        (SYMMETRY, sym, "a right original and its mirror"),
    ];
    let mut out = Vec::with_capacity(4);
    for (i, (name, samples, needs)) in classes.into_iter().enumerate() {
        if samples.is_empty() {
            return Err(Error::Contract(format!("missing pairing for `{name}`: needs {needs}")));
        }
        let o = SuiteOptions {
            seed: opts.seed.wrapping_add(i as u64),
            ..*opts
        };
        out.push(ProbeResult::from_samples(name, samples, &o)?);
    }
    Ok(out)
}

/// One row of the embedding summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub label: String,
    pub dim: usize,
    pub effective_rank: f64,
    pub probes: Vec<ProbeResult>,
}

impl EmbeddingReport {
    pub fn build(label: &str, e: &EmbeddingSet, opts: &SuiteOptions) -> Result<Self> {
        Ok(EmbeddingReport {
            label: label.to_string(),
            dim: e.dim(),
            effective_rank: effective_rank(e)?,
            probes: probe_suite(e, opts)?,
        })
    }

    pub fn probe(&self, name: &str) -> Option<&ProbeResult> {
        self.probes.iter().find(|p| p.name == name)
    }
}

/// Aligned table: dimension, effective rank, geometric invariance (median
/// and mean) and intra-patient median with IQR.
pub fn summary_table(reports: &[EmbeddingReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<28} {:>5} {:>7} {:>10} {:>10} {:>16}",
        "model", "dim", "R_eff", "geo_med", "geo_mean", "intra_med (IQR)"
    );
    let cell = |r: &EmbeddingReport, n: &str, f: fn(&ProbeResult) -> f64| r.probe(n).map_or(f64::NAN, f);
    for r in reports {
        let _ = writeln!(
            s,
            "{:<28} {:>5} {:>7.2} {:>10.3} {:>10.3} {:>8.3} ({:.3})",
            r.label,
            r.dim,
            r.effective_rank,
            cell(r, GEO_INVARIANCE, |p| p.median),
            cell(r, GEO_INVARIANCE, |p| p.mean),
            cell(r, INTRA_PATIENT, |p| p.median),
            cell(r, INTRA_PATIENT, |p| p.iqr),
        );
    }
    s
}
