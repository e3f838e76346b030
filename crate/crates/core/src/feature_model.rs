//! Gaussian generative model of counterfactually augmented data (CAD).
//!
//! A feature vector is the concatenation `[h_r1, h_r2, h_s]` of three blocks:
//! causal features that annotators edit (`r1`), causal features left untouched
//! (`r2`), and spurious features (`s`). Given the signed label `y ∈ {−1, +1}`
//! each block is drawn as `h_b = y·μ_b + L_b·ε` with `L_b Lᵀ_b = Σ_b`.
//! A counterfactual flips the label and rewrites `r1` only; `r2` and `s` are
//! copied bit-for-bit from the original.
//!
//! Class ids are stored as `0`, `1` (and `2` for the neutral class). The
//! signed view used by the regression analysis maps `0 → −1`, `1 → +1`;
//! neutral samples draw every block with zero mean.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, is_symmetric, Matrix};
use crate::rng::{self, SplitMix64};

/// Class id of the neutral class in three-class tasks.
pub const NEUTRAL: usize = 2;

const STREAM_LABELS: u64 = 0x4C41_4245;
const STREAM_PAIR: u64 = 0x5041_4952;
const STREAM_OOD: u64 = 0x4F4F_4400;
const STREAM_SPLIT: u64 = 0x5350_4C54;

/// `0 → −1`, `1 → +1`, neutral → `0`.
pub fn signed_label(label: usize) -> f64 {
    match label {
        0 => -1.0,
        1 => 1.0,
        _ => 0.0,
    }
}

/// Opposite binary class; `None` for the neutral class.
pub fn flip_label(label: usize) -> Option<usize> {
    match label {
        0 => Some(1),
        1 => Some(0),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockLayout {
    pub dim_r1: usize,
    pub dim_r2: usize,
    pub dim_s: usize,
}

impl BlockLayout {
    pub fn new(dim_r1: usize, dim_r2: usize, dim_s: usize) -> Result<Self> {
        let layout = Self {
            dim_r1,
            dim_r2,
            dim_s,
        };
        layout.check()?;
        Ok(layout)
    }

    /// A single edited pseudo-block, used for featurized text.
    pub fn single(dim: usize) -> Result<Self> {
        Self::new(dim, 0, 0)
    }

    pub fn check(&self) -> Result<()> {
        if self.dim_r1 == 0 {
            return Err(Error::arg("layout", "dim_r1 must be at least 1"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.dim_r1 + self.dim_r2 + self.dim_s
    }

    pub fn r1(&self) -> Range<usize> {
        0..self.dim_r1
    }

    pub fn r2(&self) -> Range<usize> {
        self.dim_r1..self.dim_r1 + self.dim_r2
    }

    pub fn s(&self) -> Range<usize> {
        self.dim_r1 + self.dim_r2..self.total()
    }

    /// Ranges in storage order `r1, r2, s`.
    pub fn blocks(&self) -> [Range<usize>; 3] {
        [self.r1(), self.r2(), self.s()]
    }

    /// Everything outside `r1`.
    pub fn unedited(&self) -> Range<usize> {
        self.dim_r1..self.total()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureModelSpec {
    pub layout: BlockLayout,
    pub mu_r1: Vec<f64>,
    pub mu_r2: Vec<f64>,
    pub mu_s: Vec<f64>,
    pub sigma_r1: Matrix,
    pub sigma_r2: Matrix,
    pub sigma_s: Matrix,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_label_prior")]
    pub label_prior: f64,
}

fn default_classes() -> usize {
    2
}

fn default_label_prior() -> f64 {
    0.5
}

impl FeatureModelSpec {
    /// Binary spec with `Σ_b = σ_b² I`.
    pub fn isotropic(
        layout: BlockLayout,
        mu_r1: Vec<f64>,
        mu_r2: Vec<f64>,
        mu_s: Vec<f64>,
        variances: [f64; 3],
    ) -> Self {
        let cov = |d: usize, v: f64| Matrix::diagonal(&vec![v; d]);
        Self {
            layout,
            sigma_r1: cov(layout.dim_r1, variances[0]),
            sigma_r2: cov(layout.dim_r2, variances[1]),
            sigma_s: cov(layout.dim_s, variances[2]),
            mu_r1,
            mu_r2,
            mu_s,
            classes: 2,
            label_prior: 0.5,
        }
    }

    /// Dims (2,2,2), `μ_r1 = [1, 0.5]`, `μ_r2 = [1, 0]`, `μ_s = [0.8, 0]`,
    /// `Σ_b = I`: the reference benchmark used throughout the test suite.
    pub fn canonical() -> Self {
        Self::isotropic(
            BlockLayout {
                dim_r1: 2,
                dim_r2: 2,
                dim_s: 2,
            },
            vec![1.0, 0.5],
            vec![1.0, 0.0],
            vec![0.8, 0.0],
            [1.0; 3],
        )
    }

    pub fn mean(&self, block: usize) -> &[f64] {
        match block {
            0 => &self.mu_r1,
            1 => &self.mu_r2,
            _ => &self.mu_s,
        }
    }

    pub fn covariance(&self, block: usize) -> &Matrix {
        match block {
            0 => &self.sigma_r1,
            1 => &self.sigma_r2,
            _ => &self.sigma_s,
        }
    }

    /// Every violated invariant, by name. Empty means the spec is valid.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.layout.dim_r1 == 0 {
            out.push("layout: dim_r1 must be at least 1".to_string());
        }
        const NAMES: [&str; 3] = ["r1", "r2", "s"];
        let dims = [self.layout.dim_r1, self.layout.dim_r2, self.layout.dim_s];
        for b in 0..3 {
            let (name, dim) = (NAMES[b], dims[b]);
            if self.mean(b).len() != dim {
                out.push(format!(
                    "mean/layout mismatch: mu_{name} has length {}, layout expects {dim}",
                    self.mean(b).len()
                ));
            }
            let sigma = self.covariance(b);
            if sigma.shape() != (dim, dim) {
                out.push(format!(
                    "covariance/layout mismatch: sigma_{name} is {}x{}, layout expects {dim}x{dim}",
                    sigma.rows(),
                    sigma.cols()
                ));
                continue;
            }
            if !is_symmetric(sigma, 1e-12) {
                out.push(format!("sigma_{name} not symmetric"));
            } else if cholesky(sigma).is_none() {
                out.push(format!("sigma_{name} not positive definite"));
            }
            if self.mean(b).iter().any(|v| !v.is_finite()) {
                out.push(format!("mu_{name} has non-finite entries"));
            }
        }
        if !(self.classes == 2 || self.classes == 3) {
            out.push(format!("classes must be 2 or 3, got {}", self.classes));
        }
        if !(self.label_prior > 0.0 && self.label_prior < 1.0) {
            out.push(format!("label_prior must lie in (0,1), got {}", self.label_prior));
        }
        out
    }

    /// Short content hash of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// `Ok(())` iff every [`FeatureModelSpec`] invariant holds.
pub fn validate_spec(spec: &FeatureModelSpec) -> Result<()> {
    let diagnostics = spec.diagnostics();
    if diagnostics.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidSpec(diagnostics))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Original,
    Counterfactual,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Original => "original",
            Role::Counterfactual => "counterfactual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "original" => Some(Role::Original),
            "counterfactual" => Some(Role::Counterfactual),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    /// `h_r1 → −h_r1`.
    ExactOpposite,
    /// Fresh `r1` draw from the counterfactual label's class distribution.
    Resample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodShift {
    /// Spurious block anti-correlated with the label: `h_s ~ N(−yμ_s, Σ_s)`.
    SpuriousFlip,
    /// Spurious block uninformative: `h_s ~ N(0, Σ_s)`.
    SpuriousNull,
    /// Edited block uninformative: `h_r1 ~ N(0, Σ_r1)`.
    EditedNull,
}

impl OodShift {
    pub const ALL: [OodShift; 3] = [
        OodShift::SpuriousFlip,
        OodShift::SpuriousNull,
        OodShift::EditedNull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OodShift::SpuriousFlip => "spurious_flip",
            OodShift::SpuriousNull => "spurious_null",
            OodShift::EditedNull => "edited_null",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    pub role: Role,
    pub pair_id: u64,
    pub source_label: usize,
}

/// Validated spec with cached Cholesky factors.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    spec: &'a FeatureModelSpec,
    factors: [Matrix; 3],
}

impl<'a> Sampler<'a> {
    pub fn new(spec: &'a FeatureModelSpec) -> Result<Self> {
        validate_spec(spec)?;
        let factor = |b: usize| cholesky(spec.covariance(b)).expect("validated");
        Ok(Self {
            spec,
            factors: [factor(0), factor(1), factor(2)],
        })
    }

    pub fn spec(&self) -> &FeatureModelSpec {
        self.spec
    }

    fn draw_block(&self, block: usize, mean_sign: f64, rng: &mut SplitMix64, out: &mut [f64]) {
        let l = &self.factors[block];
        let mu = self.spec.mean(block);
        let eps: Vec<f64> = (0..out.len()).map(|_| rng.standard_normal()).collect();
        for (i, o) in out.iter_mut().enumerate() {
            let mut v = mean_sign * mu[i];
            for (k, e) in eps.iter().enumerate().take(i + 1) {
                v += l[(i, k)] * e;
            }
            *o = v;
        }
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.spec.classes {
            return Err(Error::arg(
                "label",
                format!("class id {label} invalid for a {}-class spec", self.spec.classes),
            ));
        }
        Ok(())
    }

    fn draw(&self, signs: [f64; 3], rng: &mut SplitMix64) -> Vec<f64> {
        let layout = self.spec.layout;
        let mut x = vec![0.0; layout.total()];
        for (b, range) in layout.blocks().into_iter().enumerate() {
            self.draw_block(b, signs[b], rng, &mut x[range]);
        }
        x
    }

    pub fn sample_original(&self, label: usize, pair_id: u64, rng: &mut SplitMix64) -> Result<Sample> {
        self.check_label(label)?;
        let y = signed_label(label);
        Ok(Sample {
            x: self.draw([y; 3], rng),
            label,
            role: Role::Original,
            pair_id,
            source_label: label,
        })
    }

    pub fn derive_counterfactual(
        &self,
        original: &Sample,
        mode: EditMode,
        rng: &mut SplitMix64,
    ) -> Result<Sample> {
        if original.role != Role::Original {
            return Err(Error::arg("original", "sample is already a counterfactual"));
        }
        let layout = self.spec.layout;
        if original.x.len() != layout.total() {
            return Err(Error::Shape(format!(
                "sample has {} features, layout has {}",
                original.x.len(),
                layout.total()
            )));
        }
        let label = flip_label(original.label)
            .ok_or_else(|| Error::arg("original", "neutral samples have no counterfactual"))?;
        let mut x = original.x.clone();
        match mode {
            EditMode::ExactOpposite => x[layout.r1()].iter_mut().for_each(|v| *v = -*v),
            EditMode::Resample => {
                self.draw_block(0, signed_label(label), rng, &mut x[layout.r1()]);
            }
        }
        Ok(Sample {
            x,
            label,
            role: Role::Counterfactual,
            pair_id: original.pair_id,
            source_label: original.label,
        })
    }

    /// An original-role sample under a distribution shift.
    pub fn sample_shifted(
        &self,
        label: usize,
        shift: OodShift,
        pair_id: u64,
        rng: &mut SplitMix64,
    ) -> Result<Sample> {
        self.check_label(label)?;
        let y = signed_label(label);
        let signs = match shift {
            OodShift::SpuriousFlip => [y, y, -y],
            OodShift::SpuriousNull => [y, y, 0.0],
            OodShift::EditedNull => [0.0, y, y],
        };
        Ok(Sample {
            x: self.draw(signs, rng),
            label,
            role: Role::Original,
            pair_id,
            source_label: label,
        })
    }
}

pub fn sample_original(spec: &FeatureModelSpec, label: usize, rng: &mut SplitMix64) -> Result<Sample> {
    Sampler::new(spec)?.sample_original(label, 0, rng)
}

pub fn derive_counterfactual(
    original: &Sample,
    spec: &FeatureModelSpec,
    mode: EditMode,
    rng: &mut SplitMix64,
) -> Result<Sample> {
    Sampler::new(spec)?.derive_counterfactual(original, mode, rng)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec_hash: String,
    pub seed: u64,
    pub mode: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairGroup {
    pub pair_id: u64,
    pub original: usize,
    pub counterfactuals: Vec<usize>,
}

impl PairGroup {
    pub fn len(&self) -> usize {
        1 + self.counterfactuals.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.original).chain(self.counterfactuals.iter().copied())
    }
}

/// Samples plus explicit original↔counterfactual links. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    layout: BlockLayout,
    num_classes: usize,
    samples: Vec<Sample>,
    groups: Vec<PairGroup>,
    pair_index: BTreeMap<u64, usize>,
    spec: Option<FeatureModelSpec>,
    provenance: Provenance,
}

/// JSON sidecar stored next to a dataset TSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub layout: BlockLayout,
    pub num_classes: usize,
    pub spec: Option<FeatureModelSpec>,
    pub provenance: Provenance,
}

impl PairedDataset {
    /// Builds and validates the pair index. Groups are ordered by the
    /// position of their original.
    pub fn new(
        layout: BlockLayout,
        num_classes: usize,
        samples: Vec<Sample>,
        spec: Option<FeatureModelSpec>,
        provenance: Provenance,
    ) -> Result<Self> {
        layout.check()?;
        let m = layout.total();
        let mut groups: Vec<PairGroup> = Vec::new();
        let mut pair_index: BTreeMap<u64, usize> = BTreeMap::new();
        for (pos, s) in samples.iter().enumerate() {
            if s.x.len() != m {
                return Err(Error::Shape(format!(
                    "sample {pos} has {} features, layout has {m}",
                    s.x.len()
                )));
            }
            if s.label >= num_classes {
                return Err(Error::arg(
                    "samples",
                    format!("sample {pos} has label {} with {num_classes} classes", s.label),
                ));
            }
            if s.role == Role::Original {
                if s.source_label != s.label {
                    return Err(Error::arg(
                        "samples",
                        format!("original at {pos} has source_label != label"),
                    ));
                }
                if pair_index.insert(s.pair_id, groups.len()).is_some() {
                    return Err(Error::arg(
                        "samples",
                        format!("pair {} has more than one original", s.pair_id),
                    ));
                }
                groups.push(PairGroup {
                    pair_id: s.pair_id,
                    original: pos,
                    counterfactuals: Vec::new(),
                });
            }
        }
        for (pos, s) in samples.iter().enumerate() {
            if s.role != Role::Counterfactual {
                continue;
            }
            let g = *pair_index.get(&s.pair_id).ok_or_else(|| {
                Error::arg(
                    "samples",
                    format!("dangling counterfactual at {pos}: no original with pair_id {}", s.pair_id),
                )
            })?;
            let original = &samples[groups[g].original];
            if s.label == original.label {
                return Err(Error::arg(
                    "samples",
                    format!("pair {} has counterfactual with the original's label", s.pair_id),
                ));
            }
            if s.source_label != original.label {
                return Err(Error::arg(
                    "samples",
                    format!("counterfactual at {pos} records the wrong source label"),
                ));
            }
            groups[g].counterfactuals.push(pos);
        }
        Ok(Self {
            layout,
            num_classes,
            samples,
            groups,
            pair_index,
            spec,
            provenance,
        })
    }

    pub fn layout(&self) -> BlockLayout {
        self.layout
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn groups(&self) -> &[PairGroup] {
        &self.groups
    }

    pub fn group(&self, pair_id: u64) -> Option<&PairGroup> {
        self.pair_index.get(&pair_id).map(|&g| &self.groups[g])
    }

    pub fn spec(&self) -> Option<&FeatureModelSpec> {
        self.spec.as_ref()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Largest group size (original plus its counterfactuals).
    pub fn max_group_len(&self) -> usize {
        self.groups.iter().map(PairGroup::len).max().unwrap_or(0)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }

    /// Feature rows of `indices`, in order.
    pub fn features_of(&self, indices: &[usize]) -> Matrix {
        Matrix::from_row_slices(
            self.layout.total(),
            indices.iter().map(|&i| self.samples[i].x.as_slice()),
        )
        .expect("rows validated at construction")
    }

    pub fn features(&self) -> Matrix {
        Matrix::from_row_slices(self.layout.total(), self.samples.iter().map(|s| s.x.as_slice()))
            .expect("rows validated at construction")
    }

    /// New dataset holding the given groups (by position in [`groups`](Self::groups)).
    pub fn select_groups(&self, positions: &[usize], mode_suffix: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for &g in positions {
            let group = self
                .groups
                .get(g)
                .ok_or_else(|| Error::arg("positions", format!("no group {g}")))?;
            samples.extend(group.members().map(|i| self.samples[i].clone()));
        }
        let provenance = Provenance {
            mode: format!("{}/{mode_suffix}", self.provenance.mode),
            ..self.provenance.clone()
        };
        Self::new(self.layout, self.num_classes, samples, self.spec.clone(), provenance)
    }

    /// Drops every counterfactual.
    pub fn originals_only(&self) -> Self {
        let samples = self
            .groups
            .iter()
            .map(|g| self.samples[g.original].clone())
            .collect();
        let provenance = Provenance {
            mode: format!("{}/originals", self.provenance.mode),
            ..self.provenance.clone()
        };
        Self::new(self.layout, self.num_classes, samples, self.spec.clone(), provenance)
            .expect("subset of a valid dataset")
    }

    /// Splits whole groups into train/validation/test, stratified by the
    /// original's label. Each split keeps the parent's group order.
    pub fn split_groups(&self, ratios: [f64; 3], seed: u64) -> Result<[Self; 3]> {
        if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::arg("ratios", "split ratios must be positive and sum to 1"));
        }
        let mut parts: [Vec<usize>; 3] = Default::default();
        for class in 0..self.num_classes {
            let mut members: Vec<usize> = (0..self.groups.len())
                .filter(|&g| self.samples[self.groups[g].original].label == class)
                .collect();
            rng::stream(seed, &[STREAM_SPLIT, class as u64]).shuffle(&mut members);
            let n = members.len() as f64;
            let n_train = (n * ratios[0]).round() as usize;
            let n_valid = ((n * ratios[1]).round() as usize).min(members.len() - n_train);
            parts[0].extend_from_slice(&members[..n_train]);
            parts[1].extend_from_slice(&members[n_train..n_train + n_valid]);
            parts[2].extend_from_slice(&members[n_train + n_valid..]);
        }
        for (p, name) in parts.iter().zip(["train", "valid", "test"]) {
            if p.is_empty() {
                return Err(Error::arg(
                    "dataset",
                    format!("too few groups ({}) for a non-empty {name} split", self.groups.len()),
                ));
            }
        }
        let build = |p: &mut Vec<usize>, name: &str| {
            p.sort_unstable();
            self.select_groups(p, name)
        };
        let [mut a, mut b, mut c] = parts;
        Ok([build(&mut a, "train")?, build(&mut b, "valid")?, build(&mut c, "test")?])
    }

    pub fn tsv_header(&self) -> String {
        let mut h = String::from("pair_id\trole\tlabel");
        for j in 0..self.layout.total() {
            h.push_str(&format!("\tx_{j}"));
        }
        h
    }

    /// Columnar TSV; floats in shortest round-trip form.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", self.tsv_header())?;
        for s in &self.samples {
            write!(w, "{}\t{}\t{}", s.pair_id, s.role.as_str(), s.label)?;
            for v in &s.x {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_tsv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn sidecar(&self) -> DatasetSidecar {
        DatasetSidecar {
            layout: self.layout,
            num_classes: self.num_classes,
            spec: self.spec.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// SHA-256 of the TSV encoding, hex.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv_string().as_bytes()))
    }

    pub fn read_tsv<R: Read>(reader: R, sidecar: DatasetSidecar) -> Result<Self> {
        let m = sidecar.layout.total();
        let mut lines = BufReader::new(reader).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty dataset file".into()))?
            .map_err(|e| Error::io("reading dataset header", e))?;
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.len() != 3 + m || cols[..3] != ["pair_id", "role", "label"] {
            return Err(Error::Parse(format!(
                "header does not match a {m}-feature dataset: {header:?}"
            )));
        }
        let mut raw = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io("reading dataset", e))?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| Error::Parse(format!("line {}: {what}", lineno + 2));
            if f.len() != 3 + m {
                return Err(bad("wrong number of columns"));
            }
            let pair_id: u64 = f[0].parse().map_err(|_| bad("pair_id"))?;
            let role = Role::parse(f[1]).ok_or_else(|| bad("role"))?;
            let label: usize = f[2].parse().map_err(|_| bad("label"))?;
            let x = f[3..]
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("feature value"))?;
            raw.push((pair_id, role, label, x));
        }
        let originals: BTreeMap<u64, usize> = raw
            .iter()
            .filter(|r| r.1 == Role::Original)
            .map(|r| (r.0, r.2))
            .collect();
        let samples = raw
            .into_iter()
            .map(|(pair_id, role, label, x)| {
                let source_label = match role {
                    Role::Original => label,
                    Role::Counterfactual => *originals.get(&pair_id).unwrap_or(&usize::MAX),
                };
                Sample {
                    x,
                    label,
                    role,
                    pair_id,
                    source_label,
                }
            })
            .collect();
        Self::new(
            sidecar.layout,
            sidecar.num_classes,
            samples,
            sidecar.spec,
            sidecar.provenance,
        )
    }

    pub fn sidecar_path(tsv: &Path) -> PathBuf {
        tsv.with_extension("json")
    }

    /// Writes `path` (TSV) and its JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.write_tsv(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let side = Self::sidecar_path(path);
        std::fs::write(&side, serde_json::to_string_pretty(&self.sidecar())?)
            .map_err(|e| Error::io(side.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = Self::sidecar_path(path);
        let sidecar: DatasetSidecar = serde_json::from_str(
            &std::fs::read_to_string(&side).map_err(|e| Error::io(side.display().to_string(), e))?,
        )?;
        let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read_tsv(f, sidecar)
    }
}

fn stratified_labels(spec: &FeatureModelSpec, n: usize, seed: u64) -> Vec<usize> {
    let n_neutral = if spec.classes == 3 { n / 3 } else { 0 };
    let n_binary = n - n_neutral;
    let n_pos = (n_binary as f64 * spec.label_prior).round() as usize;
    let mut labels = Vec::with_capacity(n);
    labels.extend(std::iter::repeat_n(1, n_pos));
    labels.extend(std::iter::repeat_n(0, n_binary - n_pos));
    labels.extend(std::iter::repeat_n(NEUTRAL, n_neutral));
    rng::stream(seed, &[STREAM_LABELS]).shuffle(&mut labels);
    labels
}

/// Original/counterfactual groups: each original is followed by its `k`
/// counterfactuals. Neutral originals (three-class specs) form singleton
/// groups. Sample `j` of pair `p` draws from its own stream, so the output
/// is a pure function of the arguments.
pub fn generate_paircad(
    spec: &FeatureModelSpec,
    n_pairs: usize,
    cfes_per_original: usize,
    edit_mode: EditMode,
    seed: u64,
) -> Result<PairedDataset> {
    let sampler = Sampler::new(spec)?;
    if n_pairs == 0 {
        return Err(Error::arg("n_pairs", "must be at least 1"));
    }
    if cfes_per_original == 0 {
        return Err(Error::arg("cfes_per_original", "must be at least 1"));
    }
    if cfes_per_original > 1 && edit_mode == EditMode::ExactOpposite {
        return Err(Error::arg("cfes_per_original", "exact opposite edit is unique"));
    }
    let labels = stratified_labels(spec, n_pairs, seed);
    let mut samples = Vec::with_capacity(n_pairs * (1 + cfes_per_original));
    for (p, &label) in labels.iter().enumerate() {
        let mut rng = rng::stream(seed, &[STREAM_PAIR, p as u64, 0]);
        let original = sampler.sample_original(label, p as u64, &mut rng)?;
        let neutral = label == NEUTRAL;
        samples.push(original);
        if neutral {
            continue;
        }
        let original = samples.last().expect("just pushed").clone();
        for j in 0..cfes_per_original {
            let mut rng = rng::stream(seed, &[STREAM_PAIR, p as u64, 1 + j as u64]);
            samples.push(sampler.derive_counterfactual(&original, edit_mode, &mut rng)?);
        }
    }
    let mode = format!(
        "paircad(k={cfes_per_original},{})",
        match edit_mode {
            EditMode::ExactOpposite => "exact_opposite",
            EditMode::Resample => "resample",
        }
    );
    PairedDataset::new(
        spec.layout,
        spec.classes,
        samples,
        Some(spec.clone()),
        Provenance {
            spec_hash: spec.content_hash(),
            seed,
            mode,
        },
    )
}

/// Shifted test set of originals only, stratified like [`generate_paircad`].
pub fn generate_ood(spec: &FeatureModelSpec, n: usize, shift: OodShift, seed: u64) -> Result<PairedDataset> {
    let sampler = Sampler::new(spec)?;
    if n == 0 {
        return Err(Error::arg("n", "must be at least 1"));
    }
    let labels = stratified_labels(spec, n, seed);
    let samples = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut rng = rng::stream(seed, &[STREAM_OOD, i as u64]);
            sampler.sample_shifted(label, shift, i as u64, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    PairedDataset::new(
        spec.layout,
        spec.classes,
        samples,
        Some(spec.clone()),
        Provenance {
            spec_hash: spec.content_hash(),
            seed,
            mode: format!("ood({})", shift.name()),
        },
    )
}
