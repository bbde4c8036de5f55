//! Part-level attention: cluster one conv layer's filters by kernel
//! similarity, let each cluster vote on proposals, and describe an image by
//! the FC1 features of each cluster's best patch.

use std::fmt;

use crate::classify::{svm_predict, svm_train_standardized, top1_error, SvmConfig};
use crate::convnet::{LayerSpec, Network, Tensor};
use crate::error::{Error, Result};
use crate::imaging::{Image, Rect};
use crate::numerics::{cosine_similarity, kmeans, norm, sym_eigen, Matrix};
use crate::object_attention::warp_to_input;

/// Cosine similarity between the flattened kernels of one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    matrix: Matrix,
}

impl SimilarityMatrix {
    pub fn new(matrix: Matrix) -> Result<Self> {
        let n = matrix.rows();
        if matrix.cols() != n {
            return Err(Error::NotSquare(n, matrix.cols()));
        }
        for i in 0..n {
            if matrix.get(i, i) != 1.0 {
                return Err(Error::Invalid(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..n {
                let v = matrix.get(i, j);
                if v != matrix.get(j, i) {
                    return Err(Error::NotSymmetric(i, j));
                }
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::OutOfRange(format!("similarity {v} at ({i}, {j})")));
                }
            }
        }
        Ok(Self { matrix })
    }

    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

/// Similarity of the filters of conv layer `layer`. A filter with an
/// all-zero kernel is taken as dissimilar to every other filter.
pub fn filter_similarity_matrix(net: &Network, layer: usize) -> Result<SimilarityMatrix> {
    let n = match net.spec().layers.get(layer) {
        Some(LayerSpec::Conv { out_channels, .. }) => *out_channels,
        _ => {
            return Err(Error::Layer {
                layer,
                msg: "not a conv layer".into(),
            })
        }
    };
    let filters = (0..n)
        .map(|f| net.conv_filter(layer, f))
        .collect::<Result<Vec<_>>>()?;
    let mut m = Matrix::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            let s = if norm(filters[i]) == 0.0 || norm(filters[j]) == 0.0 {
                0.0
            } else {
                cosine_similarity(filters[i], filters[j])?
            };
            m.set(i, j, s);
            m.set(j, i, s);
        }
    }
    SimilarityMatrix::new(m)
}

/// `I - D^-1/2 A D^-1/2` with `A = max(S, 0)` off the diagonal and ones on it.
pub fn normalized_laplacian(s: &SimilarityMatrix) -> Matrix {
    let n = s.size();
    let affinity = |i: usize, j: usize| if i == j { 1.0 } else { s.get(i, j).max(0.0) };
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| 1.0 / (0..n).map(|j| affinity(i, j)).sum::<f64>().sqrt())
        .collect();
    let mut l = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            let v = affinity(i, j) * inv_sqrt_deg[i] * inv_sqrt_deg[j];
            l.set(i, j, l.get(i, j) - v);
        }
    }
    // exact symmetry for the eigensolver
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (l.get(i, j) + l.get(j, i));
            l.set(i, j, v);
            l.set(j, i, v);
        }
    }
    l
}

/// Group id per filter.
pub fn spectral_cluster(s: &SimilarityMatrix, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = s.size();
    if k == 0 || k > n {
        return Err(Error::ClusterCount { k, n });
    }
    if k == 1 {
        return Ok(vec![0; n]);
    }
    let eig = sym_eigen(&normalized_laplacian(s))?;
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..k).map(|c| eig.vectors.get(i, c)).collect();
            let len = norm(&row);
            if len > 0.0 {
                row.iter().map(|v| v / len).collect()
            } else {
                row
            }
        })
        .collect();
    kmeans(&points, k, seed)
}

/// Filter groups of one conv layer acting as part detectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PartDetectorBank {
    layer: usize,
    k: usize,
    assignment: Vec<usize>,
    noise_group: Option<usize>,
}

impl PartDetectorBank {
    pub fn new(layer: usize, k: usize, assignment: Vec<usize>, noise_group: Option<usize>) -> Result<Self> {
        if k == 0 || k > assignment.len() {
            return Err(Error::ClusterCount {
                k,
                n: assignment.len(),
            });
        }
        if let Some(&g) = assignment.iter().find(|&&g| g >= k) {
            return Err(Error::InvalidGroup(g));
        }
        if let Some(g) = (0..k).find(|g| !assignment.contains(g)) {
            return Err(Error::Invalid(format!("group {g} has no filters")));
        }
        if let Some(g) = noise_group.filter(|&g| g >= k) {
            return Err(Error::InvalidGroup(g));
        }
        Ok(Self {
            layer,
            k,
            assignment,
            noise_group,
        })
    }

    /// Spectral clustering of the filters of conv layer `layer`.
    pub fn build(net: &Network, layer: usize, k: usize, seed: u64) -> Result<Self> {
        let s = filter_similarity_matrix(net, layer)?;
        Self::new(layer, k, spectral_cluster(&s, k, seed)?, None)
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn noise_group(&self) -> Option<usize> {
        self.noise_group
    }

    pub fn with_noise_group(&self, noise: Option<usize>) -> Result<Self> {
        Self::new(self.layer, self.k, self.assignment.clone(), noise)
    }

    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&f| self.assignment[f] == group)
            .collect()
    }

    /// Group ids other than the noise group, ascending.
    pub fn part_groups(&self) -> Vec<usize> {
        (0..self.k).filter(|&g| Some(g) != self.noise_group).collect()
    }

    /// Lines `layer L`, `k K`, `groups g0 g1 ...`, `noise N|none`.
    pub fn to_text(&self) -> String {
        let groups: Vec<String> = self.assignment.iter().map(|g| g.to_string()).collect();
        let noise = self.noise_group.map_or("none".to_string(), |g| g.to_string());
        format!(
            "layer {}\nk {}\ngroups {}\nnoise {}\n",
            self.layer,
            self.k,
            groups.join(" "),
            noise
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut offset = 0;
        let mut field = |name: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| Error::Parse {
                offset,
                msg: format!("missing `{name}` line"),
            })?;
            offset += line.len() + 1;
            let mut words = line.split_whitespace();
            if words.next() != Some(name) {
                return Err(Error::Parse {
                    offset,
                    msg: format!("expected `{name}`"),
                });
            }
            Ok(words.map(str::to_string).collect())
        };
        let num = |w: &str| {
            w.parse::<usize>().map_err(|_| Error::Parse {
                offset: 0,
                msg: format!("bad number `{w}`"),
            })
        };
        let single = |v: Vec<String>, name: &str| -> Result<String> {
            match v.as_slice() {
                [w] => Ok(w.clone()),
                _ => Err(Error::Parse {
                    offset: 0,
                    msg: format!("`{name}` takes one value"),
                }),
            }
        };
        let layer = num(&single(field("layer")?, "layer")?)?;
        let k = num(&single(field("k")?, "k")?)?;
        let groups = field("groups")?
            .iter()
            .map(|w| num(w))
            .collect::<Result<Vec<_>>>()?;
        let noise = single(field("noise")?, "noise")?;
        let noise = if noise == "none" { None } else { Some(num(&noise)?) };
        Self::new(layer, k, groups, noise)
    }
}

impl fmt::Display for PartDetectorBank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Best proposal of one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartHit {
    pub group: usize,
    pub rect: Rect,
    pub score: f64,
}

/// One hit per non-noise group, in ascending group order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PartDetection {
    pub parts: Vec<PartHit>,
}

impl PartDetection {
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// The hit with the highest score (earliest on ties).
    pub fn best(&self) -> Option<&PartHit> {
        self.parts
            .iter()
            .reduce(|a, b| if b.score > a.score { b } else { a })
    }
}

fn check_bank(net: &Network, bank: &PartDetectorBank) -> Result<()> {
    match net.spec().layers.get(bank.layer) {
        Some(LayerSpec::Conv { out_channels, .. }) if *out_channels == bank.assignment.len() => Ok(()),
        _ => Err(Error::Layer {
            layer: bank.layer,
            msg: "bank does not match this conv layer".into(),
        }),
    }
}

fn channel_maxima(t: &Tensor) -> Vec<f64> {
    (0..t.shape.c)
        .map(|c| t.channel(c).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Votes of every group (noise included) for one patch: per group, the sum
/// of its filters' spatial maxima of the rectified response.
pub fn group_scores(net: &Network, bank: &PartDetectorBank, patch: &Image) -> Result<Vec<f64>> {
    check_bank(net, bank)?;
    let maxima = channel_maxima(&net.response(patch, bank.layer)?);
    let mut scores = vec![0.0; bank.k];
    for (f, m) in maxima.iter().enumerate() {
        scores[bank.assignment[f]] += m;
    }
    Ok(scores)
}

pub fn detection_score(net: &Network, bank: &PartDetectorBank, group: usize, patch: &Image) -> Result<f64> {
    if group >= bank.k || Some(group) == bank.noise_group {
        return Err(Error::InvalidGroup(group));
    }
    Ok(group_scores(net, bank, patch)?[group])
}

/// Best proposal for every group, noise included, in group order.
pub fn detect_all_groups(net: &Network, bank: &PartDetectorBank, img: &Image, proposals: &[Rect]) -> Result<Vec<PartHit>> {
    if proposals.is_empty() {
        return Err(Error::NoPatches);
    }
    let mut best: Vec<Option<PartHit>> = vec![None; bank.k];
    for &rect in proposals {
        let patch = warp_to_input(net, img, rect)?;
        let scores = group_scores(net, bank, &patch)?;
        for (g, &score) in scores.iter().enumerate() {
            if best[g].is_none_or(|h| score > h.score) {
                best[g] = Some(PartHit { group: g, rect, score });
            }
        }
    }
    Ok(best.into_iter().map(|h| h.expect("at least one proposal")).collect())
}

pub fn detect_parts(net: &Network, bank: &PartDetectorBank, img: &Image, proposals: &[Rect]) -> Result<PartDetection> {
    let all = detect_all_groups(net, bank, img, proposals)?;
    Ok(PartDetection {
        parts: all
            .into_iter()
            .filter(|h| Some(h.group) != bank.noise_group)
            .collect(),
    })
}

/// FC1 features of each part's best patch, concatenated in group order.
pub fn part_feature(net: &Network, img: &Image, detection: &PartDetection) -> Result<Vec<f64>> {
    if detection.is_empty() {
        return Err(Error::NoPatches);
    }
    let mut out = Vec::new();
    for hit in &detection.parts {
        out.extend(net.extract_feature(&warp_to_input(net, img, hit.rect)?)?);
    }
    Ok(out)
}

/// An image with its proposals and fine label, as used for part features.
#[derive(Debug, Clone)]
pub struct PartSample {
    pub image: Image,
    pub proposals: Vec<Rect>,
    pub label: usize,
}

/// FC1 feature of each group's best patch (noise group included), per sample.
pub fn per_group_features(net: &Network, bank: &PartDetectorBank, samples: &[PartSample]) -> Result<Vec<Vec<Vec<f64>>>> {
    samples
        .iter()
        .map(|s| {
            detect_all_groups(net, bank, &s.image, &s.proposals)?
                .iter()
                .map(|h| net.extract_feature(&warp_to_input(net, &s.image, h.rect)?))
                .collect()
        })
        .collect()
}

/// Validation accuracy of a single-part SVM per group.
pub fn group_accuracies(
    net: &Network,
    bank: &PartDetectorBank,
    train: &[PartSample],
    validation: &[PartSample],
    svm: &SvmConfig,
) -> Result<Vec<f64>> {
    let tr = per_group_features(net, bank, train)?;
    let va = per_group_features(net, bank, validation)?;
    let tr_labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let va_labels: Vec<usize> = validation.iter().map(|s| s.label).collect();
    group_accuracies_from_features(&tr, &tr_labels, &va, &va_labels, bank.k, svm)
}

/// As [`group_accuracies`], from precomputed `[sample][group]` features.
pub fn group_accuracies_from_features(
    train: &[Vec<Vec<f64>>],
    train_labels: &[usize],
    validation: &[Vec<Vec<f64>>],
    validation_labels: &[usize],
    k: usize,
    svm: &SvmConfig,
) -> Result<Vec<f64>> {
    if validation.is_empty() {
        return Err(Error::EmptyDataset);
    }
    (0..k)
        .map(|g| {
            let xs: Vec<Vec<f64>> = train.iter().map(|f| f[g].clone()).collect();
            let model = svm_train_standardized(&xs, train_labels, svm)?.model;
            let preds = validation
                .iter()
                .map(|f| svm_predict(&model, &f[g]))
                .collect::<Result<Vec<_>>>()?;
            Ok(1.0 - top1_error(&preds, validation_labels)?)
        })
        .collect()
}

/// Lowest accuracy wins; ties go to the lowest group id.
pub fn noise_from_accuracies(accuracies: &[f64]) -> Result<usize> {
    if accuracies.len() < 2 {
        return Err(Error::SingleGroupNoise);
    }
    let mut worst = 0;
    for (g, &a) in accuracies.iter().enumerate() {
        if a < accuracies[worst] {
            worst = g;
        }
    }
    Ok(worst)
}

pub fn identify_noise_cluster(
    net: &Network,
    bank: &PartDetectorBank,
    train: &[PartSample],
    validation: &[PartSample],
    svm: &SvmConfig,
) -> Result<usize> {
    if bank.k < 2 {
        return Err(Error::SingleGroupNoise);
    }
    noise_from_accuracies(&group_accuracies(net, bank, train, validation, svm)?)
}
