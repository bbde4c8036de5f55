//! Object-level attention: score proposals by the FilterNet's softmax mass on
//! the parent category, keep the confident ones, and classify an image by
//! averaging the DomainNet's softmax over its kept patches.

use std::collections::BTreeSet;

use crate::convnet::Network;
use crate::error::{Error, Result};
use crate::imaging::{resize_bilinear, ten_views, warp, Image, Rect};
use crate::numerics::Distribution;

/// Proposals with less area than this are never scored.
pub const MIN_PROPOSAL_AREA: usize = 64;

/// FilterNet classes that make up the parent category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParentClassSet {
    indices: BTreeSet<usize>,
}

impl ParentClassSet {
    pub fn new(indices: impl IntoIterator<Item = usize>, class_count: usize) -> Result<Self> {
        let indices: BTreeSet<usize> = indices.into_iter().collect();
        if indices.is_empty() {
            return Err(Error::Invalid("empty parent class set".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= class_count) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes: class_count,
            });
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    /// The classes not in this set; `None` when that would be empty.
    pub fn complement(&self, class_count: usize) -> Option<Self> {
        let rest: BTreeSet<usize> = (0..class_count)
            .filter(|i| !self.indices.contains(i))
            .collect();
        (!rest.is_empty()).then_some(Self { indices: rest })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub rect: Rect,
    pub score: f64,
}

/// Kept patches in descending score order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectedPatches {
    pub patches: Vec<ScoredBox>,
}

impl SelectedPatches {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn rects(&self) -> Vec<Rect> {
        self.patches.iter().map(|p| p.rect).collect()
    }
}

/// Sum of the FilterNet's softmax probabilities over the parent classes.
pub fn filter_confidence(filternet: &Network, patch: &Image, parents: &ParentClassSet) -> Result<f64> {
    let classes = filternet.spec().classes;
    if let Some(bad) = parents.indices().find(|&i| i >= classes) {
        return Err(Error::InvalidLabel { label: bad, classes });
    }
    let dist = filternet.predict(patch)?;
    let score: f64 = parents.indices().map(|i| dist.probs()[i]).sum();
    Ok(score.clamp(0.0, 1.0))
}

/// Warps `rect` of `img` to the network's input size.
pub fn warp_to_input(net: &Network, img: &Image, rect: Rect) -> Result<Image> {
    let (h, w, _) = net.spec().input;
    warp(img, rect, h, w)
}

/// Scores every proposal of at least [`MIN_PROPOSAL_AREA`] pixels, in order.
pub fn score_proposals(
    filternet: &Network,
    img: &Image,
    proposals: &[Rect],
    parents: &ParentClassSet,
) -> Result<Vec<ScoredBox>> {
    proposals
        .iter()
        .filter(|r| r.area() >= MIN_PROPOSAL_AREA)
        .map(|&rect| {
            let patch = warp_to_input(filternet, img, rect)?;
            Ok(ScoredBox {
                rect,
                score: filter_confidence(filternet, &patch, parents)?,
            })
        })
        .collect()
}

/// Keeps scored boxes at or above `threshold`, best first (stable), at most `max_count`.
pub fn threshold_scored(scored: &[ScoredBox], threshold: f64, max_count: usize) -> SelectedPatches {
    let mut kept: Vec<ScoredBox> = scored
        .iter()
        .filter(|s| s.score >= threshold)
        .copied()
        .collect();
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept.truncate(max_count);
    SelectedPatches { patches: kept }
}

pub fn select_patches(
    filternet: &Network,
    img: &Image,
    proposals: &[Rect],
    parents: &ParentClassSet,
    threshold: f64,
    max_count: usize,
) -> Result<SelectedPatches> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::OutOfRange(format!("threshold {threshold}")));
    }
    let scored = score_proposals(filternet, img, proposals, parents)?;
    Ok(threshold_scored(&scored, threshold, max_count))
}

/// Arithmetic mean of the per-patch softmax outputs.
pub fn predict_multiview(domainnet: &Network, patches: &[Image]) -> Result<Distribution> {
    let dists = patches
        .iter()
        .map(|p| domainnet.predict(p))
        .collect::<Result<Vec<_>>>()?;
    average_distributions(&dists)
}

pub fn average_distributions(dists: &[Distribution]) -> Result<Distribution> {
    let first = dists.first().ok_or(Error::NoPatches)?;
    let n = first.len();
    if let Some(d) = dists.iter().find(|d| d.len() != n) {
        return Err(Error::LengthMismatch(n, d.len()));
    }
    let inv = 1.0 / dists.len() as f64;
    // Each class is summed in sorted order so the result does not depend on view order.
    let mut column = Vec::with_capacity(dists.len());
    let mean = (0..n)
        .map(|c| {
            column.clear();
            column.extend(dists.iter().map(|d| d.probs()[c]));
            column.sort_by(f64::total_cmp);
            (column.iter().sum::<f64>() * inv).clamp(0.0, 1.0)
        })
        .collect();
    Distribution::new(mean)
}

/// Side of the fixed-view crops for an image: 7/8 of its shorter side.
pub fn fixed_view_crop(img: &Image) -> usize {
    (img.height().min(img.width()) * 7 / 8).max(1)
}

/// Ten fixed views of the whole image, warped to the network input size.
pub fn fixed_views(net: &Network, img: &Image) -> Result<Vec<Image>> {
    let (h, w, _) = net.spec().input;
    ten_views(img, fixed_view_crop(img))?
        .iter()
        .map(|v| resize_bilinear(v, h, w))
        .collect()
}

/// The DomainNet inputs for one image: its selected patches, or the ten
/// fixed views when nothing was selected.
pub fn attended_views(net: &Network, img: &Image, selected: &SelectedPatches) -> Result<Vec<Image>> {
    if selected.is_empty() {
        return fixed_views(net, img);
    }
    selected
        .patches
        .iter()
        .map(|p| warp_to_input(net, img, p.rect))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::{LayerSpec, NetworkSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(classes: usize) -> NetworkSpec {
        NetworkSpec {
            input: (8, 8, 3),
            classes,
            layers: vec![
                LayerSpec::conv3(2),
                LayerSpec::Relu,
                LayerSpec::pool2(),
                LayerSpec::Fc { out_units: 4 },
                LayerSpec::Relu,
                LayerSpec::Fc { out_units: classes },
                LayerSpec::Softmax,
            ],
            part_layer: 0,
        }
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.random::<f64>()).unwrap()
    }

    fn grid_proposals(side: usize) -> Vec<Rect> {
        let mut v = vec![];
        for s in [8usize, 12, 16] {
            for y in (0..=side - s).step_by(4) {
                for x in (0..=side - s).step_by(4) {
                    v.push(Rect::new(x, y, s, s));
                }
            }
        }
        v
    }

    #[test]
    fn parent_set_validation() {
        assert!(ParentClassSet::new([], 3).is_err());
        assert!(ParentClassSet::new([3], 3).is_err());
        let p = ParentClassSet::new([0, 2], 3).unwrap();
        assert_eq!(p.complement(3).unwrap().indices().collect::<Vec<_>>(), vec![1]);
        assert!(ParentClassSet::new([0, 1, 2], 3).unwrap().complement(3).is_none());
    }

    #[test]
    fn confidence_examples() {
        let net = Network::init(spec(5), 3).unwrap();
        let patch = noise_image(8, 8, 1);
        let all = ParentClassSet::new(0..5, 5).unwrap();
        assert!((filter_confidence(&net, &patch, &all).unwrap() - 1.0).abs() < 1e-12);

        let zero = Network::zeros(spec(5)).unwrap();
        let two = ParentClassSet::new([1, 3], 5).unwrap();
        assert!((filter_confidence(&zero, &patch, &two).unwrap() - 0.4).abs() < 1e-15);

        let s = filter_confidence(&net, &patch, &two).unwrap();
        let c = filter_confidence(&net, &patch, &two.complement(5).unwrap()).unwrap();
        assert!((s + c - 1.0).abs() < 1e-12);

        let wide = ParentClassSet::new([6], 7).unwrap();
        assert!(filter_confidence(&net, &patch, &wide).is_err());
    }

    #[test]
    fn selection_respects_threshold_and_cap() {
        let net = Network::init(spec(3), 8).unwrap();
        let img = noise_image(24, 24, 2);
        let props = grid_proposals(24);
        let parents = ParentClassSet::new([0], 3).unwrap();
        let all = select_patches(&net, &img, &props, &parents, 0.0, usize::MAX).unwrap();
        assert_eq!(all.len(), props.len());
        assert!(all.patches.windows(2).all(|w| w[0].score >= w[1].score));
        let capped = select_patches(&net, &img, &props, &parents, 0.0, 5).unwrap();
        assert_eq!(capped.patches[..], all.patches[..5]);
        let top = all.patches[0].score;
        let none = select_patches(&net, &img, &props, &parents, (top + 1e-9).min(1.0), 40).unwrap();
        assert!(top >= 1.0 || none.is_empty());
        assert!(select_patches(&net, &img, &props, &parents, 1.5, 40).is_err());
    }

    #[test]
    fn tiny_proposals_are_skipped() {
        let net = Network::init(spec(3), 8).unwrap();
        let img = noise_image(24, 24, 2);
        let props = [Rect::new(0, 0, 7, 9), Rect::new(0, 0, 8, 8), Rect::new(1, 1, 4, 20)];
        let parents = ParentClassSet::new([0], 3).unwrap();
        let scored = score_proposals(&net, &img, &props, &parents).unwrap();
        assert_eq!(scored.len(), 2);
        assert_eq!(scored[0].rect, props[1]);
    }

    #[test]
    fn multiview_examples() {
        let net = Network::init(spec(3), 5).unwrap();
        let p = noise_image(8, 8, 9);
        assert_eq!(predict_multiview(&net, std::slice::from_ref(&p)).unwrap(), net.predict(&p).unwrap());
        assert_eq!(predict_multiview(&net, &[]).unwrap_err(), Error::NoPatches);
        let a = Distribution::new(vec![1.0, 0.0]).unwrap();
        let b = Distribution::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(average_distributions(&[a, b]).unwrap().probs(), &[0.5, 0.5]);
    }

    #[test]
    fn fallback_uses_ten_fixed_views() {
        let net = Network::init(spec(3), 5).unwrap();
        let img = noise_image(16, 16, 4);
        let views = attended_views(&net, &img, &SelectedPatches::default()).unwrap();
        assert_eq!(views.len(), 10);
        assert!(views.iter().all(|v| v.height() == 8 && v.width() == 8));
    }

    #[test]
    fn average_ignores_view_order_exactly() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut dists: Vec<Distribution> = (0..9)
            .map(|_| {
                let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
                crate::numerics::softmax(&logits).unwrap()
            })
            .collect();
        let base = average_distributions(&dists).unwrap();
        for _ in 0..10 {
            dists.shuffle(&mut rng);
            assert_eq!(average_distributions(&dists).unwrap(), base);
        }
    }
}
