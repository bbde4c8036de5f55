//! Bottom-up region proposals: graph-based over-segmentation followed by
//! greedy hierarchical grouping of adjacent regions.

use std::collections::{BTreeMap, BTreeSet};

use crate::imaging::{Image, Rect};

/// Histogram bins per channel.
pub const HIST_BINS: usize = 25;

/// Pixel labelling into `region_count` 4-connected regions, ids numbered in
/// raster order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub region_count: usize,
}

impl Segmentation {
    pub fn label(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }
}

/// Size, tight bounding box and per-channel colour histogram of a region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDescriptor {
    pub pixel_count: usize,
    pub bbox: Rect,
    /// `HIST_BINS` bins per channel, each channel block L1-normalized.
    pub histogram: Vec<f64>,
}

impl RegionDescriptor {
    /// Descriptor of the union of two disjoint regions.
    pub fn merge(&self, other: &RegionDescriptor) -> RegionDescriptor {
        let n = (self.pixel_count + other.pixel_count) as f64;
        let wa = self.pixel_count as f64 / n;
        let wb = other.pixel_count as f64 / n;
        RegionDescriptor {
            pixel_count: self.pixel_count + other.pixel_count,
            bbox: self.bbox.union(&other.bbox),
            histogram: self
                .histogram
                .iter()
                .zip(&other.histogram)
                .map(|(a, b)| wa * a + wb * b)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalParams {
    pub scale_k: f64,
    pub sigma: f64,
    pub min_size: usize,
    pub w_color: f64,
    pub w_size: f64,
    pub w_fill: f64,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self {
            scale_k: 100.0,
            sigma: 0.8,
            min_size: 20,
            w_color: 1.0,
            w_size: 1.0,
            w_fill: 1.0,
        }
    }
}

/// Ordered, duplicate-free proposal boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<Rect>,
}

/// One grouping step: regions `a` and `b` merged into `merged`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeEvent {
    pub a: usize,
    pub b: usize,
    pub merged: usize,
    pub similarity: f64,
}

/// Full grouping trace. Region ids `0..initial_regions` are the segments,
/// later ids are created by the merges in order.
#[derive(Debug, Clone)]
pub struct GroupingHierarchy {
    pub segmentation: Segmentation,
    pub merges: Vec<MergeEvent>,
    pub region_boxes: Vec<Rect>,
}

impl GroupingHierarchy {
    pub fn initial_regions(&self) -> usize {
        self.segmentation.region_count
    }

    pub fn proposals(&self) -> ProposalSet {
        let mut seen = BTreeSet::new();
        let boxes = self
            .region_boxes
            .iter()
            .filter(|b| seen.insert(**b))
            .copied()
            .collect();
        ProposalSet { boxes }
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, weight: f64) -> usize {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = weight;
        big
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge clamping; `sigma <= 0` is a no-op.
fn smooth(img: &Image, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.data().to_vec();
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                tmp[(y * w + x) * c + ch] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * img.get(y, clamp(x as isize + i as isize - radius, w), ch))
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(y * w + x) * c + ch] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * tmp[(clamp(y as isize + i as isize - radius, h) * w + x) * c + ch])
                    .sum();
            }
        }
    }
    out
}

/// 4-neighbour edges `(weight, a, b)` sorted by weight, ties by position.
/// Weights are colour distances on the 0..255 intensity scale so `scale_k`
/// keeps its conventional magnitude.
fn sorted_edges(data: &[f64], h: usize, w: usize, c: usize) -> Vec<(f64, usize, usize)> {
    let dist = |a: usize, b: usize| {
        (0..c)
            .map(|ch| {
                let d = (data[a * c + ch] - data[b * c + ch]) * 255.0;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut edges = Vec::with_capacity(2 * h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                edges.push((dist(i, i + 1), i, i + 1));
            }
            if y + 1 < h {
                edges.push((dist(i, i + w), i, i + w));
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    edges
}

/// Graph-based segmentation on the 4-neighbour pixel graph.
pub fn felzenszwalb_segment(img: &Image, scale_k: f64, sigma: f64, min_size: usize) -> Segmentation {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let smoothed = smooth(img, sigma);
    let edges = sorted_edges(&smoothed, h, w, c);
    let mut ds = DisjointSet::new(h * w);
    let threshold = |size: usize, internal: f64| internal + scale_k / size as f64;

    for &(weight, a, b) in &edges {
        let ra = ds.find(a);
        let rb = ds.find(b);
        if ra != rb
            && weight <= threshold(ds.size[ra], ds.internal[ra])
            && weight <= threshold(ds.size[rb], ds.internal[rb])
        {
            ds.union(ra, rb, weight);
        }
    }
    // small components join the neighbour across their cheapest edge
    for &(_, a, b) in &edges {
        let ra = ds.find(a);
        let rb = ds.find(b);
        if ra != rb && (ds.size[ra] < min_size || ds.size[rb] < min_size) {
            let keep = ds.internal[ra].max(ds.internal[rb]);
            ds.union(ra, rb, keep);
        }
    }

    let mut ids = vec![usize::MAX; h * w];
    let mut labels = Vec::with_capacity(h * w);
    let mut next = 0;
    for p in 0..h * w {
        let root = ds.find(p);
        if ids[root] == usize::MAX {
            ids[root] = next;
            next += 1;
        }
        labels.push(ids[root]);
    }
    Segmentation {
        height: h,
        width: w,
        labels,
        region_count: next,
    }
}

fn hist_bin(v: f64) -> usize {
    ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
}

/// One descriptor per region of `seg`, computed from the pixels of `img`.
pub fn region_features(img: &Image, seg: &Segmentation) -> Vec<RegionDescriptor> {
    let c = img.channels();
    let n = seg.region_count;
    let mut counts = vec![0usize; n];
    let mut bounds = vec![(usize::MAX, usize::MAX, 0usize, 0usize); n];
    let mut hists = vec![vec![0.0; HIST_BINS * c]; n];
    for y in 0..seg.height {
        for x in 0..seg.width {
            let r = seg.label(y, x);
            counts[r] += 1;
            let b = &mut bounds[r];
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x);
            b.3 = b.3.max(y);
            for (ch, &v) in img.pixel(y, x).iter().enumerate() {
                hists[r][ch * HIST_BINS + hist_bin(v)] += 1.0;
            }
        }
    }
    (0..n)
        .map(|r| {
            let (x0, y0, x1, y1) = bounds[r];
            let total = counts[r] as f64;
            RegionDescriptor {
                pixel_count: counts[r],
                bbox: Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1),
                histogram: hists[r].iter().map(|v| v / total).collect(),
            }
        })
        .collect()
}

fn adjacency(seg: &Segmentation) -> BTreeSet<(usize, usize)> {
    let mut pairs = BTreeSet::new();
    let mut add = |a: usize, b: usize| {
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    };
    for y in 0..seg.height {
        for x in 0..seg.width {
            let l = seg.label(y, x);
            if x + 1 < seg.width {
                add(l, seg.label(y, x + 1));
            }
            if y + 1 < seg.height {
                add(l, seg.label(y + 1, x));
            }
        }
    }
    pairs
}

pub fn histogram_intersection(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

pub fn size_similarity(a: &RegionDescriptor, b: &RegionDescriptor, image_area: usize) -> f64 {
    1.0 - (a.pixel_count + b.pixel_count) as f64 / image_area as f64
}

pub fn fill_similarity(a: &RegionDescriptor, b: &RegionDescriptor, image_area: usize) -> f64 {
    let bbox = a.bbox.union(&b.bbox).area();
    1.0 - (bbox - a.pixel_count - b.pixel_count) as f64 / image_area as f64
}

fn similarity(
    a: &RegionDescriptor,
    b: &RegionDescriptor,
    image_area: usize,
    params: &ProposalParams,
) -> f64 {
    params.w_color * histogram_intersection(&a.histogram, &b.histogram)
        + params.w_size * size_similarity(a, b, image_area)
        + params.w_fill * fill_similarity(a, b, image_area)
}

/// Segments `img` and greedily merges the most similar adjacent pair until
/// no adjacent pairs remain, recording every region formed along the way.
pub fn grouping_hierarchy(img: &Image, params: &ProposalParams) -> GroupingHierarchy {
    let seg = felzenszwalb_segment(img, params.scale_k, params.sigma, params.min_size);
    let image_area = img.height() * img.width();
    let mut regions: Vec<RegionDescriptor> = region_features(img, &seg);
    let mut neighbours: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); regions.len()];
    let mut sims: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (a, b) in adjacency(&seg) {
        neighbours[a].insert(b);
        neighbours[b].insert(a);
        sims.insert((a, b), similarity(&regions[a], &regions[b], image_area, params));
    }

    let mut merges = Vec::new();
    while !sims.is_empty() {
        // BTreeMap iterates pairs in ascending order, so the strict `>`
        // keeps the lowest pair among equal similarities.
        let (&(a, b), &s) = sims
            .iter()
            .fold(None, |best: Option<(&(usize, usize), &f64)>, cur| match best {
                Some(bst) if *cur.1 <= *bst.1 => Some(bst),
                _ => Some(cur),
            })
            .expect("non-empty");
        let merged = regions.len();
        regions.push(regions[a].merge(&regions[b]));
        let mut joined: BTreeSet<usize> = &neighbours[a] | &neighbours[b];
        joined.remove(&a);
        joined.remove(&b);
        for &dead in &[a, b] {
            for n in std::mem::take(&mut neighbours[dead]) {
                neighbours[n].remove(&dead);
                sims.remove(&(dead.min(n), dead.max(n)));
            }
        }
        for &n in &joined {
            neighbours[n].insert(merged);
            sims.insert(
                (n, merged),
                similarity(&regions[n], &regions[merged], image_area, params),
            );
        }
        neighbours.push(joined);
        merges.push(MergeEvent {
            a,
            b,
            merged,
            similarity: s,
        });
    }

    let region_boxes = regions.iter().map(|r| r.bbox).collect();
    GroupingHierarchy {
        segmentation: seg,
        merges,
        region_boxes,
    }
}

/// Bounding boxes of every region of the grouping hierarchy, deduplicated
/// in order of creation.
pub fn selective_search(img: &Image, params: &ProposalParams) -> ProposalSet {
    grouping_hierarchy(img, params).proposals()
}
