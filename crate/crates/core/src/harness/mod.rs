//! Synthetic benchmark plus the end-to-end experiment: two whole-image
//! baselines, object-level attention, part-level attention and their fusion.

pub mod synthetic;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::{
    fuse, svm_predict, svm_train_standardized, top1_error, tune_alpha, LinearSvmModel, SvmConfig,
};
use crate::convnet::{train_with, Network, NetworkSpec, SampleSource, TrainConfig};
use crate::error::{Error, Result};
use crate::imaging::{hflip, warp, Image, Rect};
use crate::numerics::Distribution;
use crate::object_attention::{
    attended_views, fixed_views, predict_multiview, score_proposals, threshold_scored, ParentClassSet,
    SelectedPatches, warp_to_input, MIN_PROPOSAL_AREA,
};
use crate::part_attention::{
    detect_all_groups, group_accuracies_from_features, noise_from_accuracies, PartDetection,
    PartDetectorBank, PartHit,
};
use crate::region_proposal::{selective_search, ProposalParams};

pub use synthetic::{gen_synthetic, load_dataset, save_dataset, LabeledDataset, Sample, SyntheticSpec};

/// Independent seed for one stage of a run.
pub fn stage_seed(master: u64, stage: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stage);
    rng.random()
}

pub mod stages {
    pub const DATA: u64 = 1;
    pub const FILTERNET: u64 = 2;
    pub const DOMAINNET: u64 = 3;
    pub const CNN_DOMAIN: u64 = 4;
    pub const MULTITASK: u64 = 5;
    pub const PARTS: u64 = 6;
    pub const SVM: u64 = 7;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub data: SyntheticSpec,
    pub target_superclass: usize,
    /// Side of the square network input.
    pub net_input: usize,
    pub proposal_k: f64,
    pub proposal_sigma: f64,
    pub proposal_min_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub filter_epochs: usize,
    pub domain_epochs: usize,
    /// Epochs of the two whole-image baselines.
    pub baseline_epochs: usize,
    /// Smallest FilterNet training crop, as a fraction of the image side.
    pub filter_min_crop: f64,
    pub filter_threshold: f64,
    pub filter_max_patches: usize,
    pub parts_k: usize,
    pub svm_c: f64,
    pub svm_epochs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: SyntheticSpec::default(),
            target_superclass: 0,
            net_input: 24,
            proposal_k: 100.0,
            proposal_sigma: 0.8,
            proposal_min_size: 20,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch: 16,
            filter_epochs: 6,
            domain_epochs: 8,
            baseline_epochs: 30,
            filter_min_crop: 0.15,
            filter_threshold: 0.9,
            filter_max_patches: 40,
            parts_k: 3,
            svm_c: 1.0,
            svm_epochs: 200,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.target_superclass >= self.data.superclasses {
            return Err(Error::OutOfRange(format!("target superclass {}", self.target_superclass)));
        }
        if self.net_input < 16 || !self.net_input.is_multiple_of(8) {
            return Err(Error::Invalid(format!("net input {} must be a multiple of 8, at least 16", self.net_input)));
        }
        if !(0.0..=1.0).contains(&self.filter_threshold) {
            return Err(Error::OutOfRange(format!("filter threshold {}", self.filter_threshold)));
        }
        if !(self.filter_min_crop > 0.0 && self.filter_min_crop <= 1.0) {
            return Err(Error::OutOfRange(format!("filter min crop {}", self.filter_min_crop)));
        }
        if self.parts_k < 2 {
            return Err(Error::Invalid("part attention needs at least two filter groups".into()));
        }
        Ok(())
    }

    pub fn proposal_params(&self) -> ProposalParams {
        ProposalParams {
            scale_k: self.proposal_k,
            sigma: self.proposal_sigma,
            min_size: self.proposal_min_size,
            ..ProposalParams::default()
        }
    }

    pub fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs,
            batch: self.batch,
            seed,
        }
    }

    pub fn svm_config(&self, seed: u64) -> SvmConfig {
        SvmConfig {
            c: self.svm_c,
            epochs: self.svm_epochs,
            seed,
            ..SvmConfig::default()
        }
    }

    pub fn parents(&self) -> Result<ParentClassSet> {
        ParentClassSet::new([self.target_superclass], self.filternet_classes())
    }

    /// Superclasses plus one background class.
    pub fn filternet_classes(&self) -> usize {
        self.data.superclasses + 1
    }

    /// First 16 hex digits of the SHA-256 of the config and seed.
    pub fn hash(&self, seed: u64) -> String {
        let json = serde_json::to_string(&(self, seed)).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One line of the results report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: String,
    pub top1_error: f64,
    pub n: usize,
    pub config_hash: String,
}

pub const METHODS: [&str; 5] = ["cnn_domain", "multitask", "object_level", "part_level", "two_level"];

/// Random square crops with optional mirroring, fresh per epoch.
pub struct CropSource<'a> {
    pub items: Vec<(&'a Image, usize)>,
    pub min_scale: f64,
    pub max_scale: f64,
    pub side: usize,
    pub seed: u64,
}

fn sample_rng(seed: u64, index: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn random_square(img: &Image, min_scale: f64, max_scale: f64, rng: &mut ChaCha8Rng) -> Rect {
    let short = img.height().min(img.width());
    let scale = if max_scale > min_scale {
        rng.random_range(min_scale..=max_scale)
    } else {
        min_scale
    };
    let s = ((short as f64 * scale).round() as usize).clamp(1, short);
    Rect::new(
        rng.random_range(0..=img.width() - s),
        rng.random_range(0..=img.height() - s),
        s,
        s,
    )
}

fn maybe_flip(img: Image, rng: &mut ChaCha8Rng) -> Image {
    if rng.random_bool(0.5) {
        hflip(&img)
    } else {
        img
    }
}

impl SampleSource for CropSource<'_> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn sample(&self, index: usize, epoch: usize) -> Result<(Image, usize)> {
        let (img, label) = self.items[index];
        let mut rng = sample_rng(self.seed, index, epoch);
        let rect = random_square(img, self.min_scale, self.max_scale, &mut rng);
        let view = warp(img, rect, self.side, self.side)?;
        Ok((maybe_flip(view, &mut rng), label))
    }
}

/// Every FilterNet-selected patch is its own training sample; an image
/// without selections contributes one random 7/8 crop instead.
pub struct PatchSource<'a> {
    pub items: Vec<(&'a Image, usize, Option<Rect>)>,
    pub side: usize,
    pub seed: u64,
}

impl<'a> PatchSource<'a> {
    pub fn new(samples: &[&'a Sample], selections: &[SelectedPatches], side: usize, seed: u64) -> Self {
        let mut items = Vec::new();
        for (s, sel) in samples.iter().zip(selections) {
            if sel.is_empty() {
                items.push((&s.image, s.fine, None));
            }
            items.extend(sel.patches.iter().map(|p| (&s.image, s.fine, Some(p.rect))));
        }
        Self { items, side, seed }
    }
}

impl SampleSource for PatchSource<'_> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn sample(&self, index: usize, epoch: usize) -> Result<(Image, usize)> {
        let (img, label, rect) = self.items[index];
        let mut rng = sample_rng(self.seed, index, epoch);
        let rect = rect.unwrap_or_else(|| random_square(img, 0.875, 0.875, &mut rng));
        let view = warp(img, rect, self.side, self.side)?;
        Ok((maybe_flip(view, &mut rng), label))
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

/// Samples of the target superclass, in split order.
pub fn target_samples<'a>(samples: &'a [Sample], cfg: &PipelineConfig) -> Vec<&'a Sample> {
    samples
        .iter()
        .filter(|s| s.superclass == cfg.target_superclass)
        .collect()
}

pub fn train_filternet(data: &LabeledDataset, cfg: &PipelineConfig, seed: u64, on_epoch: impl FnMut(usize, f64)) -> Result<Network> {
    let bg = data.spec.superclasses;
    let mut items: Vec<(&Image, usize)> = data.train.iter().map(|s| (&s.image, s.superclass)).collect();
    items.extend(data.background.iter().map(|img| (img, bg)));
    let source = CropSource {
        items,
        min_scale: cfg.filter_min_crop,
        max_scale: 1.0,
        side: cfg.net_input,
        seed: stage_seed(seed, 100),
    };
    let init = Network::init(NetworkSpec::mini_filter_net(cfg.net_input, cfg.filternet_classes()), seed)?;
    Ok(train_with(&init, &source, &cfg.train_config(cfg.filter_epochs, seed), on_epoch)?.net)
}

/// Selective-search proposals of at least [`MIN_PROPOSAL_AREA`] pixels.
pub fn propose(img: &Image, cfg: &PipelineConfig) -> Vec<Rect> {
    selective_search(img, &cfg.proposal_params())
        .boxes
        .into_iter()
        .filter(|r| r.area() >= MIN_PROPOSAL_AREA)
        .collect()
}

pub fn select(filternet: &Network, img: &Image, proposals: &[Rect], cfg: &PipelineConfig) -> Result<SelectedPatches> {
    let scored = score_proposals(filternet, img, proposals, &cfg.parents()?)?;
    Ok(threshold_scored(&scored, cfg.filter_threshold, cfg.filter_max_patches))
}

pub fn train_domainnet(
    samples: &[&Sample],
    selections: &[SelectedPatches],
    cfg: &PipelineConfig,
    seed: u64,
    on_epoch: impl FnMut(usize, f64),
) -> Result<Network> {
    let source = PatchSource::new(samples, selections, cfg.net_input, stage_seed(seed, 100));
    let spec = NetworkSpec::mini_domain_net(cfg.net_input, cfg.data.fine_per_superclass);
    let init = Network::init(spec, seed)?;
    Ok(train_with(&init, &source, &cfg.train_config(cfg.domain_epochs, seed), on_epoch)?.net)
}

/// Whole-image baseline trained on random 7/8 crops.
pub fn train_cnn_domain(samples: &[&Sample], cfg: &PipelineConfig, seed: u64, on_epoch: impl FnMut(usize, f64)) -> Result<Network> {
    let source = CropSource {
        items: samples.iter().map(|s| (&s.image, s.fine)).collect(),
        min_scale: 0.875,
        max_scale: 0.875,
        side: cfg.net_input,
        seed: stage_seed(seed, 100),
    };
    let spec = NetworkSpec::mini_domain_net(cfg.net_input, cfg.data.fine_per_superclass);
    Ok(train_with(&Network::init(spec, seed)?, &source, &cfg.train_config(cfg.baseline_epochs, seed), on_epoch)?.net)
}

/// Whole-image baseline over the fine classes of every superclass.
pub fn train_multitask(data: &LabeledDataset, cfg: &PipelineConfig, seed: u64, on_epoch: impl FnMut(usize, f64)) -> Result<Network> {
    if data.spec.superclasses < 2 {
        return Err(Error::Invalid("multitask baseline needs at least two superclasses".into()));
    }
    let fps = data.spec.fine_per_superclass;
    let source = CropSource {
        items: data.train.iter().map(|s| (&s.image, s.global_fine(fps))).collect(),
        min_scale: 0.875,
        max_scale: 0.875,
        side: cfg.net_input,
        seed: stage_seed(seed, 100),
    };
    let spec = NetworkSpec::mini_domain_net(cfg.net_input, data.spec.fine_classes());
    Ok(train_with(&Network::init(spec, seed)?, &source, &cfg.train_config(cfg.baseline_epochs, seed), on_epoch)?.net)
}

/// Keeps the probabilities of classes `range` and renormalizes them.
pub fn restrict(dist: &Distribution, range: std::ops::Range<usize>) -> Result<Distribution> {
    let part = &dist.probs()[range];
    let total: f64 = part.iter().sum();
    if total <= 0.0 {
        return Ok(Distribution::uniform(part.len()));
    }
    Distribution::new(part.iter().map(|p| (p / total).min(1.0)).collect())
}

pub fn ten_view_prediction(net: &Network, img: &Image) -> Result<Distribution> {
    predict_multiview(net, &fixed_views(net, img)?)
}

pub fn multitask_prediction(net: &Network, img: &Image, cfg: &PipelineConfig) -> Result<Distribution> {
    let fps = cfg.data.fine_per_superclass;
    let start = cfg.target_superclass * fps;
    restrict(&ten_view_prediction(net, img)?, start..start + fps)
}

pub fn object_prediction(domainnet: &Network, img: &Image, selected: &SelectedPatches) -> Result<Distribution> {
    predict_multiview(domainnet, &attended_views(domainnet, img, selected)?)
}

/// Best hit of every filter group and the FC1 feature of each hit's patch.
pub fn group_hits_and_features(net: &Network, bank: &PartDetectorBank, img: &Image, proposals: &[Rect]) -> Result<(Vec<PartHit>, Vec<Vec<f64>>)> {
    let hits = detect_all_groups(net, bank, img, proposals)?;
    let feats = hits
        .iter()
        .map(|h| net.extract_feature(&warp_to_input(net, img, h.rect)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((hits, feats))
}

/// Concatenated features of the non-noise groups, in group order.
pub fn concat_parts(per_group: &[Vec<f64>], bank: &PartDetectorBank) -> Vec<f64> {
    bank.part_groups()
        .iter()
        .flat_map(|&g| per_group[g].iter().copied())
        .collect()
}

pub fn part_detection(hits: &[PartHit], bank: &PartDetectorBank) -> PartDetection {
    PartDetection {
        parts: hits
            .iter()
            .filter(|h| Some(h.group) != bank.noise_group())
            .copied()
            .collect(),
    }
}

/// Everything a full run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub config_hash: String,
    pub records: Vec<MethodRecord>,
    pub alpha: f64,
    pub group_accuracies: Vec<f64>,
    pub filternet: Network,
    pub domainnet: Network,
    pub cnn_domain: Network,
    pub multitask: Network,
    pub bank: PartDetectorBank,
    pub part_svm: LinearSvmModel,
    /// Per training stage, the mean loss of every epoch.
    pub losses: Vec<(String, Vec<f64>)>,
    /// Part detections on the target superclass's test images, in order.
    pub test_detections: Vec<PartDetection>,
    /// Mean number of selected patches per target training image.
    pub mean_selected: f64,
    /// Fraction of target training images with no selected patch.
    pub empty_selection_rate: f64,
}

/// Target-superclass samples of one split with their proposals and selections.
pub struct SplitState<'a> {
    pub samples: Vec<&'a Sample>,
    pub proposals: Vec<Vec<Rect>>,
    pub selections: Vec<SelectedPatches>,
}

impl SplitState<'_> {
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.fine).collect()
    }
}

/// Proposals for the target-superclass samples of `samples`, nothing selected yet.
pub fn propose_split<'a>(samples: &'a [Sample], cfg: &PipelineConfig) -> SplitState<'a> {
    let samples = target_samples(samples, cfg);
    let proposals: Vec<Vec<Rect>> = samples.iter().map(|s| propose(&s.image, cfg)).collect();
    SplitState {
        selections: vec![SelectedPatches::default(); samples.len()],
        samples,
        proposals,
    }
}

/// Proposes and selects on the target-superclass samples of `samples`.
pub fn prepare_split<'a>(samples: &'a [Sample], filternet: &Network, cfg: &PipelineConfig) -> Result<SplitState<'a>> {
    let mut split = propose_split(samples, cfg);
    split.selections = stage(
        "select",
        split
            .samples
            .iter()
            .zip(&split.proposals)
            .map(|(s, p)| select(filternet, &s.image, p, cfg))
            .collect::<Result<Vec<_>>>(),
    )?;
    Ok(split)
}

/// Per image, the best hit of every filter group and the features of their patches.
pub struct PartView {
    pub hits: Vec<Vec<PartHit>>,
    pub features: Vec<Vec<Vec<f64>>>,
}

pub fn part_view(domainnet: &Network, bank: &PartDetectorBank, split: &SplitState) -> Result<PartView> {
    let mut hits = Vec::with_capacity(split.samples.len());
    let mut features = Vec::with_capacity(split.samples.len());
    for (s, p) in split.samples.iter().zip(&split.proposals) {
        let props = if p.is_empty() { vec![s.image.full_rect()] } else { p.clone() };
        let (h, f) = stage("detect", group_hits_and_features(domainnet, bank, &s.image, &props))?;
        hits.push(h);
        features.push(f);
    }
    Ok(PartView { hits, features })
}

/// Marks the group whose single-part classifier is least accurate on validation as noise.
pub fn identify_noise(
    bank: &PartDetectorBank,
    train: (&PartView, &[usize]),
    val: (&PartView, &[usize]),
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(PartDetectorBank, Vec<f64>)> {
    let accuracies = stage(
        "identify-noise",
        group_accuracies_from_features(
            &train.0.features,
            train.1,
            &val.0.features,
            val.1,
            bank.k(),
            &cfg.svm_config(stage_seed(seed, stages::SVM)),
        ),
    )?;
    let noise = noise_from_accuracies(&accuracies)?;
    Ok((bank.clone().with_noise_group(Some(noise))?, accuracies))
}

fn concat_view(view: &PartView, bank: &PartDetectorBank) -> Vec<Vec<f64>> {
    view.features.iter().map(|g| concat_parts(g, bank)).collect()
}

/// The part-level SVM and its per-epoch objective.
pub fn train_part_svm(
    bank: &PartDetectorBank,
    train: &PartView,
    labels: &[usize],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(LinearSvmModel, Vec<f64>)> {
    let cfg = cfg.svm_config(stage_seed(seed, stages::SVM));
    let out = stage("train-svm", svm_train_standardized(&concat_view(train, bank), labels, &cfg))?;
    Ok((out.model, out.objective))
}

/// Trained artifacts that evaluation reads. Missing baselines are skipped.
pub struct EvalModels<'a> {
    pub domainnet: &'a Network,
    pub bank: &'a PartDetectorBank,
    pub part_svm: &'a LinearSvmModel,
    pub cnn_domain: Option<&'a Network>,
    pub multitask: Option<&'a Network>,
}

pub struct Evaluation {
    pub records: Vec<MethodRecord>,
    pub alpha: f64,
    pub test_detections: Vec<PartDetection>,
}

/// Tunes the fusion weight on validation and scores every method on test.
pub fn evaluate(
    models: &EvalModels,
    val: (&SplitState, &PartView),
    test: (&SplitState, &PartView),
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Evaluation> {
    let part_preds = |view: &PartView| -> Result<Vec<Distribution>> {
        concat_view(view, models.bank)
            .iter()
            .map(|f| svm_predict(models.part_svm, f))
            .collect()
    };
    let object_preds = |split: &SplitState| -> Result<Vec<Distribution>> {
        split
            .samples
            .iter()
            .zip(&split.selections)
            .map(|(s, sel)| object_prediction(models.domainnet, &s.image, sel))
            .collect()
    };
    let whole_image = |f: &dyn Fn(&Image) -> Result<Distribution>| -> Result<Vec<Distribution>> {
        test.0.samples.iter().map(|s| f(&s.image)).collect()
    };
    let val_part = stage("evaluate", part_preds(val.1))?;
    let test_part = stage("evaluate", part_preds(test.1))?;
    let val_obj = stage("evaluate", object_preds(val.0))?;
    let test_obj = stage("evaluate", object_preds(test.0))?;
    let fusion = stage("tune-alpha", tune_alpha(&val_obj, &val_part, &val.0.labels()))?;
    let test_fused = test_obj
        .iter()
        .zip(&test_part)
        .map(|(o, p)| fuse(o, p, &fusion))
        .collect::<Result<Vec<_>>>()?;
    let test_cnn = match models.cnn_domain {
        Some(net) => Some(stage("evaluate", whole_image(&|img| ten_view_prediction(net, img)))?),
        None => None,
    };
    let test_multi = match models.multitask {
        Some(net) => Some(stage("evaluate", whole_image(&|img| multitask_prediction(net, img, cfg)))?),
        None => None,
    };

    let labels = test.0.labels();
    let config_hash = cfg.hash(seed);
    let mut records = Vec::new();
    for (preds, method) in [test_cnn.as_ref(), test_multi.as_ref(), Some(&test_obj), Some(&test_part), Some(&test_fused)]
        .into_iter()
        .zip(METHODS)
    {
        if let Some(preds) = preds {
            records.push(MethodRecord {
                method: method.to_string(),
                top1_error: top1_error(preds, &labels)?,
                n: labels.len(),
                config_hash: config_hash.clone(),
            });
        }
    }
    Ok(Evaluation {
        records,
        alpha: fusion.alpha,
        test_detections: test.1.hits.iter().map(|h| part_detection(h, models.bank)).collect(),
    })
}

/// Runs every stage on a freshly generated dataset.
pub fn run_pipeline(cfg: &PipelineConfig, seed: u64, log: &mut dyn FnMut(&str)) -> Result<(LabeledDataset, PipelineOutcome)> {
    cfg.validate()?;
    let data = stage("gen-data", gen_synthetic(&cfg.data, stage_seed(seed, stages::DATA)))?;
    let outcome = run_on_dataset(&data, cfg, seed, log)?;
    Ok((data, outcome))
}

pub fn run_on_dataset(data: &LabeledDataset, cfg: &PipelineConfig, seed: u64, log: &mut dyn FnMut(&str)) -> Result<PipelineOutcome> {
    cfg.validate()?;
    if data.spec != cfg.data {
        return Err(Error::Invalid("dataset was generated from a different spec".into()));
    }
    let mut losses = Vec::new();
    let mut record_losses = |name: &str, l: Vec<f64>| losses.push((name.to_string(), l));

    log("training filternet");
    let mut l = vec![];
    let filternet = stage(
        "train-filternet",
        train_filternet(data, cfg, stage_seed(seed, stages::FILTERNET), |_, v| l.push(v)),
    )?;
    record_losses("filternet", l);

    log("proposing and selecting");
    let train = prepare_split(&data.train, &filternet, cfg)?;
    let val = prepare_split(&data.val, &filternet, cfg)?;
    let test = prepare_split(&data.test, &filternet, cfg)?;
    let selected: usize = train.selections.iter().map(SelectedPatches::len).sum();
    let mean_selected = selected as f64 / train.samples.len() as f64;
    let empty_selection_rate =
        train.selections.iter().filter(|s| s.is_empty()).count() as f64 / train.samples.len() as f64;
    log(&format!("mean selected patches {mean_selected:.2}, images without selection {empty_selection_rate:.3}"));

    log("training domainnet");
    let mut l = vec![];
    let domainnet = stage(
        "train-domainnet",
        train_domainnet(&train.samples, &train.selections, cfg, stage_seed(seed, stages::DOMAINNET), |_, v| l.push(v)),
    )?;
    record_losses("domainnet", l);

    log("training baselines");
    let mut l = vec![];
    let cnn_domain = stage(
        "train-cnn-domain",
        train_cnn_domain(&train.samples, cfg, stage_seed(seed, stages::CNN_DOMAIN), |_, v| l.push(v)),
    )?;
    record_losses("cnn_domain", l);
    let mut l = vec![];
    let multitask = stage(
        "train-multitask",
        train_multitask(data, cfg, stage_seed(seed, stages::MULTITASK), |_, v| l.push(v)),
    )?;
    record_losses("multitask", l);

    log("building part detectors");
    let bank = stage(
        "build-parts",
        PartDetectorBank::build(&domainnet, domainnet.spec().part_layer, cfg.parts_k, stage_seed(seed, stages::PARTS)),
    )?;
    let train_view = part_view(&domainnet, &bank, &train)?;
    let val_view = part_view(&domainnet, &bank, &val)?;
    let test_view = part_view(&domainnet, &bank, &test)?;
    let (bank, group_accuracies) = identify_noise(
        &bank,
        (&train_view, &train.labels()),
        (&val_view, &val.labels()),
        cfg,
        seed,
    )?;
    log(&format!("group accuracies {group_accuracies:?}, noise group {:?}", bank.noise_group()));

    log("training part svm");
    let (part_svm, objective) = train_part_svm(&bank, &train_view, &train.labels(), cfg, seed)?;
    record_losses("part_svm", objective);

    log("evaluating");
    let models = EvalModels {
        domainnet: &domainnet,
        bank: &bank,
        part_svm: &part_svm,
        cnn_domain: Some(&cnn_domain),
        multitask: Some(&multitask),
    };
    let eval = evaluate(&models, (&val, &val_view), (&test, &test_view), cfg, seed)?;

    Ok(PipelineOutcome {
        config_hash: cfg.hash(seed),
        records: eval.records,
        alpha: eval.alpha,
        group_accuracies,
        filternet,
        domainnet,
        cnn_domain,
        multitask,
        test_detections: eval.test_detections,
        bank,
        part_svm,
        losses,
        mean_selected,
        empty_selection_rate,
    })
}

/// Fraction of samples whose top-scoring part hit overlaps a ground-truth
/// part with IoU above `min_iou`.
pub fn part_localization_rate(samples: &[&Sample], detections: &[PartDetection], min_iou: f64) -> Result<f64> {
    if samples.len() != detections.len() {
        return Err(Error::LengthMismatch(samples.len(), detections.len()));
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = samples
        .iter()
        .zip(detections)
        .filter(|(s, d)| {
            d.best()
                .is_some_and(|h| s.part_boxes.iter().any(|p| p.iou(&h.rect) > min_iou))
        })
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

/// JSON-lines report, one record per line.
pub fn records_to_jsonl(records: &[MethodRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(1, 1), stage_seed(1, 2));
        assert_ne!(stage_seed(1, 1), stage_seed(2, 1));
        assert_eq!(stage_seed(3, 4), stage_seed(3, 4));
    }

    #[test]
    fn restriction_renormalizes() {
        let d = Distribution::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let r = restrict(&d, 2..4).unwrap();
        assert!((r.probs()[0] - 0.3 / 0.7).abs() < 1e-12);
        assert!((r.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let z = Distribution::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(restrict(&z, 1..3).unwrap(), Distribution::uniform(2));
    }

    #[test]
    fn crop_source_is_deterministic_and_sized() {
        let data = gen_synthetic(
            &SyntheticSpec {
                train_per_class: 1,
                val_per_class: 1,
                test_per_class: 1,
                background_train: 0,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let src = CropSource {
            items: data.train.iter().map(|s| (&s.image, s.fine)).collect(),
            min_scale: 0.3,
            max_scale: 1.0,
            side: 32,
            seed: 9,
        };
        let (a, _) = src.sample(2, 1).unwrap();
        assert_eq!(a, src.sample(2, 1).unwrap().0);
        assert_ne!(a, src.sample(2, 2).unwrap().0);
        assert_eq!((a.height(), a.width()), (32, 32));
    }

    #[test]
    fn config_hash_tracks_changes() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.hash(1).len(), 16);
        assert_eq!(cfg.hash(1), cfg.hash(1));
        assert_ne!(cfg.hash(1), cfg.hash(2));
        let other = PipelineConfig {
            filter_threshold: 0.8,
            ..cfg.clone()
        };
        assert_ne!(cfg.hash(1), other.hash(1));
    }
}
