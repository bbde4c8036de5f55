//! One-vs-rest linear SVM, softmax calibration of its margins, late fusion of
//! two prediction streams and top-1 error.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{argmax, dot, softmax, Distribution};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    /// Regularization strength of the `c/2 |w|^2` term; the step size at
    /// step `t` is `1 / (c t)`.
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
    pub batch: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            epochs: 200,
            seed: 0,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvmModel {
    pub dim: usize,
    /// One weight row per class.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearSvmModel {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn margins(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.dim {
            return Err(Error::LengthMismatch(self.dim, feature.len()));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, feature) + b)
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct SvmTrainOutcome {
    pub model: LinearSvmModel,
    /// Mean over classes of the regularized hinge objective after each epoch.
    pub objective: Vec<f64>,
}

fn binary_objective(w: &[f64], b: f64, c: f64, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    let hinge: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum();
    0.5 * c * dot(w, w) + hinge / xs.len() as f64
}

/// Minibatch subgradient descent on one class-vs-rest problem. An epoch
/// whose end objective is worse than the last accepted one is rolled back
/// and later steps are halved, so the reported objective never increases.
fn train_binary(xs: &[Vec<f64>], ys: &[f64], config: &SvmConfig, orders: &[Vec<usize>]) -> (Vec<f64>, f64, Vec<f64>) {
    let dim = xs[0].len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut best = binary_objective(&w, b, config.c, xs, ys);
    let mut damping = 1.0;
    let mut step = 0usize;
    let mut history = Vec::with_capacity(config.epochs);
    for order in orders {
        let (mut cw, mut cb) = (w.clone(), b);
        for chunk in order.chunks(config.batch.max(1)) {
            step += 1;
            let eta = damping / (config.c * step as f64);
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for &i in chunk {
                let (x, y) = (&xs[i], ys[i]);
                if y * (dot(&cw, x) + cb) < 1.0 {
                    for (g, v) in gw.iter_mut().zip(x) {
                        *g += y * v;
                    }
                    gb += y;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            let shrink = (1.0 - eta * config.c).max(0.0);
            for (wv, g) in cw.iter_mut().zip(&gw) {
                *wv = shrink * *wv + eta * inv * g;
            }
            cb += eta * inv * gb;
        }
        let obj = binary_objective(&cw, cb, config.c, xs, ys);
        if obj.is_finite() && obj <= best {
            w = cw;
            b = cb;
            best = obj;
        } else {
            damping *= 0.5;
        }
        history.push(best);
    }
    (w, b, history)
}

pub fn svm_train(features: &[Vec<f64>], labels: &[usize], config: &SvmConfig) -> Result<SvmTrainOutcome> {
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch(features.len(), labels.len()));
    }
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(config.c > 0.0 && config.c.is_finite()) {
        return Err(Error::Invalid(format!("svm regularization {}", config.c)));
    }
    let dim = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::LengthMismatch(dim, f.len()));
    }
    if let Some(i) = features.iter().flatten().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let classes = labels.iter().max().expect("non-empty") + 1;
    let present = (0..classes).filter(|c| labels.contains(c)).count();
    if present < 2 {
        return Err(Error::SingleClass);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut idx: Vec<usize> = (0..features.len()).collect();
    let orders: Vec<Vec<usize>> = (0..config.epochs)
        .map(|_| {
            idx.shuffle(&mut rng);
            idx.clone()
        })
        .collect();

    let mut weights = Vec::with_capacity(classes);
    let mut bias = Vec::with_capacity(classes);
    let mut objective = vec![0.0; config.epochs];
    for class in 0..classes {
        let ys: Vec<f64> = labels
            .iter()
            .map(|&l| if l == class { 1.0 } else { -1.0 })
            .collect();
        let (w, b, hist) = train_binary(features, &ys, config, &orders);
        for (o, h) in objective.iter_mut().zip(hist) {
            *o += h / classes as f64;
        }
        weights.push(w);
        bias.push(b);
    }
    Ok(SvmTrainOutcome {
        model: LinearSvmModel { dim, weights, bias },
        objective,
    })
}

/// Per-dimension affine map to zero mean and unit variance on the data it was fit on.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Reciprocal standard deviation; 1 for constant dimensions.
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let first = features.first().ok_or(Error::EmptyDataset)?;
        let dim = first.len();
        if let Some(f) = features.iter().find(|f| f.len() != dim) {
            return Err(Error::LengthMismatch(dim, f.len()));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scale = var
            .iter()
            .map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, feature: &[f64]) -> Vec<f64> {
        feature
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    /// A model on raw features equivalent to `model` applied after this map.
    pub fn fold_into(&self, model: &LinearSvmModel) -> Result<LinearSvmModel> {
        if model.dim != self.mean.len() {
            return Err(Error::LengthMismatch(model.dim, self.mean.len()));
        }
        let mut weights = Vec::with_capacity(model.classes());
        let mut bias = Vec::with_capacity(model.classes());
        for (w, b) in model.weights.iter().zip(&model.bias) {
            let scaled: Vec<f64> = w.iter().zip(&self.scale).map(|(w, s)| w * s).collect();
            bias.push(b - dot(&scaled, &self.mean));
            weights.push(scaled);
        }
        Ok(LinearSvmModel {
            dim: model.dim,
            weights,
            bias,
        })
    }
}

/// Trains on standardized features and returns the model folded back onto raw features.
pub fn svm_train_standardized(features: &[Vec<f64>], labels: &[usize], config: &SvmConfig) -> Result<SvmTrainOutcome> {
    let st = Standardizer::fit(features)?;
    let scaled: Vec<Vec<f64>> = features.iter().map(|f| st.apply(f)).collect();
    let out = svm_train(&scaled, labels, config)?;
    Ok(SvmTrainOutcome {
        model: st.fold_into(&out.model)?,
        objective: out.objective,
    })
}

/// Softmax over the per-class margins.
pub fn svm_predict(model: &LinearSvmModel, feature: &[f64]) -> Result<Distribution> {
    softmax(&model.margins(feature)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// Weight of the object-level stream.
    pub alpha: f64,
}

impl FusionConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::OutOfRange(format!("alpha {alpha}")));
        }
        Ok(Self { alpha })
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

/// `alpha * p_obj + (1 - alpha) * p_part`.
pub fn fuse(p_obj: &Distribution, p_part: &Distribution, cfg: &FusionConfig) -> Result<Distribution> {
    if p_obj.len() != p_part.len() {
        return Err(Error::LengthMismatch(p_obj.len(), p_part.len()));
    }
    let a = cfg.alpha;
    let probs = p_obj
        .probs()
        .iter()
        .zip(p_part.probs())
        .map(|(o, p)| (a * o + (1.0 - a) * p).clamp(0.0, 1.0))
        .collect();
    Distribution::new(probs)
}

/// Fraction of predictions whose argmax (lowest index on ties) differs from the label.
pub fn top1_error(predictions: &[Distribution], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let wrong = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &l)| argmax(p.probs()) != l)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

pub const ALPHA_GRID_STEPS: usize = 20;

/// Grid search over `alpha = 0, 0.05, ..., 1` for the lowest validation
/// error; ties go to the alpha nearest 0.5, then to the smaller alpha.
pub fn tune_alpha(val_obj: &[Distribution], val_part: &[Distribution], labels: &[usize]) -> Result<FusionConfig> {
    if val_obj.len() != val_part.len() {
        return Err(Error::LengthMismatch(val_obj.len(), val_part.len()));
    }
    if val_obj.len() != labels.len() {
        return Err(Error::LengthMismatch(val_obj.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut best: Option<(f64, f64)> = None;
    for i in 0..=ALPHA_GRID_STEPS {
        let alpha = i as f64 / ALPHA_GRID_STEPS as f64;
        let cfg = FusionConfig { alpha };
        let fused = val_obj
            .iter()
            .zip(val_part)
            .map(|(o, p)| fuse(o, p, &cfg))
            .collect::<Result<Vec<_>>>()?;
        let err = top1_error(&fused, labels)?;
        let better = match best {
            None => true,
            Some((be, ba)) => err < be || (err == be && (alpha - 0.5).abs() < (ba - 0.5).abs()),
        };
        if better {
            best = Some((err, alpha));
        }
    }
    Ok(FusionConfig {
        alpha: best.expect("grid is non-empty").1,
    })
}

pub const SVM_MAGIC: &[u8; 5] = b"TLSV1";

/// `TLSV1`, u32 LE classes, u32 LE dim, then per class the weights followed
/// by the bias, all f64 LE.
pub fn save_svm(model: &LinearSvmModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 8 * model.classes() * (model.dim + 1));
    out.extend_from_slice(SVM_MAGIC);
    out.extend_from_slice(&(model.classes() as u32).to_le_bytes());
    out.extend_from_slice(&(model.dim as u32).to_le_bytes());
    for (w, b) in model.weights.iter().zip(&model.bias) {
        for v in w.iter().chain(std::iter::once(b)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_svm(bytes: &[u8]) -> Result<LinearSvmModel> {
    let parse = |offset: usize, msg: String| Error::Parse { offset, msg };
    if bytes.len() < 5 || &bytes[..5] != SVM_MAGIC {
        return Err(parse(0, "bad magic".into()));
    }
    if bytes.len() < 13 {
        return Err(parse(bytes.len(), "truncated header".into()));
    }
    let classes = u32::from_le_bytes(bytes[5..9].try_into().expect("four bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().expect("four bytes")) as usize;
    let want = 8 * classes * (dim + 1);
    if bytes.len() - 13 != want {
        return Err(parse(13, format!("expected {want} payload bytes, found {}", bytes.len() - 13)));
    }
    let vals: Vec<f64> = bytes[13..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
        return Err(parse(13 + 8 * i, "non-finite value".into()));
    }
    let mut weights = Vec::with_capacity(classes);
    let mut bias = Vec::with_capacity(classes);
    for row in vals.chunks_exact(dim + 1) {
        weights.push(row[..dim].to_vec());
        bias.push(row[dim]);
    }
    Ok(LinearSvmModel { dim, weights, bias })
}
