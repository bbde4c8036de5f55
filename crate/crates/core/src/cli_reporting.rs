//! Configuration files, report tables, loss records and the numeric self-check.

use std::collections::HashSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::convnet::{loss_and_gradients, LayerSpec, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::harness::{MethodRecord, PipelineConfig};
use crate::imaging::Image;
use crate::numerics::{finite_diff_grad, sym_eigen, Matrix};
use crate::part_attention::{spectral_cluster, SimilarityMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Str,
    Bool,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Int => "non-negative integer",
            Kind::Float => "number",
            Kind::Str => "string",
            Kind::Bool => "true or false",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(u64),
    Float(f64),
    Str(String),
    Bool(bool),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v:?}"),
            Value::Str(v) => f.write_str(v),
            Value::Bool(v) => write!(f, "{v}"),
        }
    }
}

trait Typed: Sized {
    fn from_value(v: Value) -> Option<Self>;
    fn to_value(&self) -> Value;
}

impl Typed for usize {
    fn from_value(v: Value) -> Option<Self> {
        match v {
            Value::Int(i) => usize::try_from(i).ok(),
            _ => None,
        }
    }
    fn to_value(&self) -> Value {
        Value::Int(*self as u64)
    }
}

impl Typed for f64 {
    fn from_value(v: Value) -> Option<Self> {
        match v {
            Value::Float(x) => Some(x),
            _ => None,
        }
    }
    fn to_value(&self) -> Value {
        Value::Float(*self)
    }
}

impl Typed for bool {
    fn from_value(v: Value) -> Option<Self> {
        match v {
            Value::Bool(b) => Some(b),
            _ => None,
        }
    }
    fn to_value(&self) -> Value {
        Value::Bool(*self)
    }
}

impl Typed for String {
    fn from_value(v: Value) -> Option<Self> {
        match v {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }
    fn to_value(&self) -> Value {
        Value::Str(self.clone())
    }
}

/// Everything a run reads from its configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub pipeline: PipelineConfig,
    /// Log stage progress to stderr.
    pub verbose: bool,
    /// File name of the report that `run-all` writes.
    pub report_file: String,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            verbose: false,
            report_file: "report.jsonl".into(),
        }
    }
}

macro_rules! schema {
    ($($key:literal, $kind:ident, $($path:ident).+;)*) => {
        /// Every accepted key with its type.
        pub const SCHEMA: &[(&str, Kind)] = &[$(($key, Kind::$kind)),*];

        fn assign(cfg: &mut Config, key: &str, value: Value) -> Option<()> {
            match key {
                $($key => cfg.$($path).+ = Typed::from_value(value)?,)*
                _ => return None,
            }
            Some(())
        }

        fn entries(cfg: &Config) -> Vec<(&'static str, Value)> {
            vec![$(($key, Typed::to_value(&cfg.$($path).+))),*]
        }
    };
}

schema! {
    "data.image_size", Int, pipeline.data.image_size;
    "data.superclasses", Int, pipeline.data.superclasses;
    "data.fine_per_superclass", Int, pipeline.data.fine_per_superclass;
    "data.parts", Int, pipeline.data.parts;
    "data.object_min", Float, pipeline.data.object_min;
    "data.object_max", Float, pipeline.data.object_max;
    "data.part_scale", Float, pipeline.data.part_scale;
    "data.clutter", Float, pipeline.data.clutter;
    "data.noise", Float, pipeline.data.noise;
    "data.texture_contrast", Float, pipeline.data.texture_contrast;
    "data.train_per_class", Int, pipeline.data.train_per_class;
    "data.val_per_class", Int, pipeline.data.val_per_class;
    "data.test_per_class", Int, pipeline.data.test_per_class;
    "data.background_train", Int, pipeline.data.background_train;
    "target_superclass", Int, pipeline.target_superclass;
    "net.input", Int, pipeline.net_input;
    "proposal.k", Float, pipeline.proposal_k;
    "proposal.sigma", Float, pipeline.proposal_sigma;
    "proposal.min_size", Int, pipeline.proposal_min_size;
    "train.lr", Float, pipeline.lr;
    "train.momentum", Float, pipeline.momentum;
    "train.weight_decay", Float, pipeline.weight_decay;
    "train.batch", Int, pipeline.batch;
    "train.filter_epochs", Int, pipeline.filter_epochs;
    "train.domain_epochs", Int, pipeline.domain_epochs;
    "train.baseline_epochs", Int, pipeline.baseline_epochs;
    "filter.min_crop", Float, pipeline.filter_min_crop;
    "filter.threshold", Float, pipeline.filter_threshold;
    "filter.max_patches", Int, pipeline.filter_max_patches;
    "parts.k", Int, pipeline.parts_k;
    "svm.c", Float, pipeline.svm_c;
    "svm.epochs", Int, pipeline.svm_epochs;
    "log.verbose", Bool, verbose;
    "report.file", Str, report_file;
}

fn parse_value(raw: &str, kind: Kind) -> Option<Value> {
    match kind {
        Kind::Int => raw.parse().ok().map(Value::Int),
        Kind::Float => raw.parse::<f64>().ok().filter(|x| x.is_finite()).map(Value::Float),
        Kind::Bool => raw.parse().ok().map(Value::Bool),
        Kind::Str => {
            let unquoted = raw
                .strip_prefix('"')
                .and_then(|r| r.strip_suffix('"'))
                .unwrap_or(raw);
            (!unquoted.is_empty()).then(|| Value::Str(unquoted.to_string()))
        }
    }
}

/// Parses `key = value` lines over the defaults. `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Config> {
    let mut cfg = Config::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| Error::Config { line, msg };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, found `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let kind = SCHEMA
            .iter()
            .find(|(k, _)| *k == key)
            .map(|&(_, kind)| kind)
            .ok_or_else(|| err(format!("unknown key `{key}`")))?;
        if !seen.insert(key) {
            return Err(err(format!("duplicate key `{key}`")));
        }
        let typed = parse_value(value, kind).ok_or_else(|| err(format!("`{key}` expects a {kind}, found `{value}`")))?;
        assign(&mut cfg, key, typed).ok_or_else(|| err(format!("`{key}` expects a {kind}, found `{value}`")))?;
    }
    Ok(cfg)
}

/// Every key with its current value, in schema order; parses back to `cfg`.
pub fn render_config(cfg: &Config) -> String {
    entries(cfg)
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

/// Parses a JSON-lines report; blank lines are skipped.
pub fn parse_report(jsonl: &str) -> Result<Vec<MethodRecord>> {
    let mut out = Vec::new();
    for (i, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: MethodRecord = serde_json::from_str(line).map_err(|e| Error::Report {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&record.top1_error) {
            return Err(Error::Report {
                line: i + 1,
                msg: format!("top1_error {} outside [0, 1]", record.top1_error),
            });
        }
        out.push(record);
    }
    Ok(out)
}

/// Fixed-width table of methods and top-1 errors, lowest error first.
pub fn render_report(jsonl: &str) -> Result<String> {
    let mut records = parse_report(jsonl)?;
    records.sort_by(|a, b| a.top1_error.total_cmp(&b.top1_error));
    let width = records.iter().map(|r| r.method.len()).max().unwrap_or(0).max("method".len());
    let mut out = format!("{:<width$}  {:>10}  {:>6}\n", "method", "top1_error", "n");
    for r in &records {
        out += &format!("{:<width$}  {:>10.4}  {:>6}\n", r.method, r.top1_error, r.n);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

/// One `{epoch, loss}` record per line, epochs counted from 1.
pub fn losses_to_jsonl(losses: &[f64]) -> String {
    losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| serde_json::to_string(&EpochLoss { epoch: i + 1, loss }).expect("loss serializes") + "\n")
        .collect()
}

/// Outcome of one self-check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

/// Largest relative gap between backprop and central differences on a random mini-net.
pub fn gradient_check(seed: u64) -> Result<f64> {
    let spec = NetworkSpec {
        input: (6, 6, 3),
        classes: 3,
        layers: vec![
            LayerSpec::conv3(3),
            LayerSpec::Relu,
            LayerSpec::pool2(),
            LayerSpec::Fc { out_units: 5 },
            LayerSpec::Relu,
            LayerSpec::Fc { out_units: 3 },
            LayerSpec::Softmax,
        ],
        part_layer: 0,
    };
    let net = Network::init(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let imgs = (0..3)
        .map(|_| Image::from_fn(6, 6, 3, |_, _, _| rng.random::<f64>()))
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<(&Image, usize)> = imgs.iter().zip([0, 1, 2]).collect();
    let analytic = loss_and_gradients(&net, &batch)?.1.flat();
    let mut probe = net.clone();
    let mut failure = None;
    let numeric = finite_diff_grad(
        |x| {
            let r = probe.set_flat_params(x).and_then(|_| loss_and_gradients(&probe, &batch));
            match r {
                Ok((loss, _)) => loss,
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            }
        },
        &net.flat_params(),
        1e-5,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max))
}

/// Worst residual `‖Mv − λv‖∞` and reconstruction error over random symmetric matrices.
pub fn eigen_check(count: usize, max_n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut residual, mut recon) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let n = rng.random_range(1..=max_n);
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.random_range(-1.0..1.0);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        let eig = sym_eigen(&m)?;
        for (k, &l) in eig.values.iter().enumerate() {
            let v = eig.vector(k);
            let mv = m.mul_vec(&v)?;
            residual = mv.iter().zip(&v).map(|(a, b)| (a - l * b).abs()).fold(residual, f64::max);
        }
        recon = recon.max(eig.reconstruct().max_abs_diff(&m));
    }
    Ok((residual, recon))
}

/// Fraction of planted block partitions that spectral clustering recovers exactly.
pub fn clustering_check(count: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut recovered = 0;
    for trial in 0..count {
        let k = rng.random_range(2..=3);
        let n = rng.random_range(2 * k..=12);
        let truth: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        let mut m = Matrix::identity(n);
        for i in 0..n {
            for j in i + 1..n {
                let v = if truth[i] == truth[j] {
                    rng.random_range(0.8..1.0)
                } else {
                    rng.random_range(-0.2..0.2)
                };
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        let got = spectral_cluster(&SimilarityMatrix::new(m)?, k, seed + trial as u64)?;
        let same = |a: &[usize]| -> Vec<bool> { (0..n * n).map(|p| a[p / n] == a[p % n]).collect() };
        if same(&got) == same(&truth) {
            recovered += 1;
        }
    }
    Ok(recovered as f64 / count as f64)
}

/// The numeric oracle suite behind `selfcheck`.
pub fn selfcheck(seed: u64) -> Result<Vec<Check>> {
    let grad = gradient_check(seed)?;
    let (residual, recon) = eigen_check(30, 16, seed)?;
    let planted = clustering_check(20, seed)?;
    Ok(vec![
        Check {
            name: "gradient",
            passed: grad < 1e-4,
            detail: format!("max relative error {grad:.2e}"),
        },
        Check {
            name: "eigen",
            passed: residual < 1e-8 && recon < 1e-7,
            detail: format!("residual {residual:.2e}, reconstruction {recon:.2e}"),
        },
        Check {
            name: "clustering",
            passed: planted >= 0.95,
            detail: format!("planted partitions recovered {:.0}%", planted * 100.0),
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(parse_config("").unwrap(), Config::default());
        assert_eq!(parse_config("# nothing\n\n   \n").unwrap(), Config::default());
    }

    #[test]
    fn threshold_parses() {
        let cfg = parse_config("filter.threshold = 0.9\n").unwrap();
        assert_eq!(cfg.pipeline.filter_threshold, 0.9);
        assert_eq!(Config::default().pipeline.filter_threshold, 0.9);
        let cfg = parse_config("filter.threshold = 0.75  # looser\nlog.verbose = true\nreport.file = \"r.jsonl\"").unwrap();
        assert_eq!(cfg.pipeline.filter_threshold, 0.75);
        assert!(cfg.verbose);
        assert_eq!(cfg.report_file, "r.jsonl");
    }

    #[test]
    fn config_errors_name_the_line() {
        let cases = [
            ("# c\nfilter.threshold = banana\n", 2, "expects a number"),
            ("bogus = 1\n", 1, "unknown key"),
            ("svm.c = 1\n\nsvm.c = 2\n", 3, "duplicate"),
            ("train.batch = -3\n", 1, "integer"),
            ("train.batch = 2.5\n", 1, "integer"),
            ("log.verbose = yes\n", 1, "true or false"),
            ("svm.c\n", 1, "key = value"),
            ("svm.c = inf\n", 1, "number"),
        ];
        for (text, want_line, want_msg) in cases {
            match parse_config(text) {
                Err(Error::Config { line, msg }) => {
                    assert_eq!(line, want_line, "{text}");
                    assert!(msg.contains(want_msg), "{msg}");
                }
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn schema_keys_are_unique() {
        let keys: HashSet<_> = SCHEMA.iter().map(|(k, _)| k).collect();
        assert_eq!(keys.len(), SCHEMA.len());
    }

    fn record(method: &str, e: f64) -> MethodRecord {
        MethodRecord {
            method: method.into(),
            top1_error: e,
            n: 200,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn report_table_is_sorted_and_rounded() {
        let records = [
            record("cnn_domain", 0.4012),
            record("multitask", 0.39504),
            record("object_level", 0.30304),
            record("part_level", 0.35201),
            record("two_level", 0.28149),
        ];
        let table = render_report(&crate::harness::records_to_jsonl(&records)).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[0].starts_with("method"));
        let rows: Vec<(&str, f64)> = lines[1..]
            .iter()
            .map(|l| {
                let f: Vec<&str> = l.split_whitespace().collect();
                (f[0], f[1].parse().unwrap())
            })
            .collect();
        let order: Vec<&str> = rows.iter().map(|r| r.0).collect();
        assert_eq!(order, ["two_level", "object_level", "part_level", "multitask", "cnn_domain"]);
        for (name, shown) in rows {
            let r = records.iter().find(|r| r.method == name).unwrap();
            assert_eq!(format!("{shown:.4}"), format!("{:.4}", r.top1_error));
        }
        let widths: HashSet<usize> = lines.iter().map(|l| l.len()).collect();
        assert_eq!(widths.len(), 1);
    }

    #[test]
    fn malformed_report_names_line() {
        let good = crate::harness::records_to_jsonl(&[record("a", 0.1)]);
        let text = format!("{good}{{\"method\": \"b\"}}\n");
        assert!(matches!(render_report(&text), Err(Error::Report { line: 2, .. })));
        let text = format!("{good}\n{}", crate::harness::records_to_jsonl(&[record("c", 1.5)]));
        assert!(matches!(render_report(&text), Err(Error::Report { line: 3, .. })));
    }

    #[test]
    fn loss_records() {
        assert_eq!(losses_to_jsonl(&[0.5, 0.25]), "{\"epoch\":1,\"loss\":0.5}\n{\"epoch\":2,\"loss\":0.25}\n");
    }

    #[test]
    fn selfcheck_passes() {
        for c in selfcheck(3).unwrap() {
            assert!(c.passed, "{c}");
        }
    }

    proptest! {
        #[test]
        fn rendered_config_parses_back(
            threshold in 0.0f64..=1.0,
            c in 1e-6f64..100.0,
            batch in 1usize..512,
            verbose: bool,
            name in "[a-z]{1,8}\\.jsonl",
        ) {
            let mut cfg = Config::default();
            cfg.pipeline.filter_threshold = threshold;
            cfg.pipeline.svm_c = c;
            cfg.pipeline.batch = batch;
            cfg.verbose = verbose;
            cfg.report_file = name;
            prop_assert_eq!(parse_config(&render_config(&cfg)).unwrap(), cfg);
        }
    }
}
