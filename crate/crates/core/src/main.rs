use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use tla_core::classify::{load_svm, save_svm};
use tla_core::cli_reporting::{losses_to_jsonl, parse_config, render_config, render_report, selfcheck, Config};
use tla_core::convnet::{load_net, save_net, Network};
use tla_core::harness::{
    evaluate, gen_synthetic, identify_noise, load_dataset, part_detection, part_view, prepare_split, propose,
    propose_split, records_to_jsonl, run_pipeline, save_dataset, select, stage_seed, stages, train_cnn_domain,
    train_domainnet, train_filternet, train_multitask, train_part_svm, EvalModels, LabeledDataset, PipelineConfig,
};
use tla_core::imaging::{read_ppm, Image};
use tla_core::part_attention::{detect_all_groups, PartDetectorBank};

#[derive(Parser)]
#[command(name = "tla", about = "Two-level attention fine-grained classification on synthetic data")]
struct Cli {
    /// Master seed for every random choice.
    #[arg(long, env = "TLA_SEED", default_value_t = 0, global = true)]
    seed: u64,
    /// `key = value` configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    CnnDomain,
    Multitask,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print region proposals of an image as `x y w h`.
    Propose { image: PathBuf },
    /// Print the FilterNet-selected patches of an image as `x y w h score`.
    Select {
        #[arg(long)]
        filternet: PathBuf,
        image: PathBuf,
    },
    /// Train the FilterNet; prints epoch losses as JSON lines.
    TrainFilternet {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the DomainNet on selected patches; prints epoch losses as JSON lines.
    TrainDomainnet {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        filternet: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a whole-image baseline; prints epoch losses as JSON lines.
    TrainBaseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        kind: Baseline,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster DomainNet filters into part detectors and mark the noise group.
    BuildParts {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domainnet: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the best non-noise part hits of an image as `group x y w h score`.
    Detect {
        #[arg(long)]
        domainnet: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        image: PathBuf,
    },
    /// Train the part-level SVM; prints epoch objectives as JSON lines.
    TrainSvm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domainnet: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every available method on the test split; prints the JSON-lines report.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        filternet: PathBuf,
        #[arg(long)]
        domainnet: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        svm: PathBuf,
        #[arg(long)]
        cnn_domain: Option<PathBuf>,
        #[arg(long)]
        multitask: Option<PathBuf>,
    },
    /// Run every stage and write models, bank, SVM and report into a directory.
    RunAll {
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a JSON-lines report as a table.
    Report { report: PathBuf },
    /// Run the numeric oracle checks.
    Selfcheck,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_image(path: &Path) -> Result<Image> {
    read_ppm(&read_file(path)?).with_context(|| format!("decoding {}", path.display()))
}

fn read_net(path: &Path) -> Result<Network> {
    load_net(&read_file(path)?).with_context(|| format!("loading network {}", path.display()))
}

fn read_bank(path: &Path) -> Result<PartDetectorBank> {
    let text = String::from_utf8(read_file(path)?).context("bank file is not UTF-8")?;
    PartDetectorBank::from_text(&text).with_context(|| format!("loading bank {}", path.display()))
}

fn read_data(dir: &Path, cfg: &PipelineConfig) -> Result<LabeledDataset> {
    let data = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if data.spec != cfg.data {
        bail!("dataset {} was generated with a different data configuration", dir.display());
    }
    Ok(data)
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let cfg = match path {
        Some(p) => {
            let text = String::from_utf8(read_file(p)?).context("config is not UTF-8")?;
            parse_config(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => Config::default(),
    };
    cfg.pipeline.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    let cfg = &config.pipeline;
    let seed = cli.seed;
    let verbose = config.verbose;
    let mut log = |msg: &str| {
        if verbose {
            eprintln!("{msg}");
        }
    };
    let mut out = String::new();
    match cli.command {
        Command::GenData { out: dir } => {
            let data = gen_synthetic(&cfg.data, stage_seed(seed, stages::DATA))?;
            save_dataset(&data, &dir).with_context(|| format!("writing dataset {}", dir.display()))?;
        }
        Command::Propose { image } => {
            for r in propose(&read_image(&image)?, cfg) {
                out += &format!("{} {} {} {}\n", r.x, r.y, r.w, r.h);
            }
        }
        Command::Select { filternet, image } => {
            let img = read_image(&image)?;
            let selected = select(&read_net(&filternet)?, &img, &propose(&img, cfg), cfg)?;
            for p in &selected.patches {
                out += &format!("{} {} {} {} {}\n", p.rect.x, p.rect.y, p.rect.w, p.rect.h, p.score);
            }
        }
        Command::TrainFilternet { data, out: path } => {
            let data = read_data(&data, cfg)?;
            let mut losses = vec![];
            let net = train_filternet(&data, cfg, stage_seed(seed, stages::FILTERNET), |_, l| losses.push(l))?;
            write_file(&path, save_net(&net))?;
            out = losses_to_jsonl(&losses);
        }
        Command::TrainDomainnet { data, filternet, out: path } => {
            let data = read_data(&data, cfg)?;
            let train = prepare_split(&data.train, &read_net(&filternet)?, cfg)?;
            let mut losses = vec![];
            let net = train_domainnet(
                &train.samples,
                &train.selections,
                cfg,
                stage_seed(seed, stages::DOMAINNET),
                |_, l| losses.push(l),
            )?;
            write_file(&path, save_net(&net))?;
            out = losses_to_jsonl(&losses);
        }
        Command::TrainBaseline { data, kind, out: path } => {
            let data = read_data(&data, cfg)?;
            let mut losses = vec![];
            let net = match kind {
                Baseline::CnnDomain => {
                    let train = propose_split(&data.train, cfg);
                    train_cnn_domain(&train.samples, cfg, stage_seed(seed, stages::CNN_DOMAIN), |_, l| losses.push(l))?
                }
                Baseline::Multitask => train_multitask(&data, cfg, stage_seed(seed, stages::MULTITASK), |_, l| losses.push(l))?,
            };
            write_file(&path, save_net(&net))?;
            out = losses_to_jsonl(&losses);
        }
        Command::BuildParts { data, domainnet, out: path } => {
            let data = read_data(&data, cfg)?;
            let net = read_net(&domainnet)?;
            let bank = PartDetectorBank::build(&net, net.spec().part_layer, cfg.parts_k, stage_seed(seed, stages::PARTS))?;
            let (train, val) = (propose_split(&data.train, cfg), propose_split(&data.val, cfg));
            log("computing part features");
            let (train_view, val_view) = (part_view(&net, &bank, &train)?, part_view(&net, &bank, &val)?);
            let (bank, accuracies) =
                identify_noise(&bank, (&train_view, &train.labels()), (&val_view, &val.labels()), cfg, seed)?;
            log(&format!("group accuracies {accuracies:?}"));
            write_file(&path, bank.to_text())?;
        }
        Command::Detect { domainnet, bank, image } => {
            let img = read_image(&image)?;
            let bank = read_bank(&bank)?;
            let mut props = propose(&img, cfg);
            if props.is_empty() {
                props.push(img.full_rect());
            }
            let hits = detect_all_groups(&read_net(&domainnet)?, &bank, &img, &props)?;
            for h in part_detection(&hits, &bank).parts {
                out += &format!("{} {} {} {} {} {}\n", h.group, h.rect.x, h.rect.y, h.rect.w, h.rect.h, h.score);
            }
        }
        Command::TrainSvm { data, domainnet, bank, out: path } => {
            let data = read_data(&data, cfg)?;
            let (net, bank) = (read_net(&domainnet)?, read_bank(&bank)?);
            if bank.noise_group().is_none() {
                bail!("bank has no noise group; run build-parts first");
            }
            let train = propose_split(&data.train, cfg);
            let view = part_view(&net, &bank, &train)?;
            let (model, objective) = train_part_svm(&bank, &view, &train.labels(), cfg, seed)?;
            write_file(&path, save_svm(&model))?;
            out = losses_to_jsonl(&objective);
        }
        Command::Evaluate {
            data,
            filternet,
            domainnet,
            bank,
            svm,
            cnn_domain,
            multitask,
        } => {
            let data = read_data(&data, cfg)?;
            let filternet = read_net(&filternet)?;
            let domainnet = read_net(&domainnet)?;
            let bank = read_bank(&bank)?;
            let part_svm = load_svm(&read_file(&svm)?).context("loading svm")?;
            let cnn_domain = cnn_domain.as_deref().map(read_net).transpose()?;
            let multitask = multitask.as_deref().map(read_net).transpose()?;
            let val = prepare_split(&data.val, &filternet, cfg)?;
            let test = prepare_split(&data.test, &filternet, cfg)?;
            let (val_view, test_view) = (part_view(&domainnet, &bank, &val)?, part_view(&domainnet, &bank, &test)?);
            let models = EvalModels {
                domainnet: &domainnet,
                bank: &bank,
                part_svm: &part_svm,
                cnn_domain: cnn_domain.as_ref(),
                multitask: multitask.as_ref(),
            };
            let eval = evaluate(&models, (&val, &val_view), (&test, &test_view), cfg, seed)?;
            log(&format!("fusion alpha {}", eval.alpha));
            out = records_to_jsonl(&eval.records);
        }
        Command::RunAll { out: dir } => {
            let (_, o) = run_pipeline(cfg, seed, &mut log)?;
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (name, net) in [
                ("filternet", &o.filternet),
                ("domainnet", &o.domainnet),
                ("cnn_domain", &o.cnn_domain),
                ("multitask", &o.multitask),
            ] {
                write_file(&dir.join(format!("{name}.tlan")), save_net(net))?;
            }
            for (name, losses) in &o.losses {
                write_file(&dir.join(format!("losses_{name}.jsonl")), losses_to_jsonl(losses))?;
            }
            write_file(&dir.join("parts.bank"), o.bank.to_text())?;
            write_file(&dir.join("part.svm"), save_svm(&o.part_svm))?;
            write_file(&dir.join("config.txt"), render_config(&config))?;
            let report = records_to_jsonl(&o.records);
            write_file(&dir.join(&config.report_file), &report)?;
            out = render_report(&report)?;
            out += &format!("fusion alpha {}\n", o.alpha);
        }
        Command::Report { report } => {
            let text = String::from_utf8(read_file(&report)?).context("report is not UTF-8")?;
            out = render_report(&text)?;
        }
        Command::Selfcheck => {
            let checks = selfcheck(seed)?;
            for c in &checks {
                out += &format!("{c}\n");
            }
            if checks.iter().any(|c| !c.passed) {
                print!("{out}");
                bail!("selfcheck failed");
            }
        }
    }
    print!("{out}");
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
