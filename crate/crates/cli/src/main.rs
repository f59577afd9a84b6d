//! `dpseg` command line front end.

mod png;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dpseg::analysis::{
    cost_volume_heatmap, export_heatmap, gap_samples_from_container, modality_gap_experiment, synthetic_gap_samples,
    HeatmapFormat,
};
use dpseg::costvolume::PromptStrategy;
use dpseg::harness::{
    dataset_fingerprint, evaluate, run_ablation, run_training, AblationAxis, ConfusionMatrix, ExperimentConfig,
    SegModel, SyntheticScene, World,
};
use dpseg::promptbank::{CategorySet, Container, PromptDims, PromptEmbeddings, SyntheticPromptProvider, TemplateBank};
use dpseg::refinement::{diff_report, semantic_guided_inference, BackgroundFill, RefinementConfig};
use dpseg::Tensor;

#[derive(Parser)]
#[command(name = "dpseg", version, about = "Dual-prompt cost-volume segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the synthetic world.
    Train {
        #[command(flatten)]
        exp: ExpArgs,
        /// Override the number of optimisation steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Segment one image.
    Infer {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value = "infer")]
        out: PathBuf,
    },
    /// Two-pass inference with prompts re-embedded from pass-1 masks.
    RefineInfer {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value_t = 0.005)]
        threshold: f64,
        #[arg(long, default_value_t = 0.0)]
        padding: f64,
        #[arg(long, default_value = "zero")]
        fill: BackgroundFill,
        #[arg(long)]
        per_component: bool,
        /// Crop side fed to the prompt encoder; defaults to the world's prompt size.
        #[arg(long)]
        prompt_resolution: Option<usize>,
        #[arg(long, default_value = "refine")]
        out: PathBuf,
    },
    /// mIoU of a checkpoint on a generated dataset directory or the eval split.
    Eval {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory written by `gen-data`; the world's eval split if omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every arm of an ablation axis.
    Ablate {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine similarity of image embeddings to text, visual and fused prompts.
    AnalyzeGap {
        /// Container with `image`, `text` and `visual` arrays of shape (N, D).
        #[arg(long, conflicts_with = "synthetic")]
        samples: Option<PathBuf>,
        /// Draw this many samples from the synthetic prompt provider instead.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-pixel similarity between image features and one category's prompt.
    Heatmap {
        /// Container with a `features` array of shape (H, W, D), as written by `infer`.
        #[arg(long)]
        features: PathBuf,
        /// Prompt container holding `T`, `V` and category names.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        category: String,
        #[arg(long, value_enum, default_value_t = Mode::Dual)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = Format::Pgm)]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic scenes, label maps and the world's prompts to disk.
    GenData {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ExpArgs {
    /// TOML experiment config; built-in defaults if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ExpArgs {
    fn load(&self) -> dpseg::Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Args)]
struct InputArgs {
    /// RGB PNG whose sides are multiples of 32.
    #[arg(long, required_unless_present = "scene", conflicts_with = "scene")]
    image: Option<PathBuf>,
    /// Index into the world's eval split, which also supplies ground truth.
    #[arg(long)]
    scene: Option<usize>,
    /// Prompt container to use instead of the world's prompts.
    #[arg(long)]
    prompts: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Text,
    Visual,
    Dual,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Pgm,
    Csv,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<dpseg::Error>().map_or(3, dpseg::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

struct Input {
    image: Tensor,
    truth: Option<SyntheticScene>,
    prompts: PromptEmbeddings,
}

fn load_input(world: &World, args: &InputArgs) -> anyhow::Result<Input> {
    let (image, truth) = match (&args.image, args.scene) {
        (Some(p), _) => (png::read_rgb(p)?, None),
        (None, Some(i)) => {
            let s = world.scene("eval", i)?;
            (s.image.clone(), Some(s))
        }
        (None, None) => bail!("either --image or --scene is required"),
    };
    let prompts = match &args.prompts {
        Some(p) => PromptEmbeddings::from_container(&Container::load(p)?)?,
        None => world.prompts()?,
    };
    Ok(Input { image, truth, prompts })
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Train { exp, steps, out } => {
            let mut cfg = exp.load()?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let fp = cfg.fingerprint();
            println!("config fingerprint: {fp}");
            let outcome = run_training(&cfg, Some(&out))?;
            write(&out.join("config.toml"), cfg.to_toml()?)?;
            let report = json!({
                "config_fingerprint": fp,
                "dataset_fingerprint": outcome.dataset_fingerprint,
                "steps": outcome.losses.len(),
                "initial_loss": outcome.losses.first(),
                "final_loss": outcome.losses.last(),
            });
            write_json(&out.join("report.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Infer { exp, ckpt, input, out } => {
            let cfg = exp.load()?;
            let world = World::new(cfg.world.clone(), &cfg.model.encoder)?;
            let model = SegModel::load(&ckpt)?;
            let inp = load_input(&world, &input)?;
            let r = model.predict(&inp.image, &inp.prompts)?;
            png::write_labels(&out.join("labels.png"), &r.labels)?;
            let mut features = Container::new("image embedding");
            features.insert_f32("features", model.pyramid(&inp.image)?.embedding);
            features.save(out.join("features.dpec"))?;
            let mut report = json!({
                "config_fingerprint": cfg.fingerprint(),
                "detected": r.detected.iter().enumerate().filter(|(_, &d)| d).map(|(k, _)| k).collect::<Vec<_>>(),
                "fractions": r.scores,
            });
            if let Some(s) = &inp.truth {
                let mut cm = ConfusionMatrix::new(r.categories());
                cm.add(&r.labels, &s.labels)?;
                report["eval"] = serde_json::to_value(cm.report(&cfg.fingerprint()))?;
            }
            write_json(&out.join("report.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::RefineInfer {
            exp,
            ckpt,
            input,
            threshold,
            padding,
            fill,
            per_component,
            prompt_resolution,
            out,
        } => {
            let cfg = exp.load()?;
            let rcfg = RefinementConfig {
                detection_threshold: threshold,
                crop_padding: padding,
                prompt_resolution: prompt_resolution.unwrap_or(cfg.world.prompt_size),
                background_fill: fill,
                per_component,
            };
            rcfg.validate()?;
            let world = World::new(cfg.world.clone(), &cfg.model.encoder)?;
            let model = SegModel::load(&ckpt)?;
            let inp = load_input(&world, &input)?;
            let two = semantic_guided_inference(&inp.image, &inp.prompts, &model, &world.prompt_encoder, &rcfg)?;
            png::write_labels(&out.join("pass1.png"), &two.pass1.labels)?;
            png::write_labels(&out.join("pass2.png"), &two.pass2.labels)?;
            let diff = diff_report(&two, inp.truth.as_ref().map(|s| &s.labels))?;
            let report = json!({
                "config_fingerprint": cfg.fingerprint(),
                "refinement": rcfg,
                "diff": diff,
            });
            write_json(&out.join("diff.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Eval { exp, ckpt, dataset, out } => {
            let cfg = exp.load()?;
            let world = World::new(cfg.world.clone(), &cfg.model.encoder)?;
            let model = SegModel::load(&ckpt)?;
            let scenes = match &dataset {
                Some(dir) => png::read_dataset(dir)?,
                None => world.eval_scenes()?,
            };
            let report = evaluate(&model, &scenes, &world.prompts()?, &cfg.fingerprint())?;
            let value = json!({
                "config_fingerprint": cfg.fingerprint(),
                "dataset_fingerprint": dataset_fingerprint(&scenes),
                "scenes": scenes.len(),
                "report": report,
            });
            if let Some(p) = &out {
                write_json(p, &value)?;
            }
            println!("{}", serde_json::to_string_pretty(&value)?);
        }
        Command::Ablate {
            exp,
            axis,
            seeds,
            steps,
            out,
        } => {
            let mut cfg = exp.load()?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            println!("config fingerprint: {}", cfg.fingerprint());
            let first = exp.seed.unwrap_or(0);
            let seeds: Vec<u64> = (first..first + seeds).collect();
            let report = run_ablation(&cfg, axis, &seeds)?;
            let csv = report.to_csv();
            if let Some(p) = &out {
                write(p, &csv)?;
                write_json(&p.with_extension("json"), &serde_json::to_value(&report)?)?;
            }
            print!("{csv}");
        }
        Command::AnalyzeGap {
            samples,
            synthetic,
            seed,
            csv,
            out,
        } => {
            let samples = match (samples, synthetic) {
                (Some(p), _) => gap_samples_from_container(&Container::load(p)?)?,
                (None, Some(n)) => {
                    let provider = SyntheticPromptProvider {
                        visual_correlation: 0.9,
                        text_correlation: 0.5,
                        ..SyntheticPromptProvider::new(seed, PromptDims::default(), 0.9)
                    };
                    synthetic_gap_samples(&provider, 8, 4, n, 0.9, seed)?
                }
                (None, None) => bail!("either --samples or --synthetic is required"),
            };
            let report = modality_gap_experiment(&samples)?;
            if let Some(p) = &csv {
                write(p, report.to_csv())?;
            }
            let value = serde_json::to_value(&report)?;
            if let Some(p) = &out {
                write_json(p, &value)?;
            }
            println!("{}", serde_json::to_string_pretty(&value["summary"])?);
        }
        Command::Heatmap {
            features,
            prompts,
            category,
            mode,
            format,
            out,
        } => {
            let fc = Container::load(&features)?;
            let pc = Container::load(&prompts)?;
            let p = PromptEmbeddings::from_container(&pc)?;
            let names = pc.metadata.get("categories").context("prompt container lists no categories")?;
            let k = names
                .lines()
                .position(|n| n == category)
                .ok_or_else(|| dpseg::Error::InvalidCategories(format!("unknown category {category:?}")))?;
            let mode = match mode {
                Mode::Text => PromptStrategy::Text,
                Mode::Visual => PromptStrategy::Visual,
                Mode::Dual => PromptStrategy::Dual,
            };
            let h = cost_volume_heatmap(
                fc.get("features")?,
                &p.text.index_axis0(k),
                &p.visual.index_axis0(k),
                mode,
                &category,
            )?;
            let format = match format {
                Format::Pgm => HeatmapFormat::Pgm,
                Format::Csv => HeatmapFormat::Csv,
            };
            export_heatmap(&h, &out, format)?;
            let shape = h.values.shape();
            println!("{category} ({mode}): {}x{} heatmap written to {}", shape[0], shape[1], out.display());
        }
        Command::GenData { exp, count, split, out } => {
            let cfg = exp.load()?;
            let world = World::new(cfg.world.clone(), &cfg.model.encoder)?;
            let scenes = (0..count).map(|i| world.scene(&split, i)).collect::<dpseg::Result<Vec<_>>>()?;
            for (i, s) in scenes.iter().enumerate() {
                png::write_rgb(&out.join(format!("{i:04}.png")), &s.image)?;
                png::write_label_indices(&out.join(format!("{i:04}_labels.png")), &s.labels)?;
            }
            let cats = world.categories();
            let bank = TemplateBank::generic(cfg.world.templates)?;
            let prompts = world.prompts()?.to_container(&cats, &bank, "synthetic world");
            prompts.save(out.join("prompts.dpec"))?;
            write(&out.join("categories.txt"), names_text(&cats))?;
            let meta = json!({
                "config_fingerprint": cfg.fingerprint(),
                "dataset_fingerprint": dataset_fingerprint(&scenes),
                "split": split,
                "count": count,
                "shapes": scenes.iter().map(|s| &s.meta).collect::<Vec<_>>(),
            });
            write_json(&out.join("meta.json"), &meta)?;
            println!("config fingerprint: {}", cfg.fingerprint());
            println!("dataset fingerprint: {}", meta["dataset_fingerprint"].as_str().unwrap_or_default());
        }
    }
    Ok(())
}

fn names_text(cats: &CategorySet) -> String {
    cats.names().join("\n") + "\n"
}
