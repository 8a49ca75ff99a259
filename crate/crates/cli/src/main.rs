use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use reco_core::cosegment::{archive_gates, GateKind};
use reco_core::pipeline::{evaluate_dirs, BUILTIN_COCOSTUFF};
use reco_core::synth::{write_fixture, SyntheticSpec};
use reco_core::tensor_io::{read_json, resolve, write_json};
use reco_core::{
    argmax_mask, build_archive, build_reference, concept_probability, dense_saliency, fuse, merge_categories,
    refine, select_seeds, threshold_mask, ArchiveManifest, BlockSchedule, Concept, CrfParams, FeatureMap, Gate,
    Index, MergeTable, Pipeline, Probability, Projection, Reference, Rgb, Saliency, SegmentationMask, Values,
};

#[derive(Parser)]
#[command(name = "reco", version, about = "Open-vocabulary segmentation from retrieved, co-segmented image archives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Retrieve a top-k archive manifest for a concept.
    Retrieve(RetrieveArgs),
    /// Co-segment an archive into a reference embedding.
    Coseg(CosegArgs),
    /// Dense text saliency for one image.
    Saliency(SaliencyArgs),
    /// Probability map of one concept over one image.
    Infer(InferArgs),
    /// Argmax (or threshold) of probability maps into an index mask.
    Segment(SegmentArgs),
    /// Dense-CRF refinement of probability maps.
    Crf(CrfArgs),
    /// Regroup mask categories through a merge table.
    Merge(MergeArgs),
    /// Pixel accuracy and mIoU of predicted masks.
    Eval(EvalArgs),
    /// Write a seeded synthetic corpus with a ready-to-run config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RetrieveArgs {
    /// Index manifest JSON.
    #[arg(long)]
    index: PathBuf,
    /// Concept JSON (name, text_embedding).
    #[arg(long)]
    concept: PathBuf,
    #[arg(long, default_value_t = reco_core::pipeline::DEFAULT_K)]
    k: usize,
    /// Directory of `<id>.rtns` dense features.
    #[arg(long)]
    features: PathBuf,
    /// Directory of `<id>.rtns` value features.
    #[arg(long)]
    values: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CosegArgs {
    /// Archive manifest JSON.
    #[arg(long)]
    archive: PathBuf,
    /// Gate candidates by text saliency; needs `--concept` and `--projection`
    /// unless the archive lists saliency maps.
    #[arg(long)]
    language_gating: bool,
    #[arg(long)]
    concept: Option<PathBuf>,
    #[arg(long)]
    projection: Option<PathBuf>,
    /// Background reference `.rtns` files; named by file stem.
    #[arg(long = "background", num_args = 1..)]
    backgrounds: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Optional seed summary JSON.
    #[arg(long)]
    seeds: Option<PathBuf>,
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    values: PathBuf,
    #[arg(long)]
    projection: PathBuf,
    #[arg(long)]
    bias: Option<PathBuf>,
    #[arg(long)]
    concept: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Saliency map to fuse with the probability.
    #[arg(long)]
    saliency: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    /// Probability maps; label order follows argument order, names are file stems.
    #[arg(long, num_args = 1.., required = true)]
    maps: Vec<PathBuf>,
    /// With one map, label pixels at or above this value.
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CrfArgs {
    #[arg(long, num_args = 1.., required = true)]
    maps: Vec<PathBuf>,
    /// RGB PNG the maps were inferred on.
    #[arg(long)]
    image: PathBuf,
    /// JSON with CRF parameters; unspecified fields keep their defaults.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    mask: PathBuf,
    /// Merge table JSON, or `builtin:cocostuff27`.
    #[arg(long, default_value = BUILTIN_COCOSTUFF)]
    table: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of ground-truth index PNGs.
    #[arg(long)]
    gt: PathBuf,
    /// Directory of predicted PNGs with label sidecars.
    #[arg(long)]
    pred: PathBuf,
    /// Text file with one class name per line, in ground-truth index order.
    /// Defaults to the label table of the first prediction.
    #[arg(long)]
    classes: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Comma-separated target concept names.
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<String>>,
}

fn stem(p: &Path) -> Result<String> {
    p.file_stem()
        .and_then(|s| s.to_str())
        .map(|s| s.split('.').next().unwrap_or(s).to_string())
        .with_context(|| format!("cannot derive a name from {}", p.display()))
}

fn load_maps(paths: &[PathBuf]) -> Result<(Vec<Probability>, Vec<String>)> {
    let mut maps = Vec::with_capacity(paths.len());
    let mut labels = Vec::with_capacity(paths.len());
    for p in paths {
        let name = stem(p)?;
        maps.push(Probability::load(&name, p).with_context(|| format!("loading {}", p.display()))?);
        labels.push(name);
    }
    Ok((maps, labels))
}

fn coseg(a: CosegArgs) -> Result<()> {
    let archive = ArchiveManifest::load(&a.archive)?;
    let base = a.archive.parent().map(Path::to_path_buf).unwrap_or_default();
    archive.validate_files(&base)?;
    let features = archive
        .image_entries
        .iter()
        .map(|e| FeatureMap::load(&e.image_id, resolve(&base, &e.feature_path)))
        .collect::<reco_core::Result<Vec<_>>>()?;
    let language = if a.language_gating {
        let concept = a.concept.as_ref().map(Concept::load).transpose()?;
        let projection = a.projection.as_ref().map(|p| Projection::load(p, None)).transpose()?;
        let mut gates = Vec::with_capacity(features.len());
        for (e, f) in archive.image_entries.iter().zip(&features) {
            let gate = match (&e.saliency_path, &e.value_feature_path, &concept, &projection) {
                (Some(s), ..) => Gate::load(resolve(&base, s), GateKind::Saliency)?.resized(f.height(), f.width()),
                (None, Some(v), Some(c), Some(p)) => {
                    let values = Values::load(&e.image_id, resolve(&base, v))?;
                    let s = dense_saliency(&values, p, c)?;
                    Gate::new(s.h, s.w, s.values, GateKind::Saliency)?.resized(f.height(), f.width())
                }
                _ => bail!(
                    "language gating for `{}` needs a saliency map or value features with --concept and --projection",
                    e.image_id
                ),
            };
            gates.push(gate);
        }
        Some(gates)
    } else {
        None
    };
    let backgrounds = a
        .backgrounds
        .iter()
        .map(|p| Ok(Reference::load(stem(p)?, p)?))
        .collect::<Result<Vec<_>>>()?;
    if let Some(sub) = backgrounds.iter().find(|r| r.concept_name == archive.concept_name) {
        info!("`{}` is a background concept; reusing its reference", archive.concept_name);
        sub.save(&a.out)?;
        return Ok(());
    }
    let gates = archive_gates(&features, language.as_deref(), &backgrounds)?;
    let seeds = select_seeds(&features, gates.as_deref(), &BlockSchedule::default())?;
    let reference = build_reference(&seeds, &archive.concept_name)?;
    reference.save(&a.out)?;
    if let Some(p) = &a.seeds {
        write_json(&seeds.summary(), p)?;
    }
    info!("reference for `{}` from {} seeds", archive.concept_name, seeds.len());
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Run { config } => {
            let out = Pipeline::new().run_file(&config)?;
            for n in &out.provenance.notes {
                warn!("{n}");
            }
            if let Some(r) = &out.report {
                println!("acc {:.4} mIoU {:.4} over {} images", r.acc, r.miou, r.images);
            }
            println!("{} masks written to {}", out.masks.len(), out.output_dir.display());
        }
        Command::Retrieve(a) => {
            let index = Index::load(&a.index)?;
            let concept = Concept::load(&a.concept)?;
            let archive = build_archive(&index, &concept, a.k, &a.features, a.values.as_deref())?;
            archive.save(&a.out)?;
        }
        Command::Coseg(a) => coseg(a)?,
        Command::Saliency(a) => {
            let concept = Concept::load(&a.concept)?;
            let projection = Projection::load(&a.projection, a.bias.as_deref())?;
            let values = Values::load(stem(&a.values)?, &a.values)?;
            let s = dense_saliency(&values, &projection, &concept)?;
            if s.degenerate_pixels > 0 {
                warn!("{} pixels have a zero projection; their saliency is 0.5", s.degenerate_pixels);
            }
            s.save(&a.out)?;
        }
        Command::Infer(a) => {
            let reference = Reference::load(stem(&a.reference)?, &a.reference)?;
            let features = FeatureMap::load(stem(&a.features)?, &a.features)?;
            let mut p = concept_probability(&reference, &features)?;
            if let Some(s) = &a.saliency {
                let t = reco_core::read_tensor(s)?;
                let sh = t.expect_rank(2, "saliency map")?.to_vec();
                let sal = Saliency {
                    h: sh[0],
                    w: sh[1],
                    values: t.data,
                    concept_name: reference.concept_name.clone(),
                    degenerate_pixels: 0,
                };
                p = fuse(&p, &sal)?;
            }
            p.save(&a.out)?;
        }
        Command::Segment(a) => {
            let (maps, labels) = load_maps(&a.maps)?;
            let mask = match a.threshold {
                Some(t) if maps.len() == 1 => threshold_mask(&maps[0], t)?,
                Some(_) => bail!("--threshold needs exactly one map"),
                None => argmax_mask(&maps, &labels)?,
            };
            mask.save_png(&a.out)?;
        }
        Command::Crf(a) => {
            let (maps, labels) = load_maps(&a.maps)?;
            if maps.len() < 2 {
                bail!("the CRF needs at least two categories");
            }
            let params = a.params.as_ref().map(CrfParams::load).transpose()?.unwrap_or_default();
            let rgb = Rgb::load_png(&a.image)?;
            let full: Vec<Probability> = maps.iter().map(|m| m.resized(rgb.h, rgb.w)).collect();
            let mut mask = refine(&full, &rgb, &params)?;
            mask.label_table = labels;
            mask.save_png(&a.out)?;
        }
        Command::Merge(a) => {
            let table = if a.table == BUILTIN_COCOSTUFF { MergeTable::cocostuff_27() } else { MergeTable::load(&a.table)? };
            let mask = SegmentationMask::load_png(&a.mask, None)?;
            merge_categories(&mask, &table)?.save_png(&a.out)?;
        }
        Command::Eval(a) => {
            let classes = match &a.classes {
                Some(p) => std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect(),
                None => first_label_table(&a.pred)?,
            };
            let report = evaluate_dirs(&a.gt, &a.pred, &classes)?;
            println!("acc {:.4} mIoU {:.4} over {} images", report.acc, report.miou, report.images);
            if let Some(out) = &a.out {
                write_json(&report, out)?;
            }
        }
        Command::Synth(a) => {
            let mut spec = SyntheticSpec { seed: a.seed, ..SyntheticSpec::default() };
            if let Some(t) = a.targets {
                spec.targets = t;
            }
            let config = write_fixture(&a.dir, &spec)?;
            println!("{}", config.display());
        }
    }
    Ok(())
}

fn first_label_table(pred: &Path) -> Result<Vec<String>> {
    let mut sidecars: Vec<PathBuf> = std::fs::read_dir(pred)
        .with_context(|| format!("reading {}", pred.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    sidecars.sort();
    let first = sidecars.first().context("no label sidecar found; pass --classes")?;
    let v: serde_json::Value = read_json(first)?;
    let labels = v["label_table"]
        .as_array()
        .context("sidecar without label_table")?
        .iter()
        .filter_map(|s| s.as_str().map(String::from))
        .collect();
    Ok(labels)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
