use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use occam::datasets::{
    load_carpk, load_fsc147, load_stitched, stitch_multiclass, write_stitched, CarpkLayout, DatasetRecord,
    Fsc147Layout, StitchSpec,
};
use occam::embedding::{read_feature_dump, write_feature_dump, BaselineEmbedder};
use occam::finch::{finch_threshold_cluster, ThresholdSchedule};
use occam::imaging::Image;
use occam::pipeline::{candidate_records, render_visualization, EmbedderSpec, ProviderSpec};
use occam::prompting::MockProvider;
use occam::{Error, Pipeline, PipelineConfig};

#[derive(Parser)]
#[command(name = "occam", version, about = "Prior-free multi-class object counting")]
struct Cli {
    /// Worker threads for image-level parallelism (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count objects per discovered class in one or more images.
    Count(CountArgs),
    /// Evaluate against an annotated dataset.
    Eval(EvalArgs),
    /// Build a stitched multi-class test set from FSC-147.
    Stitch(StitchArgs),
    /// Cluster a feature dump with a threshold schedule.
    Cluster(ClusterArgs),
    /// Serve the mock provider and baseline embedder over stdio.
    #[command(hide = true)]
    ServeMock {
        #[arg(long, default_value_t = 0.0)]
        min_relative_size: f64,
    },
}

#[derive(Args)]
struct PipelineArgs {
    /// JSON config file; the profile is the base and file fields override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["S", "M"])]
    profile: Option<String>,
    /// mock | file:<path> | wire:<command-or-url>
    #[arg(long)]
    provider: Option<String>,
    /// baseline | wire | wire:<command-or-url>
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long)]
    no_mask_processing: bool,
    #[arg(long)]
    no_clustering: bool,
    #[arg(long)]
    no_scaling: bool,
}

impl PipelineArgs {
    fn config(&self) -> Result<PipelineConfig, Error> {
        let mut doc = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => Value::Object(Default::default()),
        };
        if let Some(p) = &self.profile {
            doc["profile"] = Value::String(p.clone());
        }
        let mut cfg = PipelineConfig::from_json(&doc)?;
        if let Some(p) = &self.provider {
            cfg.provider = p.parse::<ProviderSpec>()?;
        }
        if let Some(e) = &self.embedder {
            cfg.embedder = e.parse::<EmbedderSpec>()?;
        }
        cfg.ablation.mask_processing &= !self.no_mask_processing;
        cfg.ablation.clustering &= !self.no_clustering;
        cfg.ablation.scaling &= !self.no_scaling;
        Ok(cfg)
    }
}

#[derive(Args)]
struct CountArgs {
    #[arg(required = true)]
    images: Vec<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Directory for reports and artifacts; reports go to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write `<stem>.viz.png` with boxes coloured per cluster.
    #[arg(long)]
    viz: bool,
    /// Write `<stem>.candidates.json`.
    #[arg(long)]
    dump_candidates: bool,
    /// Write `<stem>_features.f32` and `<stem>_features.json`.
    #[arg(long)]
    dump_features: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Fsc147,
    Carpk,
    Stitched,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    dataset: DatasetKind,
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// JSON file overriding dataset file names (FSC-147 and CARPK layouts).
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Only evaluate images with at most N annotated objects.
    #[arg(long)]
    max_gt: Option<usize>,
    /// Per-image CSV output.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Aggregated report output (stdout otherwise).
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct StitchArgs {
    /// FSC-147 root holding the source images.
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 10)]
    max_sub_images: usize,
    #[arg(long, default_value_t = 2)]
    columns: usize,
    /// Variant name recorded in meta.json (default: seed-<seed>).
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct ClusterArgs {
    /// Feature dump (stem, .json index or .f32 data).
    #[arg(long)]
    features: PathBuf,
    /// Comma-separated thresholds; the last one repeats.
    #[arg(long, default_value = "12.0,9.0,7.75")]
    schedule: String,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        e if e.is_provider() => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Count(a) => count(a),
        Command::Eval(a) => eval(a),
        Command::Stitch(a) => stitch(a),
        Command::Cluster(a) => cluster(a),
        Command::ServeMock { min_relative_size } => serve_mock(min_relative_size),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn count(a: CountArgs) -> Result<(), Error> {
    let pipeline = Pipeline::from_config(a.pipeline.config()?)?;
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let needs_out = a.viz || a.dump_candidates || a.dump_features;
    if needs_out && a.out.is_none() {
        return Err(Error::Config("--viz and --dump-* need --out".into()));
    }
    let reports: Vec<String> = a
        .images
        .par_iter()
        .map(|path| {
            let img = Image::load(path)?;
            let key = path.to_string_lossy();
            let result = pipeline.count(&img, &key)?;
            let name = path.file_name().map_or_else(|| key.to_string(), |n| n.to_string_lossy().into_owned());
            let report = result.report(&name);
            info!("{name}: {} objects in {} clusters", report.total, report.clusters.len());
            if let Some(out) = &a.out {
                let stem = path
                    .file_stem()
                    .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
                write_json(&out.join(format!("{stem}.json")), &report)?;
                if a.viz {
                    render_visualization(&img, &result).save_png(&out.join(format!("{stem}.viz.png")))?;
                }
                if a.dump_candidates {
                    write_json(
                        &out.join(format!("{stem}.candidates.json")),
                        &candidate_records(&result.candidates),
                    )?;
                }
                if a.dump_features {
                    let features = if result.features.is_empty() {
                        pipeline.embed_candidates(&img, &result.candidates)?
                    } else {
                        result.features.clone()
                    };
                    write_feature_dump(&out.join(format!("{stem}_features")), &features)?;
                }
            }
            Ok(serde_json::to_string(&report)?)
        })
        .collect::<Result<_, Error>>()?;
    if a.out.is_none() {
        let stdout = io::stdout();
        let mut w = stdout.lock();
        for r in reports {
            writeln!(w, "{r}").map_err(|e| Error::io(Path::new("<stdout>"), e))?;
        }
    }
    Ok(())
}

fn load_layout<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, Error> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn load_dataset(kind: DatasetKind, root: &Path, split: &str, layout: &Option<PathBuf>) -> Result<Vec<DatasetRecord>, Error> {
    match kind {
        DatasetKind::Fsc147 => load_fsc147(root, split, &load_layout::<Fsc147Layout>(layout)?),
        DatasetKind::Carpk => load_carpk(root, split, &load_layout::<CarpkLayout>(layout)?),
        DatasetKind::Stitched => load_stitched(root),
    }
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let cfg = a.pipeline.config()?;
    let records = load_dataset(a.dataset, &a.root, &a.split, &a.layout)?;
    let pipeline = Pipeline::from_config(cfg)?;
    let mut report = pipeline.evaluate(&records, a.max_gt)?;
    if let Some(path) = &a.csv {
        let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["image", "class", "predicted", "ground_truth", "tp", "fp", "fn"])
            .map_err(csv_err)?;
        for im in &report.images {
            for c in &im.classes {
                w.write_record([
                    im.image.as_str(),
                    c.label.as_str(),
                    &c.predicted.to_string(),
                    &c.ground_truth.to_string(),
                    &im.prf.tp.to_string(),
                    &im.prf.fp.to_string(),
                    &im.prf.fn_.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    report.images.clear();
    match &a.report {
        Some(path) => write_json(path, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn stitch(a: StitchArgs) -> Result<(), Error> {
    let pool = load_fsc147(&a.root, &a.split, &load_layout::<Fsc147Layout>(&a.layout)?)?;
    let spec = StitchSpec {
        seed: a.seed,
        count: a.count,
        max_sub_images: a.max_sub_images,
        columns: a.columns,
        ..Default::default()
    };
    let canvases = stitch_multiclass(&spec, &pool, |r| Image::load(&r.image_path))?;
    let variant = a.variant.unwrap_or_else(|| format!("seed-{}", a.seed));
    write_stitched(&a.out, &spec, &variant, &canvases)?;
    info!("wrote {} canvases to {}", canvases.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct ClusterOut {
    members: Vec<usize>,
    size: usize,
}

fn cluster(a: ClusterArgs) -> Result<(), Error> {
    let schedule: ThresholdSchedule = a.schedule.parse()?;
    let features = read_feature_dump(&a.features)?;
    let clusters: Vec<ClusterOut> = finch_threshold_cluster(&features, &schedule)?
        .into_iter()
        .map(|c| ClusterOut {
            size: c.size(),
            members: c.members,
        })
        .collect();
    println!("{}", serde_json::to_string(&clusters)?);
    Ok(())
}

fn serve_mock(min_relative_size: f64) -> Result<(), Error> {
    let provider = MockProvider {
        min_relative_size,
        ..Default::default()
    };
    let stdin = io::stdin();
    let stdout = io::stdout();
    occam::protocol::serve(
        stdin.lock(),
        BufWriter::new(stdout.lock()),
        Some(&provider),
        Some(&BaselineEmbedder::default()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use occam::Profile;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"profile": "M", "grid_spacing": 8, "ablation": {"scaling": true}}"#).unwrap();
        let args = PipelineArgs {
            config: Some(path),
            profile: None,
            provider: Some("file:/tmp/masks".into()),
            embedder: None,
            no_mask_processing: false,
            no_clustering: true,
            no_scaling: true,
        };
        let cfg = args.config().unwrap();
        assert_eq!(cfg.profile, Profile::M);
        assert_eq!(cfg.grid_spacing, 8);
        assert_eq!(cfg.provider, ProviderSpec::File("/tmp/masks".into()));
        assert!(!cfg.ablation.scaling && !cfg.ablation.clustering && cfg.ablation.mask_processing);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Transport("x".into())), 3);
        assert_eq!(exit_code(&Error::Protocol("x".into())), 3);
        assert_eq!(exit_code(&Error::Data("x".into())), 4);
    }
}
