//! Configuration profiles and the end-to-end counting pipeline.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datasets::DatasetRecord;
use crate::embedding::{embed, prepare_crop, BaselineEmbedder, CachingEmbedder, Embedder, FeatureVector};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, evaluate_image, CountPrediction, ImageEvaluation, MetricsReport};
use crate::finch::{finch_threshold_cluster, Cluster, ThresholdSchedule};
use crate::imaging::{Image, RleMask};
use crate::maskproc::{CandidateInstance, FilterConfig};
use crate::multiscale::{refine_multiscale, CandidateStage, MultiscaleConfig};
use crate::prompting::{FileProvider, MockProvider, SegmentationProvider};
use crate::protocol::{WireClient, WireEmbedder, WireProvider};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    /// Single-class scenes.
    S,
    /// Multi-class scenes.
    M,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(Profile::S),
            "M" | "m" => Ok(Profile::M),
            other => Err(Error::Config(format!("unknown profile {other:?}; expected S or M"))),
        }
    }
}

/// `mock`, `file:<path>` or `wire:<command-or-url>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ProviderSpec {
    Mock,
    File(PathBuf),
    Wire(String),
}

impl FromStr for ProviderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            _ if s == "mock" => Ok(ProviderSpec::Mock),
            Some(("file", p)) if !p.is_empty() => Ok(ProviderSpec::File(p.into())),
            Some(("wire", t)) if !t.is_empty() => Ok(ProviderSpec::Wire(t.to_string())),
            _ => Err(Error::Config(format!(
                "bad provider {s:?}; expected mock, file:<path> or wire:<command-or-url>"
            ))),
        }
    }
}

impl fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProviderSpec::Mock => f.write_str("mock"),
            ProviderSpec::File(p) => write!(f, "file:{}", p.display()),
            ProviderSpec::Wire(t) => write!(f, "wire:{t}"),
        }
    }
}

impl TryFrom<String> for ProviderSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ProviderSpec> for String {
    fn from(p: ProviderSpec) -> String {
        p.to_string()
    }
}

/// `baseline`, `wire` (the provider's wire server) or `wire:<command-or-url>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EmbedderSpec {
    Baseline,
    Wire(Option<String>),
}

impl FromStr for EmbedderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(EmbedderSpec::Baseline),
            "wire" => Ok(EmbedderSpec::Wire(None)),
            _ => match s.strip_prefix("wire:") {
                Some(t) if !t.is_empty() => Ok(EmbedderSpec::Wire(Some(t.to_string()))),
                _ => Err(Error::Config(format!(
                    "bad embedder {s:?}; expected baseline, wire or wire:<command-or-url>"
                ))),
            },
        }
    }
}

impl fmt::Display for EmbedderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedderSpec::Baseline => f.write_str("baseline"),
            EmbedderSpec::Wire(None) => f.write_str("wire"),
            EmbedderSpec::Wire(Some(t)) => write!(f, "wire:{t}"),
        }
    }
}

impl TryFrom<String> for EmbedderSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EmbedderSpec> for String {
    fn from(e: EmbedderSpec) -> String {
        e.to_string()
    }
}

/// Stage switches for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub mask_processing: bool,
    /// Off: every candidate is counted in a single cluster.
    pub clustering: bool,
    /// Off: no multiscale refinement.
    pub scaling: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            mask_processing: true,
            clustering: true,
            scaling: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub grid_spacing: u32,
    pub filter: FilterConfig,
    pub multiscale: MultiscaleConfig,
    pub crop_target: u32,
    pub schedule: ThresholdSchedule,
    pub provider: ProviderSpec,
    pub embedder: EmbedderSpec,
    pub ablation: Ablation,
    /// Settings of the `mock` provider.
    #[serde(default)]
    pub mock: MockProvider,
}

impl PipelineConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (crop_target, schedule) = match profile {
            Profile::S => (224, ThresholdSchedule::single_class()),
            Profile::M => (500, ThresholdSchedule::multi_class()),
        };
        Self {
            profile,
            grid_spacing: 10,
            filter: FilterConfig::default(),
            multiscale: MultiscaleConfig::default(),
            crop_target,
            schedule,
            provider: ProviderSpec::Mock,
            embedder: EmbedderSpec::Baseline,
            ablation: Ablation::default(),
            mock: MockProvider::default(),
        }
    }

    /// Profile defaults overlaid with the fields present in `overrides`.
    /// Objects merge recursively; other values replace.
    pub fn from_json(overrides: &Value) -> Result<Self> {
        let profile = match overrides.get("profile") {
            None => Profile::S,
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::Config(format!("profile: {e}")))?,
        };
        let mut merged = serde_json::to_value(Self::for_profile(profile))?;
        merge_json(&mut merged, overrides.clone());
        let cfg: Self =
            serde_json::from_value(merged).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let v: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_spacing == 0 {
            return Err(Error::Config("grid_spacing must be at least 1".into()));
        }
        if self.crop_target == 0 {
            return Err(Error::Config("crop_target must be at least 1".into()));
        }
        self.filter.validate()?;
        self.multiscale.validate()
    }

    pub fn stage(&self) -> CandidateStage {
        CandidateStage {
            spacing: self.grid_spacing,
            filter: self.filter,
            mask_processing: self.ablation.mask_processing,
        }
    }

    pub fn effective_multiscale(&self) -> MultiscaleConfig {
        MultiscaleConfig {
            max_depth: if self.ablation.scaling { self.multiscale.max_depth } else { 0 },
            ..self.multiscale
        }
    }
}

fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Candidates, their features and the clusters over them for one image.
#[derive(Clone, Debug)]
pub struct CountResult {
    pub candidates: Vec<CandidateInstance>,
    /// Empty when clustering is disabled.
    pub features: Vec<FeatureVector>,
    pub clusters: Vec<Cluster>,
}

impl CountResult {
    pub fn prediction(&self) -> CountPrediction<'_> {
        CountPrediction {
            candidates: &self.candidates,
            clusters: &self.clusters,
        }
    }

    pub fn total(&self) -> usize {
        self.clusters.iter().map(Cluster::size).sum()
    }

    pub fn report(&self, image: &str) -> CountReport {
        let clusters = self
            .clusters
            .iter()
            .map(|cl| ClusterReport {
                members: cl.members.clone(),
                size: cl.size(),
                boxes: cl
                    .members
                    .iter()
                    .filter_map(|id| self.candidates.iter().find(|c| c.id == *id))
                    .map(|c| [c.bbox.x0, c.bbox.y0, c.bbox.x1, c.bbox.y1])
                    .collect(),
            })
            .collect();
        CountReport {
            image: image.to_string(),
            clusters,
            total: self.total(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub members: Vec<usize>,
    pub size: usize,
    /// `[x0, y0, x1, y1]`, exclusive upper corner.
    pub boxes: Vec<[u32; 4]>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountReport {
    pub image: String,
    pub clusters: Vec<ClusterReport>,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: usize,
    pub bbox: [u32; 4],
    pub area: u64,
    pub score: f32,
    pub point_index: usize,
    pub slot: usize,
    pub tiles: Vec<u8>,
    pub rle: RleMask,
}

pub fn candidate_records(candidates: &[CandidateInstance]) -> Vec<CandidateRecord> {
    candidates
        .iter()
        .map(|c| CandidateRecord {
            id: c.id,
            bbox: [c.bbox.x0, c.bbox.y0, c.bbox.x1, c.bbox.y1],
            area: c.mask.area(),
            score: c.score,
            point_index: c.source.point_index,
            slot: c.source.slot,
            tiles: c.source.tiles.clone(),
            rle: RleMask::encode(&c.mask),
        })
        .collect()
}

pub struct Pipeline {
    cfg: PipelineConfig,
    provider: Box<dyn SegmentationProvider>,
    embedder: Box<dyn Embedder>,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline").field("cfg", &self.cfg).finish()
    }
}

impl Pipeline {
    pub fn new(
        cfg: PipelineConfig,
        provider: Box<dyn SegmentationProvider>,
        embedder: Box<dyn Embedder>,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            provider,
            embedder,
        })
    }

    /// Build the provider and embedder named in `cfg`. Wire servers are
    /// contacted (and handshaken) here.
    pub fn from_config(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut wire: Option<(String, Arc<WireClient>)> = None;
        let provider: Box<dyn SegmentationProvider> = match &cfg.provider {
            ProviderSpec::Mock => Box::new(cfg.mock.clone()),
            ProviderSpec::File(p) => Box::new(FileProvider::open(p)?),
            ProviderSpec::Wire(t) => {
                let client = Arc::new(WireClient::open(t)?);
                wire = Some((t.clone(), client.clone()));
                Box::new(WireProvider::new(client)?)
            }
        };
        let embedder: Box<dyn Embedder> = match &cfg.embedder {
            EmbedderSpec::Baseline => Box::new(BaselineEmbedder::default()),
            EmbedderSpec::Wire(target) => {
                let client = match (target, &wire) {
                    (None, Some((_, c))) => c.clone(),
                    (Some(t), Some((wt, c))) if t == wt => c.clone(),
                    (Some(t), _) => Arc::new(WireClient::open(t)?),
                    (None, None) => {
                        return Err(Error::Config(
                            "embedder `wire` needs a wire provider or an explicit wire:<target>".into(),
                        ))
                    }
                };
                Box::new(CachingEmbedder::new(WireEmbedder::new(client)?))
            }
        };
        Self::new(cfg, provider, embedder)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn candidates(&self, img: &Image, key: &str) -> Result<Vec<CandidateInstance>> {
        refine_multiscale(
            img,
            &self.provider,
            &self.cfg.stage(),
            &self.cfg.effective_multiscale(),
            key,
        )
    }

    pub fn embed_candidates(&self, img: &Image, candidates: &[CandidateInstance]) -> Result<Vec<FeatureVector>> {
        let target = self.cfg.crop_target;
        candidates
            .par_iter()
            .map(|c| embed(&self.embedder, &prepare_crop(img, c, target)?, c.id))
            .collect()
    }

    pub fn count(&self, img: &Image, key: &str) -> Result<CountResult> {
        let candidates = self.candidates(img, key)?;
        if candidates.is_empty() {
            return Ok(CountResult {
                candidates,
                features: Vec::new(),
                clusters: Vec::new(),
            });
        }
        if !self.cfg.ablation.clustering {
            let cluster = Cluster {
                members: candidates.iter().map(|c| c.id).collect(),
                centroid: Vec::new(),
            };
            return Ok(CountResult {
                candidates,
                features: Vec::new(),
                clusters: vec![cluster],
            });
        }
        let features = self.embed_candidates(img, &candidates)?;
        let clusters = finch_threshold_cluster(&features, &self.cfg.schedule)?;
        Ok(CountResult {
            candidates,
            features,
            clusters,
        })
    }

    pub fn evaluate_record(&self, rec: &DatasetRecord) -> Result<ImageEvaluation> {
        let img = Image::load(&rec.image_path)?;
        let key = rec.image_path.to_string_lossy();
        let result = self.count(&img, &key)?;
        evaluate_image(&rec.name(), &result.prediction(), &rec.gt)
    }

    /// Evaluate every record with at most `max_gt` annotated objects.
    /// Images run in parallel on the current rayon pool.
    pub fn evaluate(&self, records: &[DatasetRecord], max_gt: Option<usize>) -> Result<MetricsReport> {
        let images: Vec<ImageEvaluation> = records
            .par_iter()
            .filter(|r| max_gt.is_none_or(|m| r.gt.total() <= m))
            .map(|r| self.evaluate_record(r))
            .collect::<Result<_>>()?;
        aggregate(images)
    }
}

/// Fixed palette; cluster `k` is drawn in `PALETTE[k % 16]`.
pub const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

/// Copy of `img` with every clustered candidate's box outlined in its
/// cluster colour.
pub fn render_visualization(img: &Image, result: &CountResult) -> Image {
    let mut out = img.clone();
    for (rank, cl) in result.clusters.iter().enumerate() {
        let color = PALETTE[rank % PALETTE.len()];
        for id in &cl.members {
            if let Some(c) = result.candidates.iter().find(|c| c.id == *id) {
                let b = c.bbox;
                for t in 0..2u32 {
                    if b.x0 + t >= b.x1 || b.y0 + t >= b.y1 {
                        break;
                    }
                    let (x0, y0, x1, y1) = (b.x0 + t, b.y0 + t, b.x1 - 1 - t, b.y1 - 1 - t);
                    for x in x0..=x1 {
                        out.put_pixel(x, y0, color);
                        out.put_pixel(x, y1, color);
                    }
                    for y in y0..=y1 {
                        out.put_pixel(x0, y, color);
                        out.put_pixel(x1, y, color);
                    }
                }
            }
        }
    }
    out
}
