//! Batch front-end: configuration, the search/enumerate/metrics/ablation
//! commands and their on-disk artifacts.
//!
//! Every file is written to a temporary sibling and renamed into place, so a
//! reader never observes a half-written archive or checkpoint.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluator::{
    AccuracyModel, BackendRegistry, BackendSettings, Evaluator, ExitProfileModel, HardwareModelParams, LookupTable,
};
use crate::genome::{BackboneGenome, DeviceSpec, DvfsGenome, ExitGenome, SearchSpaceSpec};
use crate::ioe::{dynamic_fitness, ioe_objectives, run_ioe, IoeCandidate, IoeConfig, IoeMember};
use crate::metrics::{hypervolume, hypervolume_monte_carlo, ratio_of_dominance, Front};
use crate::moea::{dominates, Direction, ObjectiveVector};
use crate::ooe::{combined_objectives, run_ooe, FinalSolution, GenerationSnapshot, OoeConfig};
use crate::rng::seeded;

pub const SCHEMA_VERSION: u32 = 1;
/// Overrides the configured output directory (a `--out` flag wins over it).
pub const OUT_DIR_ENV: &str = "BILEVEL_OUT_DIR";
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorConfig {
    /// Registered hardware backend name.
    pub backend: String,
    pub lookup_csv: Option<PathBuf>,
    pub hardware: HardwareModelParams,
    pub accuracy: AccuracyModel,
    pub exit_profile: ExitProfileModel,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig {
            backend: "synthetic".into(),
            lookup_csv: None,
            hardware: HardwareModelParams::default(),
            accuracy: AccuracyModel::default(),
            exit_profile: ExitProfileModel::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnumerateConfig {
    pub cap: u64,
}

impl Default for EnumerateConfig {
    fn default() -> Self {
        EnumerateConfig {
            cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub gammas: Vec<f64>,
    /// Explicit backbone; sampled from `backbone_seed` (or the run seed)
    /// when absent.
    pub backbone: Option<BackboneGenome>,
    pub backbone_seed: Option<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            gammas: vec![0.0, 1.0],
            backbone: None,
            backbone_seed: None,
        }
    }
}

fn default_device() -> String {
    "agx_volta_gpu".into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_device")]
    pub device: String,
    #[serde(default)]
    pub space: SearchSpaceSpec,
    #[serde(default)]
    pub evaluator: EvaluatorConfig,
    #[serde(default)]
    pub ooe: OoeConfig,
    #[serde(default)]
    pub ioe: IoeConfig,
    #[serde(default)]
    pub enumerate: EnumerateConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// A config with every default and the given seed.
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            device: default_device(),
            space: SearchSpaceSpec::default(),
            evaluator: EvaluatorConfig::default(),
            ooe: OoeConfig::default(),
            ioe: IoeConfig::default(),
            enumerate: EnumerateConfig::default(),
            ablation: AblationConfig::default(),
            output_dir: default_output_dir(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Parses and validates a TOML file. A relative `lookup_csv` is resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: RunConfig = toml::from_str(&text)?;
        if let Some(csv) = &config.evaluator.lookup_csv {
            if csv.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                config.evaluator.lookup_csv = Some(base.join(csv));
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        self.space.device(&self.device)?;
        self.evaluator.hardware.validate()?;
        self.ooe.validate()?;
        self.ioe.validate()?;
        if !BackendRegistry::with_builtins().names().contains(&self.evaluator.backend.as_str()) {
            return Err(Error::UnknownBackend {
                name: self.evaluator.backend.clone(),
                known: BackendRegistry::with_builtins().names().join(", "),
            });
        }
        if let Some(csv) = &self.evaluator.lookup_csv {
            if !csv.is_file() {
                return Err(Error::Config(format!("lookup_csv {} does not exist", csv.display())));
            }
        }
        if let Some(b) = &self.ablation.backbone {
            b.validate(&self.space)?;
        }
        if self.ablation.gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::Config("ablation gammas must be nonnegative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn digest(&self) -> String {
        let canonical = RunConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn device_spec(&self) -> Result<DeviceSpec> {
        self.space.device(&self.device).cloned()
    }

    pub fn build_evaluator(&self, registry: &BackendRegistry) -> Result<Evaluator> {
        let settings = BackendSettings {
            hardware: self.evaluator.hardware,
            lookup_csv: self.evaluator.lookup_csv.clone(),
        };
        let backend = registry.build(&self.evaluator.backend, &settings)?;
        Ok(Evaluator::new(
            self.space.clone(),
            backend,
            self.evaluator.accuracy,
            self.evaluator.exit_profile,
            self.evaluator.hardware.exit_overhead_fraction,
            self.seed,
        ))
    }
}

/// The persisted result of a search, also used for per-generation checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveFile {
    pub schema_version: u32,
    pub config_digest: String,
    pub config: RunConfig,
    pub generations_completed: usize,
    pub snapshots: Vec<GenerationSnapshot>,
    pub solutions: Vec<FinalSolution>,
    pub static_evaluations: u64,
    pub dynamic_evaluations: u64,
}

impl ArchiveFile {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{} is not a readable archive: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        to_json_bytes(self)
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let perms = std::fs::Permissions::from_mode(0o644);
        std::fs::set_permissions(tmp.path(), perms).map_err(|e| Error::io(tmp.path(), e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// One plot-ready row per final solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontRow {
    pub backbone: String,
    pub exits: String,
    pub device: String,
    pub compute_idx: usize,
    pub emc_idx: Option<usize>,
    pub f_compute_ghz: f64,
    pub f_emc_ghz: Option<f64>,
    pub n_exits: usize,
    pub accuracy: f64,
    pub latency_ms: f64,
    pub energy_mj: f64,
    pub mean_n: f64,
    pub energy_ratio: f64,
    pub latency_ratio: f64,
    pub mean_dissim: f64,
    pub effective_correctness: f64,
    pub scalar_d: f64,
    pub ioe_hv: f64,
}

impl FrontRow {
    pub fn from_solution(s: &FinalSolution, device: &DeviceSpec) -> Result<Self> {
        let (f_compute_ghz, f_emc_ghz) = s.dvfs.frequencies(device)?;
        Ok(FrontRow {
            backbone: s.backbone.encode(),
            exits: s.exits.encode(),
            device: s.dvfs.device.clone(),
            compute_idx: s.dvfs.compute_idx,
            emc_idx: s.dvfs.emc_idx,
            f_compute_ghz,
            f_emc_ghz,
            n_exits: s.dynamic_score.n_exits,
            accuracy: s.static_score.accuracy,
            latency_ms: s.static_score.latency_ms,
            energy_mj: s.static_score.energy_mj,
            mean_n: s.dynamic_score.mean_n,
            energy_ratio: s.dynamic_score.mean_energy_ratio,
            latency_ratio: s.dynamic_score.mean_latency_ratio,
            mean_dissim: s.dynamic_score.mean_dissim,
            effective_correctness: s.dynamic_score.effective_correctness,
            scalar_d: s.dynamic_score.scalar_d,
            ioe_hv: s.ioe_hv,
        })
    }
}

pub fn front_csv(solutions: &[FinalSolution], device: &DeviceSpec) -> Result<Vec<u8>> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    if solutions.is_empty() {
        wtr.write_record(FRONT_COLUMNS)?;
    }
    for s in solutions {
        wtr.serialize(FrontRow::from_solution(s, device)?)?;
    }
    wtr.into_inner().map_err(|e| Error::io("<front csv>", e.into_error()))
}

pub const FRONT_COLUMNS: [&str; 18] = [
    "backbone",
    "exits",
    "device",
    "compute_idx",
    "emc_idx",
    "f_compute_ghz",
    "f_emc_ghz",
    "n_exits",
    "accuracy",
    "latency_ms",
    "energy_mj",
    "mean_n",
    "energy_ratio",
    "latency_ratio",
    "mean_dissim",
    "effective_correctness",
    "scalar_d",
    "ioe_hv",
];

pub fn read_front_rows(path: &Path) -> Result<Vec<FrontRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<FrontRow>, _>>()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchReport {
    pub archive_path: PathBuf,
    pub csv_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub checkpoints_written: usize,
    pub archive: ArchiveFile,
}

/// Runs the nested search and writes `archive.json` and `front.csv` under
/// `out_dir`. `checkpoint.json` is replaced after every generation with the
/// state so far, so an interrupted run keeps its last complete generation.
pub fn cmd_search(config: &RunConfig, out_dir: &Path, force: bool) -> Result<SearchReport> {
    config.validate()?;
    let digest = config.digest();
    let archive_path = out_dir.join("archive.json");
    if archive_path.exists() && !force {
        let existing = ArchiveFile::load(&archive_path)?;
        if existing.config_digest != digest {
            return Err(Error::DigestMismatch {
                path: archive_path,
                found: existing.config_digest,
                expected: digest,
            });
        }
    }
    let device = config.device_spec()?;
    let evaluator = config.build_evaluator(&BackendRegistry::with_builtins())?;
    let mut snapshots: Vec<GenerationSnapshot> = Vec::new();
    let checkpoint = out_dir.join("checkpoint.json");
    let outcome = run_ooe(&device, &evaluator, &config.ooe, &config.ioe, config.seed, |snapshot, solutions| {
        snapshots.push(snapshot.clone());
        let state = ArchiveFile {
            schema_version: SCHEMA_VERSION,
            config_digest: digest.clone(),
            config: config.clone(),
            generations_completed: snapshots.len(),
            snapshots: snapshots.clone(),
            solutions: solutions.to_vec(),
            static_evaluations: snapshot.static_evaluations,
            dynamic_evaluations: snapshot.dynamic_evaluations,
        };
        write_atomic(&checkpoint, &state.to_json()?)
    })?;
    let archive = ArchiveFile {
        schema_version: SCHEMA_VERSION,
        config_digest: digest,
        config: config.clone(),
        generations_completed: outcome.snapshots.len(),
        snapshots: outcome.snapshots,
        solutions: outcome.solutions,
        static_evaluations: outcome.static_evaluations,
        dynamic_evaluations: outcome.dynamic_evaluations,
    };
    let csv_path = out_dir.join("front.csv");
    write_atomic(&csv_path, &front_csv(&archive.solutions, &device)?)?;
    write_atomic(&archive_path, &archive.to_json()?)?;
    Ok(SearchReport {
        archive_path,
        csv_path,
        checkpoints_written: snapshots.len(),
        checkpoint_path: checkpoint,
        archive,
    })
}

/// Indices of points not strictly dominated by any other point. Equal
/// points are all kept.
fn brute_force_front(points: &[ObjectiveVector]) -> Result<Vec<usize>> {
    let mut keep = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let mut dominated = false;
        for q in points {
            if dominates(q, p)? {
                dominated = true;
                break;
            }
        }
        if !dominated {
            keep.push(i);
        }
    }
    Ok(keep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Enumeration {
    pub cardinality: u128,
    pub backbones: usize,
    pub dynamic_evaluations: u64,
    pub solutions: Vec<FinalSolution>,
}

/// Exhaustive bi-level front: every (exits, DVFS) pair of every backbone is
/// scored, each backbone keeps its exact inner front, and backbones are
/// filtered on the same combined vector the search uses.
pub fn enumerate_front(config: &RunConfig, evaluator: &Evaluator) -> Result<Enumeration> {
    let device = config.device_spec()?;
    let space = &evaluator.space;
    let cardinality = space.joint_cardinality(&device);
    if cardinality > config.enumerate.cap as u128 {
        return Err(Error::CapExceeded {
            cardinality,
            cap: config.enumerate.cap as u128,
        });
    }
    let dynamic_base = evaluator.dynamic_evaluations();
    let mut per_backbone: Vec<(ObjectiveVector, Vec<FinalSolution>)> = Vec::new();
    for b in space.enumerate_backbones() {
        let static_score = evaluator.eval_static(&b, &device)?;
        let profile = evaluator.exit_profile(&b)?;
        let n_bits = b.total_layers(space) - space.exit_min_position;
        let mut members = Vec::new();
        for exits in ExitGenome::enumerate(n_bits) {
            for dvfs in DvfsGenome::enumerate(&device) {
                let score = dynamic_fitness(&b, &exits, &dvfs, &profile, &static_score, &device, evaluator, config.ioe.gamma)?;
                let obj = ioe_objectives(&score, config.ioe.objective_mode);
                members.push((
                    IoeMember {
                        candidate: IoeCandidate { exits: exits.clone(), dvfs },
                        score,
                    },
                    obj,
                ));
            }
        }
        let objs: Vec<ObjectiveVector> = members.iter().map(|(_, o)| o.clone()).collect();
        let inner: Vec<(IoeMember, ObjectiveVector)> =
            brute_force_front(&objs)?.into_iter().map(|i| members[i].clone()).collect();
        let hv = crate::ioe::archive_summary(&inner.iter().map(|(m, _)| m.clone()).collect::<Vec<_>>())?;
        let combined = combined_objectives(&static_score, hv);
        let rows = inner
            .into_iter()
            .map(|(m, o)| FinalSolution {
                backbone: b.clone(),
                exits: m.candidate.exits,
                dvfs: m.candidate.dvfs,
                static_score,
                dynamic_score: m.score,
                objectives: combined.clone(),
                ioe_objectives: o,
                ioe_hv: hv,
            })
            .collect();
        per_backbone.push((combined, rows));
    }
    let backbones = per_backbone.len();
    let objs: Vec<ObjectiveVector> = per_backbone.iter().map(|(o, _)| o.clone()).collect();
    let mut front: Vec<(BackboneGenome, Vec<FinalSolution>)> = brute_force_front(&objs)?
        .into_iter()
        .map(|i| (per_backbone[i].1[0].backbone.clone(), per_backbone[i].1.clone()))
        .collect();
    front.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(Enumeration {
        cardinality,
        backbones,
        dynamic_evaluations: evaluator.dynamic_evaluations() - dynamic_base,
        solutions: front.into_iter().flat_map(|(_, rows)| rows).collect(),
    })
}

/// Writes the exhaustive front to `truth.csv` under `out_dir`.
pub fn cmd_enumerate(config: &RunConfig, out_dir: &Path) -> Result<(PathBuf, Enumeration)> {
    config.validate()?;
    let evaluator = config.build_evaluator(&BackendRegistry::with_builtins())?;
    let enumeration = enumerate_front(config, &evaluator)?;
    let path = out_dir.join("truth.csv");
    write_atomic(&path, &front_csv(&enumeration.solutions, &config.device_spec()?)?)?;
    Ok((path, enumeration))
}

/// Parses `col:max,col:min,...`.
pub fn parse_objectives(text: &str) -> Result<Vec<(String, Direction)>> {
    text.split(',')
        .map(|part| {
            let (name, dir) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("objective '{part}' is not of the form column:max|min")))?;
            let dir = match dir {
                "max" => Direction::Maximize,
                "min" => Direction::Minimize,
                other => return Err(Error::Config(format!("unknown direction '{other}'"))),
            };
            if !FRONT_COLUMNS.contains(&name) {
                return Err(Error::Config(format!("unknown column '{name}'")));
            }
            Ok((name.to_string(), dir))
        })
        .collect()
}

pub fn parse_reference(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("reference value '{v}' is not a number")))
        })
        .collect()
}

pub const DEFAULT_METRIC_OBJECTIVES: &str = "accuracy:max,latency_ms:min,energy_mj:min,ioe_hv:max";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub objectives: Vec<String>,
    pub reference: Vec<f64>,
    pub hv_method: String,
    pub hv_a: f64,
    pub hv_b: f64,
    pub hv_a_std_error: Option<f64>,
    pub hv_b_std_error: Option<f64>,
    /// Points lying outside the reference box, which add no volume.
    pub clipped_a: usize,
    pub clipped_b: usize,
    pub rod_a_over_b: f64,
    pub rod_b_over_a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarlo {
    pub samples: usize,
    pub seed: u64,
}

fn csv_headers(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    Ok(rdr.headers()?.iter().map(str::to_string).collect())
}

fn column(row: &FrontRow, name: &str) -> f64 {
    match name {
        "compute_idx" => row.compute_idx as f64,
        "emc_idx" => row.emc_idx.map_or(f64::NAN, |v| v as f64),
        "f_compute_ghz" => row.f_compute_ghz,
        "f_emc_ghz" => row.f_emc_ghz.unwrap_or(f64::NAN),
        "n_exits" => row.n_exits as f64,
        "accuracy" => row.accuracy,
        "latency_ms" => row.latency_ms,
        "energy_mj" => row.energy_mj,
        "mean_n" => row.mean_n,
        "energy_ratio" => row.energy_ratio,
        "latency_ratio" => row.latency_ratio,
        "mean_dissim" => row.mean_dissim,
        "effective_correctness" => row.effective_correctness,
        "scalar_d" => row.scalar_d,
        "ioe_hv" => row.ioe_hv,
        _ => f64::NAN,
    }
}

fn hv_of(front: &Front, mc: MonteCarlo) -> Result<(f64, Option<f64>)> {
    if front.dimension() <= 3 {
        Ok((hypervolume(front)?, None))
    } else {
        let est = hypervolume_monte_carlo(front, mc.samples, mc.seed)?;
        Ok((est.value, Some(est.std_error)))
    }
}

/// Hypervolume of both fronts and the ratio of dominance both ways.
pub fn compare_fronts(
    a: &[ObjectiveVector],
    b: &[ObjectiveVector],
    reference: ObjectiveVector,
    mc: MonteCarlo,
) -> Result<(f64, f64, Option<f64>, Option<f64>, f64, f64)> {
    let front_a = Front::clipped(a.to_vec(), reference.clone())?;
    let front_b = Front::clipped(b.to_vec(), reference.clone())?;
    let (hv_a, se_a) = hv_of(&front_a, mc)?;
    let (hv_b, se_b) = hv_of(&front_b, mc)?;
    // dominance is judged on every point, inside the box or not
    let far = ObjectiveVector::new(
        reference.directions().iter().map(|d| -d.sign() * f64::MAX).collect(),
        reference.directions().to_vec(),
    )?;
    let all_a = Front::new(a.to_vec(), far.clone())?;
    let all_b = Front::new(b.to_vec(), far)?;
    Ok((
        hv_a,
        hv_b,
        se_a,
        se_b,
        ratio_of_dominance(&all_a, &all_b)?,
        ratio_of_dominance(&all_b, &all_a)?,
    ))
}

pub fn cmd_metrics(a: &Path, b: &Path, objectives: &str, reference: &str, mc: MonteCarlo) -> Result<MetricsReport> {
    let (ha, hb) = (csv_headers(a)?, csv_headers(b)?);
    if ha != hb {
        return Err(Error::Shape(format!(
            "{} and {} have different columns",
            a.display(),
            b.display()
        )));
    }
    let objectives = parse_objectives(objectives)?;
    let reference_values = parse_reference(reference)?;
    if reference_values.len() != objectives.len() {
        return Err(Error::Shape(format!(
            "{} objectives but {} reference values",
            objectives.len(),
            reference_values.len()
        )));
    }
    let directions: Vec<Direction> = objectives.iter().map(|(_, d)| *d).collect();
    let points = |path: &Path| -> Result<Vec<ObjectiveVector>> {
        read_front_rows(path)?
            .iter()
            .map(|row| ObjectiveVector::new(objectives.iter().map(|(c, _)| column(row, c)).collect(), directions.clone()))
            .collect()
    };
    let (pa, pb) = (points(a)?, points(b)?);
    let reference = ObjectiveVector::new(reference_values.clone(), directions)?;
    let inside = |pts: &[ObjectiveVector]| Front::clipped(pts.to_vec(), reference.clone()).map(|f| f.points().len());
    let unique = |pts: &[ObjectiveVector]| crate::metrics::nondominated_indices(pts).map(|v| v.len());
    let clipped_a = unique(&pa)? - inside(&pa)?;
    let clipped_b = unique(&pb)? - inside(&pb)?;
    let (hv_a, hv_b, se_a, se_b, rod_ab, rod_ba) = compare_fronts(&pa, &pb, reference, mc)?;
    Ok(MetricsReport {
        objectives: objectives
            .iter()
            .map(|(c, d)| format!("{c}:{}", if *d == Direction::Maximize { "max" } else { "min" }))
            .collect(),
        reference: reference_values,
        hv_method: if se_a.is_some() { "monte_carlo".into() } else { "exact".into() },
        hv_a,
        hv_b,
        hv_a_std_error: se_a,
        hv_b_std_error: se_b,
        clipped_a,
        clipped_b,
        rod_a_over_b: rod_ab,
        rod_b_over_a: rod_ba,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub gamma: f64,
    pub members: Vec<IoeMember>,
    /// HV of (mean N max, energy ratio min) against (0, 1).
    pub hv: f64,
    /// Mean over members with two or more exits of their mean pairwise
    /// |N_i - N_j|.
    pub n_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPair {
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub rod_a_over_b: f64,
    pub rod_b_over_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub backbone: BackboneGenome,
    pub arms: Vec<AblationArm>,
    pub pairs: Vec<AblationPair>,
}

/// Mean pairwise |N_i - N_j| over the sampled exits of each member, averaged
/// over members with at least two exits (0 when there are none).
pub fn n_spread(members: &[IoeMember], profile: &crate::evaluator::ExitProfile, space: &SearchSpaceSpec) -> f64 {
    let spreads: Vec<f64> = members
        .iter()
        .filter_map(|m| {
            let ns: Vec<f64> = m
                .candidate
                .exits
                .positions(space)
                .iter()
                .filter_map(|&p| profile.n_at(p))
                .collect();
            if ns.len() < 2 {
                return None;
            }
            let mut total = 0.0;
            let mut pairs = 0usize;
            for i in 0..ns.len() {
                for j in i + 1..ns.len() {
                    total += (ns[i] - ns[j]).abs();
                    pairs += 1;
                }
            }
            Some(total / pairs as f64)
        })
        .collect();
    if spreads.is_empty() {
        0.0
    } else {
        spreads.iter().sum::<f64>() / spreads.len() as f64
    }
}

fn gamma_free_objectives(members: &[IoeMember]) -> Result<Vec<ObjectiveVector>> {
    members
        .iter()
        .map(|m| {
            ObjectiveVector::new(
                vec![m.score.mean_n, m.score.mean_energy_ratio],
                vec![Direction::Maximize, Direction::Minimize],
            )
        })
        .collect()
}

/// Runs the inner engine on one backbone once per gamma, each arm from the
/// same seed, and compares the arms on gamma-independent objectives.
pub fn ablate_dissim(config: &RunConfig, gammas: &[f64]) -> Result<AblationReport> {
    if gammas.is_empty() {
        return Err(Error::Config("gamma list must not be empty".into()));
    }
    if gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
        return Err(Error::Config("gammas must be nonnegative".into()));
    }
    config.validate()?;
    let device = config.device_spec()?;
    let evaluator = config.build_evaluator(&BackendRegistry::with_builtins())?;
    let space = &evaluator.space;
    let backbone = match &config.ablation.backbone {
        Some(b) => b.clone(),
        None => BackboneGenome::sample(space, &mut seeded(config.ablation.backbone_seed.unwrap_or(config.seed))),
    };
    let static_score = evaluator.eval_static(&backbone, &device)?;
    let profile = evaluator.exit_profile(&backbone)?;
    let reference = ObjectiveVector::new(vec![0.0, 1.0], vec![Direction::Maximize, Direction::Minimize])?;
    let mut arms = Vec::with_capacity(gammas.len());
    let mut fronts = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let ioe = IoeConfig { gamma, ..config.ioe };
        let outcome = run_ioe(&backbone, &static_score, &device, &evaluator, &ioe, &mut seeded(config.seed))?;
        let members = outcome.members();
        let objs = gamma_free_objectives(&members)?;
        let hv = hypervolume(&Front::clipped(objs.clone(), reference.clone())?)?;
        arms.push(AblationArm {
            gamma,
            n_spread: n_spread(&members, &profile, space),
            members,
            hv,
        });
        fronts.push(objs);
    }
    let mut pairs = Vec::new();
    for i in 0..arms.len() {
        for j in i + 1..arms.len() {
            let mc = MonteCarlo { samples: 1, seed: 0 };
            let (_, _, _, _, ab, ba) = compare_fronts(&fronts[i], &fronts[j], reference.clone(), mc)?;
            pairs.push(AblationPair {
                gamma_a: arms[i].gamma,
                gamma_b: arms[j].gamma,
                rod_a_over_b: ab,
                rod_b_over_a: ba,
            });
        }
    }
    Ok(AblationReport { backbone, arms, pairs })
}

/// Compact JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[derive(Debug, Parser)]
#[command(name = "bilevel", version, about = "Nested co-search of backbones, early exits and DVFS settings")]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides the environment and the config).
    #[arg(long, env = OUT_DIR_ENV)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        let out = self.out.clone().unwrap_or_else(|| config.output_dir.clone());
        config.output_dir = out.clone();
        Ok((config, out))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the nested search.
    Search {
        #[command(flatten)]
        run: RunArgs,
        /// Overwrite an archive produced by a different config.
        #[arg(long)]
        force: bool,
    },
    /// Exhaustively evaluate a small space and write its true front.
    Enumerate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare two front CSVs by hypervolume and ratio of dominance.
    Metrics {
        front_a: PathBuf,
        front_b: PathBuf,
        /// Comma-separated column:max|min list.
        #[arg(long, default_value = DEFAULT_METRIC_OBJECTIVES)]
        objectives: String,
        /// Comma-separated reference point, one value per objective.
        #[arg(long, allow_hyphen_values = true)]
        reference: String,
        /// Monte Carlo samples for more than three objectives.
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for metrics.json.
        #[arg(long, env = OUT_DIR_ENV)]
        out: Option<PathBuf>,
    },
    /// Run the inner engine once per gamma on a single backbone.
    AblateDissim {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated gamma values (defaults to the config's list).
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// Tabulate the configured backend into a lookup CSV.
    ExportTable {
        #[command(flatten)]
        run: RunArgs,
        /// Assumed memory traffic per flop.
        #[arg(long, default_value_t = 0.01)]
        bytes_per_flop: f64,
    },
}

/// Executes a parsed command line, printing a short summary to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search { run, force } => {
            let (config, out) = run.resolve()?;
            let report = cmd_search(&config, &out, force)?;
            println!(
                "{} solutions over {} generations ({} static, {} dynamic evaluations) -> {}",
                report.archive.solutions.len(),
                report.archive.generations_completed,
                report.archive.static_evaluations,
                report.archive.dynamic_evaluations,
                report.archive_path.display()
            );
        }
        Command::Enumerate { run } => {
            let (config, out) = run.resolve()?;
            let (path, e) = cmd_enumerate(&config, &out)?;
            println!(
                "{} candidates over {} backbones, {} on the front -> {}",
                e.cardinality,
                e.backbones,
                e.solutions.len(),
                path.display()
            );
        }
        Command::Metrics {
            front_a,
            front_b,
            objectives,
            reference,
            samples,
            seed,
            out,
        } => {
            let report = cmd_metrics(&front_a, &front_b, &objectives, &reference, MonteCarlo { samples, seed })?;
            let dir = out.unwrap_or_else(|| PathBuf::from("."));
            write_atomic(&dir.join("metrics.json"), &to_json_bytes(&report)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::AblateDissim { run, gammas } => {
            let (config, out) = run.resolve()?;
            let gammas = gammas.unwrap_or_else(|| config.ablation.gammas.clone());
            let report = ablate_dissim(&config, &gammas)?;
            write_atomic(&out.join("ablation.json"), &to_json_bytes(&report)?)?;
            for arm in &report.arms {
                println!(
                    "gamma {}: {} members, hv {:.6}, n-spread {:.6}",
                    arm.gamma,
                    arm.members.len(),
                    arm.hv,
                    arm.n_spread
                );
            }
            for p in &report.pairs {
                println!(
                    "rod({} over {}) = {:.4}, rod({} over {}) = {:.4}",
                    p.gamma_a, p.gamma_b, p.rod_a_over_b, p.gamma_b, p.gamma_a, p.rod_b_over_a
                );
            }
        }
        Command::ExportTable { run, bytes_per_flop } => {
            let (config, out) = run.resolve()?;
            let device = config.device_spec()?;
            let evaluator = config.build_evaluator(&BackendRegistry::with_builtins())?;
            let buckets: Vec<f64> = (0..=24).map(|i| 4.0 + 0.5 * i as f64).collect();
            let table = LookupTable::tabulate(evaluator.backend.as_ref(), &device, &buckets, bytes_per_flop)?;
            let mut bytes = Vec::new();
            table.write_to(&mut bytes)?;
            let path = out.join("lookup.csv");
            write_atomic(&path, &bytes)?;
            println!("{} rows -> {}", table.rows().len(), path.display());
        }
    }
    Ok(())
}
