//! Deterministic fitness surrogates: workloads, accuracy, per-exit
//! correctness profiles, hardware latency/energy and the exit training loss.
//!
//! Hardware cost is produced by a [`HardwareBackend`]. Two backends ship with
//! the crate, an analytical DVFS model (`synthetic`) and a CSV lookup table
//! (`lookup`); both are registered by name in a [`BackendRegistry`] and picked
//! at runtime from the run configuration.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genome::{admissible_positions, BackboneGenome, DeviceSpec, DvfsGenome, SearchSpaceSpec};
use crate::rng::{hash_words, unit_symmetric};

/// Abstract compute and memory-traffic units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Workload {
    pub flops: f64,
    pub bytes: f64,
}

/// Per-layer (flops, bytes), each block's layer repeated depth times.
fn layer_costs(backbone: &BackboneGenome, space: &SearchSpaceSpec) -> Vec<(f64, f64)> {
    let res_scale = (backbone.resolution(space) as f64 / 32.0).powi(2);
    backbone
        .block_values(space)
        .iter()
        .flat_map(|b| {
            let (w, e, k) = (b.width as f64, b.expand as f64, b.kernel as f64);
            let flops = w * e * k * k * res_scale;
            let bytes = 4.0 * w * e;
            std::iter::repeat_n((flops, bytes), b.depth as usize)
        })
        .collect()
}

/// Workload of the first `upto_layer` layers (`None` for the whole backbone)
/// plus the overhead of every exit in `exit_hosts` hosted at or before that
/// layer. Each exit costs `exit_overhead` times its host layer's flops.
pub fn workload_of(
    backbone: &BackboneGenome,
    space: &SearchSpaceSpec,
    upto_layer: Option<usize>,
    exit_hosts: &[usize],
    exit_overhead: f64,
) -> Result<Workload> {
    let total = backbone.total_layers(space);
    let upto = upto_layer.unwrap_or(total);
    if upto < 1 || upto > total {
        return Err(Error::LayerRange { layer: upto, total });
    }
    let costs = layer_costs(backbone, space);
    let mut work = costs[..upto].iter().fold(Workload::default(), |acc, &(f, b)| Workload {
        flops: acc.flops + f,
        bytes: acc.bytes + b,
    });
    for &host in exit_hosts.iter().filter(|&&h| h >= 1 && h <= upto) {
        work.flops += exit_overhead * costs[host - 1].0;
    }
    Ok(work)
}

/// `workload_of(b, Some(p), exits)` for every `p` in the ascending list
/// `exits`, in one pass over the layers.
pub fn exit_workloads(
    backbone: &BackboneGenome,
    space: &SearchSpaceSpec,
    exits: &[usize],
    exit_overhead: f64,
) -> Result<Vec<Workload>> {
    let total = backbone.total_layers(space);
    if let Some(&bad) = exits.iter().find(|&&p| p < 1 || p > total) {
        return Err(Error::LayerRange { layer: bad, total });
    }
    if !exits.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Shape("exit positions must be strictly ascending".into()));
    }
    let costs = layer_costs(backbone, space);
    let mut out = Vec::with_capacity(exits.len());
    let mut work = Workload::default();
    let mut layer = 0;
    for &p in exits {
        for &(f, b) in &costs[layer..p] {
            work.flops += f;
            work.bytes += b;
        }
        layer = p;
        work.flops += exit_overhead * costs[p - 1].0;
        out.push(work);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AccuracyModel {
    pub a_max: f64,
    pub lambda: f64,
    pub noise: f64,
    /// Compute scale; `None` means the full-model flops of the mid-domain genome.
    pub c_ref: Option<f64>,
}

impl Default for AccuracyModel {
    fn default() -> Self {
        AccuracyModel {
            a_max: 0.9,
            lambda: 1.0,
            noise: 0.01,
            c_ref: None,
        }
    }
}

impl AccuracyModel {
    pub fn reference_flops(&self, space: &SearchSpaceSpec) -> f64 {
        self.c_ref.unwrap_or_else(|| {
            let mid = BackboneGenome::mid_domain(space);
            workload_of(&mid, space, None, &[], 0.0).map(|w| w.flops).unwrap_or(1.0)
        })
    }
}

/// Saturating accuracy-vs-compute curve with a deterministic per-genome jitter.
pub fn accuracy_surrogate(backbone: &BackboneGenome, space: &SearchSpaceSpec, model: &AccuracyModel, seed: u64) -> Result<f64> {
    let flops = workload_of(backbone, space, None, &[], 0.0)?.flops;
    let c_ref = model.reference_flops(space);
    let base = model.a_max * (1.0 - (-model.lambda * flops / c_ref).exp());
    let jitter = if model.noise == 0.0 {
        0.0
    } else {
        model.noise * unit_symmetric(genome_hash(backbone, seed))
    };
    Ok((base + jitter).clamp(0.02, 0.98))
}

fn genome_hash(backbone: &BackboneGenome, seed: u64) -> u64 {
    let words = std::iter::once(backbone.resolution_idx as u64).chain(backbone.blocks.iter().flat_map(|b| {
        [b.depth_idx as u64, b.width_idx as u64, b.kernel_idx as u64, b.expand_idx as u64]
    }));
    hash_words(seed, words)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExitProfileModel {
    pub steepness: f64,
    pub midpoint: f64,
}

impl Default for ExitProfileModel {
    fn default() -> Self {
        ExitProfileModel {
            steepness: 6.0,
            midpoint: 0.35,
        }
    }
}

/// Fraction of inputs correctly classifiable at each admissible exit,
/// assuming every input leaves at the first exit that gets it right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitProfile {
    pub positions: Vec<usize>,
    pub n_values: Vec<f64>,
    pub final_accuracy: f64,
}

impl ExitProfile {
    pub fn n_at(&self, position: usize) -> Option<f64> {
        let first = *self.positions.first()?;
        position.checked_sub(first).and_then(|i| self.n_values.get(i).copied())
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn exit_profile(
    backbone: &BackboneGenome,
    space: &SearchSpaceSpec,
    accuracy: &AccuracyModel,
    model: &ExitProfileModel,
    seed: u64,
) -> Result<ExitProfile> {
    let final_accuracy = accuracy_surrogate(backbone, space, accuracy, seed)?;
    let full = workload_of(backbone, space, None, &[], 0.0)?.flops;
    let positions = admissible_positions(backbone, space);
    let n_values = positions
        .iter()
        .map(|&p| {
            let prefix = workload_of(backbone, space, Some(p), &[], 0.0)?.flops;
            Ok(final_accuracy * logistic(model.steepness * (prefix / full - model.midpoint)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExitProfile {
        positions,
        n_values,
        final_accuracy,
    })
}

/// Coefficients of the analytical latency/power model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HardwareModelParams {
    /// Compute throughput, flops per GHz per ms.
    pub kappa_compute: f64,
    /// Memory throughput, bytes per GHz per ms.
    pub kappa_memory: f64,
    /// Static power, mW.
    pub p0: f64,
    /// Dynamic compute power, mW/GHz^3.
    pub p1: f64,
    /// Memory-controller power, mW/GHz.
    pub p2: f64,
    pub exit_overhead_fraction: f64,
}

impl Default for HardwareModelParams {
    fn default() -> Self {
        // p0 and p2 are kept small enough that energy rises with compute
        // frequency over every default device grid (down to 0.1 GHz).
        HardwareModelParams {
            kappa_compute: 1.0e6,
            kappa_memory: 1.0e5,
            p0: 1.0,
            p1: 1500.0,
            p2: 0.5,
            exit_overhead_fraction: 0.05,
        }
    }
}

impl HardwareModelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.kappa_compute, self.kappa_memory, self.p0, self.p1];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(self.p2.is_finite() && self.p2 >= 0.0) {
            return Err(Error::Config("hardware model: kappa_*, p0, p1 must be positive and p2 nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.exit_overhead_fraction) {
            return Err(Error::Config("exit_overhead_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Analytical latency (ms) and energy (mJ). Devices without an EMC knob run
/// memory at the compute frequency.
pub fn hw_latency_energy(work: &Workload, device: &DeviceSpec, dvfs: &DvfsGenome, params: &HardwareModelParams) -> Result<(f64, f64)> {
    let (f_c, f_m) = dvfs.frequencies(device)?;
    let f_m = f_m.unwrap_or(f_c);
    let latency = work.flops / (params.kappa_compute * f_c) + work.bytes / (params.kappa_memory * f_m);
    let power = params.p0 + params.p1 * f_c.powi(3) + params.p2 * f_m;
    Ok((latency, power * latency / 1e3))
}

/// Strategy interface for hardware cost models.
pub trait HardwareBackend: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// (latency ms, energy mJ) of running `work` on `device` at `dvfs`.
    fn latency_energy(&self, work: &Workload, device: &DeviceSpec, dvfs: &DvfsGenome) -> Result<(f64, f64)>;
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    pub params: HardwareModelParams,
}

impl HardwareBackend for SyntheticBackend {
    fn name(&self) -> &'static str {
        "synthetic"
    }

    fn latency_energy(&self, work: &Workload, device: &DeviceSpec, dvfs: &DvfsGenome) -> Result<(f64, f64)> {
        hw_latency_energy(work, device, dvfs, &self.params)
    }
}

/// One row of the hardware lookup CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupRow {
    pub device: String,
    pub bucket_log10_flops: f64,
    pub f_compute_ghz: f64,
    pub f_emc_ghz: Option<f64>,
    pub latency_ms: f64,
    pub energy_mj: f64,
}

/// Frequencies are matched at 1 kHz resolution.
fn freq_key(f: f64) -> i64 {
    (f * 1e6).round() as i64
}

type FreqPair = (String, i64, Option<i64>);

/// Measured (or tabulated) latency/energy by device, frequency pair and
/// log10-flops bucket.
#[derive(Debug, Clone, Default)]
pub struct LookupTable {
    rows: Vec<LookupRow>,
    index: HashMap<FreqPair, Vec<usize>>,
}

impl LookupTable {
    pub fn from_rows(mut rows: Vec<LookupRow>) -> Result<Self> {
        for row in &rows {
            let ok = [row.bucket_log10_flops, row.f_compute_ghz, row.latency_ms, row.energy_mj]
                .iter()
                .all(|v| v.is_finite())
                && row.latency_ms > 0.0
                && row.energy_mj > 0.0;
            if !ok {
                return Err(Error::Config(format!("lookup row for '{}' has invalid values", row.device)));
            }
        }
        rows.sort_by(|a, b| {
            a.device
                .cmp(&b.device)
                .then(a.f_compute_ghz.total_cmp(&b.f_compute_ghz))
                .then(a.f_emc_ghz.unwrap_or(0.0).total_cmp(&b.f_emc_ghz.unwrap_or(0.0)))
                .then(a.bucket_log10_flops.total_cmp(&b.bucket_log10_flops))
        });
        let mut index: HashMap<FreqPair, Vec<usize>> = HashMap::new();
        for (i, row) in rows.iter().enumerate() {
            let key = (row.device.clone(), freq_key(row.f_compute_ghz), row.f_emc_ghz.map(freq_key));
            index.entry(key).or_default().push(i);
        }
        Ok(LookupTable { rows, index })
    }

    pub fn rows(&self) -> &[LookupRow] {
        &self.rows
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<LookupRow>, _>>()?;
        Self::from_rows(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn write_to(&self, writer: impl Write) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        for row in &self.rows {
            wtr.serialize(row)?;
        }
        wtr.flush().map_err(|e| Error::io("<lookup csv>", e))?;
        Ok(())
    }

    /// Samples `backend` at every DVFS setting of `device` and every bucket.
    /// Memory traffic is taken as `bytes_per_flop` times the bucket flops.
    pub fn tabulate(backend: &dyn HardwareBackend, device: &DeviceSpec, log10_buckets: &[f64], bytes_per_flop: f64) -> Result<Self> {
        let mut rows = Vec::new();
        for dvfs in DvfsGenome::enumerate(device) {
            let (f_c, f_m) = dvfs.frequencies(device)?;
            for &bucket in log10_buckets {
                let flops = 10f64.powf(bucket);
                let work = Workload {
                    flops,
                    bytes: flops * bytes_per_flop,
                };
                let (latency_ms, energy_mj) = backend.latency_energy(&work, device, &dvfs)?;
                rows.push(LookupRow {
                    device: device.name.clone(),
                    bucket_log10_flops: bucket,
                    f_compute_ghz: f_c,
                    f_emc_ghz: f_m,
                    latency_ms,
                    energy_mj,
                });
            }
        }
        Self::from_rows(rows)
    }
}

/// Latency/energy for a workload of `10^log10_flops` at the given
/// frequencies. Exact bucket hits return the row; between buckets both
/// quantities are interpolated linearly in log space; outside the bucket
/// range the nearest bucket is used. Frequencies are never interpolated.
pub fn table_model_lookup(table: &LookupTable, device: &str, log10_flops: f64, f_compute: f64, f_emc: Option<f64>) -> Result<(f64, f64)> {
    let key = (device.to_string(), freq_key(f_compute), f_emc.map(freq_key));
    let slots = table.index.get(&key).ok_or_else(|| Error::LookupMissing {
        device: device.to_string(),
        f_compute,
        f_emc,
    })?;
    let rows: Vec<&LookupRow> = slots.iter().map(|&i| &table.rows[i]).collect();
    let row_values = |r: &LookupRow| (r.latency_ms, r.energy_mj);
    if let Some(hit) = rows.iter().find(|r| (r.bucket_log10_flops - log10_flops).abs() < 1e-12) {
        return Ok(row_values(hit));
    }
    let first = rows[0];
    let last = rows[rows.len() - 1];
    if !(log10_flops > first.bucket_log10_flops) {
        return Ok(row_values(first));
    }
    if log10_flops >= last.bucket_log10_flops {
        return Ok(row_values(last));
    }
    let upper = rows.iter().position(|r| r.bucket_log10_flops > log10_flops).unwrap();
    let (lo, hi) = (rows[upper - 1], rows[upper]);
    let t = (log10_flops - lo.bucket_log10_flops) / (hi.bucket_log10_flops - lo.bucket_log10_flops);
    let lerp_log = |a: f64, b: f64| (a.ln() + t * (b.ln() - a.ln())).exp();
    Ok((lerp_log(lo.latency_ms, hi.latency_ms), lerp_log(lo.energy_mj, hi.energy_mj)))
}

#[derive(Debug, Clone)]
pub struct LookupBackend {
    pub table: LookupTable,
}

impl HardwareBackend for LookupBackend {
    fn name(&self) -> &'static str {
        "lookup"
    }

    fn latency_energy(&self, work: &Workload, device: &DeviceSpec, dvfs: &DvfsGenome) -> Result<(f64, f64)> {
        let (f_c, f_m) = dvfs.frequencies(device)?;
        table_model_lookup(&self.table, &device.name, work.flops.log10(), f_c, f_m)
    }
}

/// Everything a backend factory may need.
#[derive(Debug, Clone, Default)]
pub struct BackendSettings {
    pub hardware: HardwareModelParams,
    pub lookup_csv: Option<PathBuf>,
}

pub type BackendFactory = fn(&BackendSettings) -> Result<Arc<dyn HardwareBackend>>;

/// Name-keyed registry of hardware backend constructors.
pub struct BackendRegistry {
    factories: BTreeMap<&'static str, BackendFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl BackendRegistry {
    pub fn empty() -> Self {
        BackendRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut registry = Self::empty();
        registry.register("synthetic", |settings| {
            settings.hardware.validate()?;
            Ok(Arc::new(SyntheticBackend {
                params: settings.hardware,
            }))
        });
        registry.register("lookup", |settings| {
            let path = settings
                .lookup_csv
                .as_deref()
                .ok_or_else(|| Error::Config("lookup backend needs evaluator.lookup_csv".into()))?;
            Ok(Arc::new(LookupBackend {
                table: LookupTable::load(path)?,
            }))
        });
        registry
    }

    pub fn register(&mut self, name: &'static str, factory: BackendFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn build(&self, name: &str, settings: &BackendSettings) -> Result<Arc<dyn HardwareBackend>> {
        let factory = self.factories.get(name).ok_or_else(|| Error::UnknownBackend {
            name: name.to_string(),
            known: self.names().join(", "),
        })?;
        factory(settings)
    }
}

/// Static evaluation of a backbone at the device's default DVFS setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticScore {
    pub accuracy: f64,
    pub latency_ms: f64,
    pub energy_mj: f64,
}

/// Shared evaluation context with instrumented evaluation counters.
#[derive(Debug)]
pub struct Evaluator {
    pub space: SearchSpaceSpec,
    pub backend: Arc<dyn HardwareBackend>,
    pub accuracy: AccuracyModel,
    pub profile: ExitProfileModel,
    pub exit_overhead: f64,
    pub seed: u64,
    resolved_accuracy: AccuracyModel,
    static_evals: AtomicU64,
    dynamic_evals: AtomicU64,
}

impl Evaluator {
    pub fn new(
        space: SearchSpaceSpec,
        backend: Arc<dyn HardwareBackend>,
        accuracy: AccuracyModel,
        profile: ExitProfileModel,
        exit_overhead: f64,
        seed: u64,
    ) -> Self {
        let resolved_accuracy = AccuracyModel {
            c_ref: Some(accuracy.reference_flops(&space)),
            ..accuracy
        };
        Evaluator {
            space,
            backend,
            accuracy,
            profile,
            exit_overhead,
            seed,
            resolved_accuracy,
            static_evals: AtomicU64::new(0),
            dynamic_evals: AtomicU64::new(0),
        }
    }

    /// Synthetic backend with default models.
    pub fn synthetic(space: SearchSpaceSpec, params: HardwareModelParams, seed: u64) -> Self {
        let overhead = params.exit_overhead_fraction;
        Self::new(
            space,
            Arc::new(SyntheticBackend { params }),
            AccuracyModel::default(),
            ExitProfileModel::default(),
            overhead,
            seed,
        )
    }

    pub fn accuracy_of(&self, backbone: &BackboneGenome) -> Result<f64> {
        accuracy_surrogate(backbone, &self.space, &self.resolved_accuracy, self.seed)
    }

    pub fn exit_profile(&self, backbone: &BackboneGenome) -> Result<ExitProfile> {
        exit_profile(backbone, &self.space, &self.resolved_accuracy, &self.profile, self.seed)
    }

    pub fn workload(&self, backbone: &BackboneGenome, upto_layer: Option<usize>, exit_hosts: &[usize]) -> Result<Workload> {
        workload_of(backbone, &self.space, upto_layer, exit_hosts, self.exit_overhead)
    }

    pub fn exit_workloads(&self, backbone: &BackboneGenome, exits: &[usize]) -> Result<Vec<Workload>> {
        exit_workloads(backbone, &self.space, exits, self.exit_overhead)
    }

    pub fn latency_energy(&self, work: &Workload, device: &DeviceSpec, dvfs: &DvfsGenome) -> Result<(f64, f64)> {
        self.backend.latency_energy(work, device, dvfs)
    }

    /// Counts one static evaluation.
    pub fn eval_static(&self, backbone: &BackboneGenome, device: &DeviceSpec) -> Result<StaticScore> {
        backbone.validate(&self.space)?;
        self.static_evals.fetch_add(1, Ordering::Relaxed);
        let accuracy = self.accuracy_of(backbone)?;
        let work = self.workload(backbone, None, &[])?;
        let (latency_ms, energy_mj) = self.latency_energy(&work, device, &device.default_dvfs())?;
        Ok(StaticScore {
            accuracy,
            latency_ms,
            energy_mj,
        })
    }

    pub(crate) fn count_dynamic(&self) {
        self.dynamic_evals.fetch_add(1, Ordering::Relaxed);
    }

    pub fn static_evaluations(&self) -> u64 {
        self.static_evals.load(Ordering::Relaxed)
    }

    pub fn dynamic_evaluations(&self) -> u64 {
        self.dynamic_evals.load(Ordering::Relaxed)
    }
}

/// One training sample for the exit loss: class probabilities at every
/// exit, at the final classifier, and the true label.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSample {
    pub exit_probs: Vec<Vec<f64>>,
    pub final_probs: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub nll: f64,
    pub kd: f64,
    pub total: f64,
}

const PROB_FLOOR: f64 = 1e-12;

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Probability(format!("{what} is not a probability vector (sum {sum})")));
    }
    Ok(())
}

/// Temperature softening: `p^(1/T)` renormalized.
fn soften(p: &[f64], temperature: f64) -> Vec<f64> {
    let powered: Vec<f64> = p.iter().map(|&x| x.powf(1.0 / temperature)).collect();
    let z: f64 = powered.iter().sum();
    powered.into_iter().map(|x| x / z).collect()
}

/// KL(p || q), with `q` floored so that zero-mass targets stay finite.
fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(PROB_FLOOR)).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Hybrid exit loss over a batch: per sample, the mean over exits of the
/// label NLL plus the temperature-scaled distillation term
/// `T^2 * KL(soften(final) || soften(exit))`, then averaged over samples.
/// A zero probability at the label is floored at 1e-12.
pub fn hybrid_loss(batch: &[LossSample], temperature: f64) -> Result<LossRecord> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Probability(format!("temperature must be positive, got {temperature}")));
    }
    if batch.is_empty() {
        return Err(Error::Probability("empty batch".into()));
    }
    let (mut nll, mut kd) = (0.0, 0.0);
    for sample in batch {
        check_simplex(&sample.final_probs, "final prediction")?;
        if sample.exit_probs.is_empty() {
            return Err(Error::Probability("sample has no exit predictions".into()));
        }
        if sample.label >= sample.final_probs.len() {
            return Err(Error::Probability(format!("label {} out of range", sample.label)));
        }
        let teacher = soften(&sample.final_probs, temperature);
        let (mut s_nll, mut s_kd) = (0.0, 0.0);
        for exit in &sample.exit_probs {
            if exit.len() != sample.final_probs.len() {
                return Err(Error::Probability("exit and final class counts differ".into()));
            }
            check_simplex(exit, "exit prediction")?;
            s_nll += -exit[sample.label].max(PROB_FLOOR).ln();
            s_kd += kl_divergence(&teacher, &soften(exit, temperature)) * temperature * temperature;
        }
        let m = sample.exit_probs.len() as f64;
        nll += s_nll / m;
        kd += s_kd / m;
    }
    let n = batch.len() as f64;
    let (nll, kd) = (nll / n, kd / n);
    Ok(LossRecord { nll, kd, total: nll + kd })
}
