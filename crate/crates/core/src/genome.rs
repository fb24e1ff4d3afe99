//! The three search subspaces (backbones, exits, DVFS settings), their
//! index-based encodings and the variation operators.
//!
//! All genomes store indices into the domains of a [`SearchSpaceSpec`], never
//! raw values, so domains can be swapped in configuration without touching the
//! operators. Layers are numbered from 1 over the flattened block sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SearchRng;

/// A device and its discrete DVFS frequency tables (GHz).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    pub compute_freq_levels: Vec<f64>,
    /// Empty for devices without a memory-controller knob.
    #[serde(default)]
    pub emc_freq_levels: Vec<f64>,
    pub default_compute_idx: usize,
    #[serde(default)]
    pub default_emc_idx: Option<usize>,
}

impl DeviceSpec {
    /// Builds a device whose levels are evenly spaced over `[lo, hi]`,
    /// defaulting to the highest level of each table.
    pub fn evenly_spaced(name: &str, compute: (f64, f64, usize), emc: Option<(f64, f64, usize)>) -> Self {
        let compute_freq_levels = linspace(compute.0, compute.1, compute.2);
        let emc_freq_levels = emc.map(|(lo, hi, n)| linspace(lo, hi, n)).unwrap_or_default();
        DeviceSpec {
            name: name.to_string(),
            default_compute_idx: compute_freq_levels.len() - 1,
            default_emc_idx: emc_freq_levels.len().checked_sub(1),
            compute_freq_levels,
            emc_freq_levels,
        }
    }

    pub fn has_emc(&self) -> bool {
        !self.emc_freq_levels.is_empty()
    }

    pub fn default_dvfs(&self) -> DvfsGenome {
        DvfsGenome {
            device: self.name.clone(),
            compute_idx: self.default_compute_idx,
            emc_idx: self.default_emc_idx,
        }
    }

    /// Number of distinct DVFS settings.
    pub fn cardinality(&self) -> usize {
        self.compute_freq_levels.len() * self.emc_freq_levels.len().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let strictly_increasing = |levels: &[f64]| {
            levels.iter().all(|f| f.is_finite() && *f > 0.0) && levels.windows(2).all(|w| w[0] < w[1])
        };
        if self.compute_freq_levels.is_empty() || !strictly_increasing(&self.compute_freq_levels) {
            return Err(Error::Config(format!(
                "device '{}': compute frequencies must be non-empty, positive and strictly increasing",
                self.name
            )));
        }
        if !strictly_increasing(&self.emc_freq_levels) {
            return Err(Error::Config(format!(
                "device '{}': EMC frequencies must be positive and strictly increasing",
                self.name
            )));
        }
        if self.default_compute_idx >= self.compute_freq_levels.len() {
            return Err(Error::Config(format!("device '{}': default compute index out of range", self.name)));
        }
        match (self.has_emc(), self.default_emc_idx) {
            (true, Some(i)) if i < self.emc_freq_levels.len() => Ok(()),
            (false, None) => Ok(()),
            _ => Err(Error::Config(format!(
                "device '{}': default EMC index must be present exactly when EMC levels exist and in range",
                self.name
            ))),
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| {
            let v = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            (v * 1e4).round() / 1e4
        })
        .collect()
}

/// Domains of the joint search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpaceSpec {
    pub n_block: usize,
    pub resolution_domain: Vec<u32>,
    pub depth_domain: Vec<u32>,
    pub width_domain: Vec<u32>,
    pub kernel_domain: Vec<u32>,
    pub expand_domain: Vec<u32>,
    /// First layer after which an exit may be attached.
    pub exit_min_position: usize,
    pub devices: Vec<DeviceSpec>,
}

impl Default for SearchSpaceSpec {
    fn default() -> Self {
        // 16 widths evenly spaced over [16, 1984], rounded to whole channels.
        let width_domain = (0..16).map(|i| (16.0 + i as f64 * (1984.0 - 16.0) / 15.0).round() as u32).collect();
        SearchSpaceSpec {
            n_block: 7,
            resolution_domain: vec![192, 224, 256, 288],
            depth_domain: (1..=8).collect(),
            width_domain,
            kernel_domain: vec![3, 5],
            expand_domain: vec![1, 4, 5, 6],
            exit_min_position: 5,
            devices: default_devices(),
        }
    }
}

/// Edge devices and their DVFS ranges. CPU and GPU devices of the same
/// module share that module's EMC table.
pub fn default_devices() -> Vec<DeviceSpec> {
    let agx_emc = Some((0.2, 2.1, 9));
    let tx2_emc = Some((0.2, 1.8, 11));
    vec![
        DeviceSpec::evenly_spaced("agx_volta_gpu", (0.1, 1.4, 14), agx_emc),
        DeviceSpec::evenly_spaced("carmel_arm_cpu", (0.1, 2.3, 29), agx_emc),
        DeviceSpec::evenly_spaced("tx2_pascal_gpu", (0.1, 1.4, 13), tx2_emc),
        DeviceSpec::evenly_spaced("denver_cpu", (0.3, 2.1, 12), tx2_emc),
    ]
}

impl SearchSpaceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_block == 0 {
            return Err(Error::Config("n_block must be at least 1".into()));
        }
        if self.exit_min_position == 0 {
            return Err(Error::Config("exit_min_position must be at least 1".into()));
        }
        let domains: [(&str, &[u32]); 5] = [
            ("resolution_domain", &self.resolution_domain),
            ("depth_domain", &self.depth_domain),
            ("width_domain", &self.width_domain),
            ("kernel_domain", &self.kernel_domain),
            ("expand_domain", &self.expand_domain),
        ];
        for (name, domain) in domains {
            if domain.is_empty() {
                return Err(Error::Config(format!("{name} must be non-empty")));
            }
            if domain.iter().any(|&v| v == 0) || domain.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("{name} must be positive and strictly increasing")));
            }
        }
        let max_layers = self.n_block * *self.depth_domain.last().unwrap() as usize;
        if max_layers < self.exit_min_position + 1 {
            return Err(Error::Config(format!(
                "deepest backbone has {max_layers} layers, need at least {} to admit an exit",
                self.exit_min_position + 1
            )));
        }
        for device in &self.devices {
            device.validate()?;
        }
        Ok(())
    }

    pub fn device(&self, name: &str) -> Result<&DeviceSpec> {
        self.devices
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::UnknownDevice(name.to_string()))
    }

    /// Number of backbones in the subspace, saturating at `u128::MAX`.
    pub fn backbone_cardinality(&self) -> u128 {
        let per_block = (self.depth_domain.len() * self.width_domain.len() * self.kernel_domain.len() * self.expand_domain.len()) as u128;
        (0..self.n_block).fold(self.resolution_domain.len() as u128, |acc, _| acc.saturating_mul(per_block))
    }

    /// Exact number of (backbone, exit, DVFS) triples for `device`,
    /// saturating at `u128::MAX`. Counts backbones by total depth so the
    /// space never has to be materialized.
    pub fn joint_cardinality(&self, device: &DeviceSpec) -> u128 {
        // depth_ways[t] = number of depth assignments with t total layers
        let max_depth = *self.depth_domain.last().unwrap() as usize;
        let mut depth_ways = vec![0u128; 1];
        depth_ways[0] = 1;
        for _ in 0..self.n_block {
            let mut next = vec![0u128; depth_ways.len() + max_depth];
            for (t, &ways) in depth_ways.iter().enumerate() {
                if ways == 0 {
                    continue;
                }
                for &d in &self.depth_domain {
                    let slot = &mut next[t + d as usize];
                    *slot = slot.saturating_add(ways);
                }
            }
            depth_ways = next;
        }
        let per_block_rest = (self.width_domain.len() * self.kernel_domain.len() * self.expand_domain.len()) as u128;
        let rest = (0..self.n_block).fold(self.resolution_domain.len() as u128, |acc, _| acc.saturating_mul(per_block_rest));
        let exits_weighted = depth_ways
            .iter()
            .enumerate()
            .filter(|(t, _)| *t > self.exit_min_position)
            .fold(0u128, |acc, (t, &ways)| {
                let bits = (t - self.exit_min_position) as u32;
                let patterns = if bits >= 128 { u128::MAX } else { (1u128 << bits) - 1 };
                acc.saturating_add(ways.saturating_mul(patterns))
            });
        exits_weighted.saturating_mul(rest).saturating_mul(device.cardinality() as u128)
    }

    /// Every backbone in canonical (odometer) order, including ones that
    /// admit no exit; callers filter with [`BackboneGenome::is_valid`].
    pub fn enumerate_backbones(&self) -> impl Iterator<Item = BackboneGenome> + '_ {
        let radices: Vec<usize> = std::iter::once(self.resolution_domain.len())
            .chain((0..self.n_block).flat_map(|_| {
                [self.depth_domain.len(), self.width_domain.len(), self.kernel_domain.len(), self.expand_domain.len()]
            }))
            .collect();
        let total: usize = radices.iter().product();
        (0..total).map(move |mut k| {
            let digits: Vec<usize> = radices
                .iter()
                .map(|&r| {
                    let d = k % r;
                    k /= r;
                    d
                })
                .collect();
            BackboneGenome {
                resolution_idx: digits[0],
                blocks: digits[1..]
                    .chunks(4)
                    .map(|c| BlockGene {
                        depth_idx: c[0],
                        width_idx: c[1],
                        kernel_idx: c[2],
                        expand_idx: c[3],
                    })
                    .collect(),
            }
        })
    }
}

/// Per-block architecture choices as domain indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockGene {
    pub depth_idx: usize,
    pub width_idx: usize,
    pub kernel_idx: usize,
    pub expand_idx: usize,
}

/// Resolved per-block values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockValues {
    pub depth: u32,
    pub width: u32,
    pub kernel: u32,
    pub expand: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BackboneGenome {
    pub resolution_idx: usize,
    pub blocks: Vec<BlockGene>,
}

impl BackboneGenome {
    pub fn sample(space: &SearchSpaceSpec, rng: &mut SearchRng) -> Self {
        let blocks = (0..space.n_block)
            .map(|_| BlockGene {
                depth_idx: rng.gen_range(0..space.depth_domain.len()),
                width_idx: rng.gen_range(0..space.width_domain.len()),
                kernel_idx: rng.gen_range(0..space.kernel_domain.len()),
                expand_idx: rng.gen_range(0..space.expand_domain.len()),
            })
            .collect();
        let mut genome = BackboneGenome {
            resolution_idx: rng.gen_range(0..space.resolution_domain.len()),
            blocks,
        };
        genome.repair(space, rng);
        genome
    }

    /// The genome with every index at the middle of its domain.
    pub fn mid_domain(space: &SearchSpaceSpec) -> Self {
        let mid = |len: usize| (len - 1) / 2;
        BackboneGenome {
            resolution_idx: mid(space.resolution_domain.len()),
            blocks: vec![
                BlockGene {
                    depth_idx: mid(space.depth_domain.len()),
                    width_idx: mid(space.width_domain.len()),
                    kernel_idx: mid(space.kernel_domain.len()),
                    expand_idx: mid(space.expand_domain.len()),
                };
                space.n_block
            ],
        }
    }

    pub fn resolution(&self, space: &SearchSpaceSpec) -> u32 {
        space.resolution_domain[self.resolution_idx]
    }

    pub fn block_values(&self, space: &SearchSpaceSpec) -> Vec<BlockValues> {
        self.blocks
            .iter()
            .map(|b| BlockValues {
                depth: space.depth_domain[b.depth_idx],
                width: space.width_domain[b.width_idx],
                kernel: space.kernel_domain[b.kernel_idx],
                expand: space.expand_domain[b.expand_idx],
            })
            .collect()
    }

    pub fn total_layers(&self, space: &SearchSpaceSpec) -> usize {
        self.blocks.iter().map(|b| space.depth_domain[b.depth_idx] as usize).sum()
    }

    fn indices_in_range(&self, space: &SearchSpaceSpec) -> bool {
        self.blocks.len() == space.n_block
            && self.resolution_idx < space.resolution_domain.len()
            && self.blocks.iter().all(|b| {
                b.depth_idx < space.depth_domain.len()
                    && b.width_idx < space.width_domain.len()
                    && b.kernel_idx < space.kernel_domain.len()
                    && b.expand_idx < space.expand_domain.len()
            })
    }

    pub fn is_valid(&self, space: &SearchSpaceSpec) -> bool {
        self.indices_in_range(space) && self.total_layers(space) > space.exit_min_position
    }

    pub fn validate(&self, space: &SearchSpaceSpec) -> Result<()> {
        if !self.indices_in_range(space) {
            return Err(Error::Shape("backbone genome does not match the search space".into()));
        }
        if self.total_layers(space) <= space.exit_min_position {
            return Err(Error::Shape(format!(
                "backbone has {} layers, needs more than {} to admit an exit",
                self.total_layers(space),
                space.exit_min_position
            )));
        }
        Ok(())
    }

    /// Raises the shallowest block's depth until at least one exit position
    /// exists. Terminates because a valid space admits exits at max depth.
    fn repair(&mut self, space: &SearchSpaceSpec, rng: &mut SearchRng) {
        let top = space.depth_domain.len() - 1;
        while self.total_layers(space) <= space.exit_min_position {
            let Some(block) = self
                .blocks
                .iter_mut()
                .filter(|b| b.depth_idx < top)
                .min_by_key(|b| space.depth_domain[b.depth_idx])
            else {
                break;
            };
            block.depth_idx = rng.gen_range(block.depth_idx + 1..=top);
        }
    }

    pub fn mutate(&self, space: &SearchSpaceSpec, params: &VariationParams, rng: &mut SearchRng) -> Self {
        let p = params.mutation_prob_per_gene;
        let redraw = |idx: usize, len: usize, rng: &mut SearchRng| {
            if rng.gen_bool(p) {
                rng.gen_range(0..len)
            } else {
                idx
            }
        };
        let mut child = self.clone();
        child.resolution_idx = redraw(child.resolution_idx, space.resolution_domain.len(), rng);
        for b in &mut child.blocks {
            b.depth_idx = redraw(b.depth_idx, space.depth_domain.len(), rng);
            b.width_idx = redraw(b.width_idx, space.width_domain.len(), rng);
            b.kernel_idx = redraw(b.kernel_idx, space.kernel_domain.len(), rng);
            b.expand_idx = redraw(b.expand_idx, space.expand_domain.len(), rng);
        }
        child.repair(space, rng);
        child
    }

    pub fn crossover(
        &self,
        other: &Self,
        space: &SearchSpaceSpec,
        params: &VariationParams,
        rng: &mut SearchRng,
    ) -> Result<(Self, Self)> {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::Shape(format!(
                "backbone crossover between {} and {} blocks",
                self.blocks.len(),
                other.blocks.len()
            )));
        }
        let mut a = self.clone();
        let mut b = other.clone();
        let p = params.crossover_prob;
        let swap = |x: &mut usize, y: &mut usize, rng: &mut SearchRng| {
            if rng.gen_bool(p) {
                std::mem::swap(x, y);
            }
        };
        swap(&mut a.resolution_idx, &mut b.resolution_idx, rng);
        for (ga, gb) in a.blocks.iter_mut().zip(b.blocks.iter_mut()) {
            swap(&mut ga.depth_idx, &mut gb.depth_idx, rng);
            swap(&mut ga.width_idx, &mut gb.width_idx, rng);
            swap(&mut ga.kernel_idx, &mut gb.kernel_idx, rng);
            swap(&mut ga.expand_idx, &mut gb.expand_idx, rng);
        }
        a.repair(space, rng);
        b.repair(space, rng);
        Ok((a, b))
    }

    /// Compact human-readable encoding used in CSV rows.
    pub fn encode(&self) -> String {
        let blocks: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("{}.{}.{}.{}", b.depth_idx, b.width_idx, b.kernel_idx, b.expand_idx))
            .collect();
        format!("r{}|{}", self.resolution_idx, blocks.join("|"))
    }
}

/// Layer indices after which an exit may be attached: from the minimum
/// position up to the layer before the final classifier.
pub fn admissible_positions(backbone: &BackboneGenome, space: &SearchSpaceSpec) -> Vec<usize> {
    (space.exit_min_position..backbone.total_layers(space)).collect()
}

/// Indicator vector over admissible exit positions; bit `p` is an exit after
/// layer `exit_min_position + p`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExitGenome {
    #[serde(with = "bitstring")]
    pub indicators: Vec<bool>,
}

/// Indicator vectors serialize as strings of '0' and '1'.
mod bitstring {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bits: &[bool], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&bits.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        String::deserialize(d)?
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(D::Error::custom(format!("invalid exit bit '{other}'"))),
            })
            .collect()
    }
}

impl ExitGenome {
    pub fn sample(backbone: &BackboneGenome, space: &SearchSpaceSpec, rng: &mut SearchRng) -> Self {
        let len = backbone.total_layers(space).saturating_sub(space.exit_min_position);
        let mut genome = ExitGenome {
            indicators: (0..len).map(|_| rng.gen_bool(0.5)).collect(),
        };
        genome.repair(rng);
        genome
    }

    /// Every non-empty indicator pattern of length `len`, in binary counting order.
    pub fn enumerate(len: usize) -> impl Iterator<Item = ExitGenome> {
        assert!(len < 64, "exit enumeration limited to 63 positions");
        (1u64..(1u64 << len)).map(move |k| ExitGenome {
            indicators: (0..len).map(|p| (k >> p) & 1 == 1).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.indicators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indicators.is_empty()
    }

    pub fn n_exits(&self) -> usize {
        self.indicators.iter().filter(|&&b| b).count()
    }

    /// Layer indices of the sampled exits, ascending.
    pub fn positions(&self, space: &SearchSpaceSpec) -> Vec<usize> {
        self.indicators
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(p, _)| space.exit_min_position + p)
            .collect()
    }

    pub fn is_valid_for(&self, backbone: &BackboneGenome, space: &SearchSpaceSpec) -> bool {
        self.len() + space.exit_min_position == backbone.total_layers(space) && self.n_exits() >= 1
    }

    fn repair(&mut self, rng: &mut SearchRng) {
        if !self.indicators.is_empty() && !self.indicators.iter().any(|&b| b) {
            let p = rng.gen_range(0..self.indicators.len());
            self.indicators[p] = true;
        }
    }

    pub fn mutate(&self, params: &VariationParams, rng: &mut SearchRng) -> Self {
        let mut child = self.clone();
        for bit in &mut child.indicators {
            if rng.gen_bool(params.mutation_prob_per_gene) {
                *bit = rng.gen_bool(0.5);
            }
        }
        child.repair(rng);
        child
    }

    pub fn crossover(&self, other: &Self, params: &VariationParams, rng: &mut SearchRng) -> Result<(Self, Self)> {
        let (mut a, mut b) = self.crossover_unrepaired(other, params, rng)?;
        a.repair(rng);
        b.repair(rng);
        Ok((a, b))
    }

    pub(crate) fn crossover_unrepaired(
        &self,
        other: &Self,
        params: &VariationParams,
        rng: &mut SearchRng,
    ) -> Result<(Self, Self)> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "exit crossover between lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        let mut a = self.clone();
        let mut b = other.clone();
        for (x, y) in a.indicators.iter_mut().zip(b.indicators.iter_mut()) {
            if rng.gen_bool(params.crossover_prob) {
                std::mem::swap(x, y);
            }
        }
        Ok((a, b))
    }

    pub fn encode(&self) -> String {
        self.indicators.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// Indices into one device's frequency tables.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DvfsGenome {
    pub device: String,
    pub compute_idx: usize,
    pub emc_idx: Option<usize>,
}

impl DvfsGenome {
    pub fn sample(device: &DeviceSpec, rng: &mut SearchRng) -> Self {
        DvfsGenome {
            device: device.name.clone(),
            compute_idx: rng.gen_range(0..device.compute_freq_levels.len()),
            emc_idx: device.has_emc().then(|| rng.gen_range(0..device.emc_freq_levels.len())),
        }
    }

    pub fn enumerate(device: &DeviceSpec) -> impl Iterator<Item = DvfsGenome> + '_ {
        let emc: Vec<Option<usize>> = if device.has_emc() {
            (0..device.emc_freq_levels.len()).map(Some).collect()
        } else {
            vec![None]
        };
        (0..device.compute_freq_levels.len()).flat_map(move |c| {
            emc.clone().into_iter().map(move |m| DvfsGenome {
                device: device.name.clone(),
                compute_idx: c,
                emc_idx: m,
            })
        })
    }

    pub fn is_valid_for(&self, device: &DeviceSpec) -> bool {
        self.device == device.name
            && self.compute_idx < device.compute_freq_levels.len()
            && match self.emc_idx {
                Some(m) => m < device.emc_freq_levels.len(),
                None => !device.has_emc(),
            }
    }

    /// (compute GHz, EMC GHz if the device has the knob).
    pub fn frequencies(&self, device: &DeviceSpec) -> Result<(f64, Option<f64>)> {
        if !self.is_valid_for(device) {
            return Err(Error::Shape(format!("DVFS genome does not index device '{}'", device.name)));
        }
        Ok((
            device.compute_freq_levels[self.compute_idx],
            self.emc_idx.map(|m| device.emc_freq_levels[m]),
        ))
    }

    pub fn mutate(&self, device: &DeviceSpec, params: &VariationParams, rng: &mut SearchRng) -> Self {
        let mut child = self.clone();
        if rng.gen_bool(params.mutation_prob_per_gene) {
            child.compute_idx = rng.gen_range(0..device.compute_freq_levels.len());
        }
        if let Some(m) = child.emc_idx.as_mut() {
            if rng.gen_bool(params.mutation_prob_per_gene) {
                *m = rng.gen_range(0..device.emc_freq_levels.len());
            }
        }
        child
    }

    pub fn crossover(&self, other: &Self, params: &VariationParams, rng: &mut SearchRng) -> Result<(Self, Self)> {
        if self.device != other.device || self.emc_idx.is_some() != other.emc_idx.is_some() {
            return Err(Error::Shape(format!(
                "DVFS crossover between devices '{}' and '{}'",
                self.device, other.device
            )));
        }
        let mut a = self.clone();
        let mut b = other.clone();
        if rng.gen_bool(params.crossover_prob) {
            std::mem::swap(&mut a.compute_idx, &mut b.compute_idx);
        }
        if rng.gen_bool(params.crossover_prob) {
            std::mem::swap(&mut a.emc_idx, &mut b.emc_idx);
        }
        Ok((a, b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariationParams {
    pub mutation_prob_per_gene: f64,
    pub crossover_prob: f64,
    pub tournament_size: usize,
}

impl Default for VariationParams {
    fn default() -> Self {
        VariationParams {
            mutation_prob_per_gene: 0.1,
            crossover_prob: 0.5,
            tournament_size: 2,
        }
    }
}

impl VariationParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !unit(self.mutation_prob_per_gene) || !unit(self.crossover_prob) {
            return Err(Error::Config("variation probabilities must lie in [0, 1]".into()));
        }
        if self.tournament_size == 0 {
            return Err(Error::Config("tournament_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn space() -> SearchSpaceSpec {
        SearchSpaceSpec::default()
    }

    /// One block whose depth is pinned, for exit-length cases.
    fn single_block(depths: Vec<u32>) -> SearchSpaceSpec {
        SearchSpaceSpec {
            n_block: 1,
            resolution_domain: vec![32],
            depth_domain: depths,
            width_domain: vec![16],
            kernel_domain: vec![3],
            expand_domain: vec![1],
            exit_min_position: 5,
            devices: default_devices(),
        }
    }

    #[test]
    fn default_space_is_valid() {
        let s = space();
        s.validate().unwrap();
        assert_eq!(s.width_domain.len(), 16);
        assert_eq!(s.width_domain[0], 16);
        assert_eq!(*s.width_domain.last().unwrap(), 1984);
        let counts: Vec<usize> = s.devices.iter().map(|d| d.compute_freq_levels.len()).collect();
        assert_eq!(counts, vec![14, 29, 13, 12]);
        assert_eq!(s.devices[0].emc_freq_levels.len(), 9);
        assert_eq!(s.devices[2].emc_freq_levels.len(), 11);
    }

    #[test]
    fn sampled_backbone_within_bounds() {
        let s = space();
        let mut rng = seeded(3);
        for _ in 0..1000 {
            let b = BackboneGenome::sample(&s, &mut rng);
            assert!(b.is_valid(&s));
            let t = b.total_layers(&s);
            assert!((7..=56).contains(&t));
        }
    }

    #[test]
    fn repair_lifts_shallow_backbones() {
        // 1 block with depths {1..8}: only 6, 7, 8 admit an exit
        let s = single_block((1..=8).collect());
        let mut rng = seeded(11);
        for _ in 0..500 {
            let b = BackboneGenome::sample(&s, &mut rng);
            assert!(b.total_layers(&s) >= 6);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = space();
        let a = BackboneGenome::sample(&s, &mut seeded(42));
        let b = BackboneGenome::sample(&s, &mut seeded(42));
        assert_eq!(a, b);
    }

    #[test]
    fn kernel_frequency_is_fair() {
        let s = space();
        let mut rng = seeded(5);
        let n = 10_000usize;
        let threes = (0..n)
            .filter(|_| BackboneGenome::sample(&s, &mut rng).blocks[0].kernel_idx == 0)
            .count();
        // binomial(n, 1/2): sigma = sqrt(n)/2 = 50
        assert!((threes as f64 - 5000.0).abs() <= 5.0 * 50.0, "{threes}");
    }

    #[test]
    fn exit_lengths() {
        let s = single_block(vec![6]);
        let b = BackboneGenome { resolution_idx: 0, blocks: vec![BlockGene { depth_idx: 0, width_idx: 0, kernel_idx: 0, expand_idx: 0 }] };
        let mut rng = seeded(1);
        for _ in 0..100 {
            let x = ExitGenome::sample(&b, &s, &mut rng);
            assert_eq!(x.indicators, vec![true]);
        }
        let s12 = single_block(vec![12]);
        let x = ExitGenome::sample(&b, &s12, &mut rng);
        assert_eq!(x.len(), 7);
    }

    #[test]
    fn exit_repair_distribution() {
        // For length 7 the expected set-bit count after repair is
        // (sum over non-empty patterns of popcount + 1 forced bit) / 2^7.
        let len = 7u32;
        let sum_pop: u32 = (0u32..(1 << len)).map(|k| k.count_ones()).sum();
        let expected = (sum_pop as f64 + 1.0) / (1u32 << len) as f64;
        let s = single_block(vec![12]);
        let b = BackboneGenome { resolution_idx: 0, blocks: vec![BlockGene { depth_idx: 0, width_idx: 0, kernel_idx: 0, expand_idx: 0 }] };
        let mut rng = seeded(9);
        let n = 10_000;
        let mut total = 0usize;
        for _ in 0..n {
            let x = ExitGenome::sample(&b, &s, &mut rng);
            assert!(x.n_exits() >= 1);
            total += x.n_exits();
        }
        let mean = total as f64 / n as f64;
        // per-draw variance is below 7/4; 5 sigma of the mean
        let tol = 5.0 * (7.0f64 / 4.0 / n as f64).sqrt();
        assert!((mean - expected).abs() < tol, "mean {mean} expected {expected}");
    }

    #[test]
    fn admissible_positions_cases() {
        let b = BackboneGenome { resolution_idx: 0, blocks: vec![BlockGene { depth_idx: 0, width_idx: 0, kernel_idx: 0, expand_idx: 0 }] };
        assert_eq!(admissible_positions(&b, &single_block(vec![7])), vec![5, 6]);
        assert_eq!(admissible_positions(&b, &single_block(vec![56])).len(), 51);
        assert_eq!(admissible_positions(&b, &single_block(vec![6])), vec![5]);
    }

    #[test]
    fn zero_probability_operators_are_identities() {
        let s = space();
        let params = VariationParams { mutation_prob_per_gene: 0.0, crossover_prob: 0.0, tournament_size: 2 };
        let mut rng = seeded(8);
        let dev = &s.devices[0];
        for _ in 0..200 {
            let a = BackboneGenome::sample(&s, &mut rng);
            let b = BackboneGenome::sample(&s, &mut rng);
            assert_eq!(a.mutate(&s, &params, &mut rng), a);
            let (ca, cb) = a.crossover(&b, &s, &params, &mut rng).unwrap();
            assert_eq!((ca, cb), (a.clone(), b.clone()));
            let x = ExitGenome::sample(&a, &s, &mut rng);
            assert_eq!(x.mutate(&params, &mut rng), x);
            let f = DvfsGenome::sample(dev, &mut rng);
            let g = DvfsGenome::sample(dev, &mut rng);
            assert_eq!(f.mutate(dev, &params, &mut rng), f);
            assert_eq!(f.crossover(&g, &params, &mut rng).unwrap(), (f.clone(), g.clone()));
        }
    }

    #[test]
    fn identical_parents_give_identical_children() {
        let s = space();
        let params = VariationParams { mutation_prob_per_gene: 0.3, crossover_prob: 0.7, tournament_size: 2 };
        let mut rng = seeded(2);
        let a = BackboneGenome::sample(&s, &mut rng);
        let (ca, cb) = a.crossover(&a, &s, &params, &mut rng).unwrap();
        assert_eq!(ca, a);
        assert_eq!(cb, a);
        let x = ExitGenome::sample(&a, &s, &mut rng);
        assert_eq!(x.crossover(&x, &params, &mut rng).unwrap(), (x.clone(), x.clone()));
    }

    #[test]
    fn full_kernel_mutation_is_uniform() {
        let s = SearchSpaceSpec { n_block: 1, ..space() };
        let params = VariationParams { mutation_prob_per_gene: 1.0, ..Default::default() };
        let mut rng = seeded(21);
        let base = BackboneGenome::sample(&s, &mut rng);
        let n = 10_000;
        let threes = (0..n).filter(|_| base.mutate(&s, &params, &mut rng).blocks[0].kernel_idx == 0).count();
        assert!((threes as f64 - 5000.0).abs() <= 250.0, "{threes}");
    }

    #[test]
    fn single_exit_survives_mutation() {
        let params = VariationParams { mutation_prob_per_gene: 1.0, ..Default::default() };
        let mut rng = seeded(4);
        let x = ExitGenome { indicators: vec![true] };
        for _ in 0..200 {
            assert_eq!(x.mutate(&params, &mut rng).indicators, vec![true]);
        }
    }

    #[test]
    fn exit_crossover_bits_come_from_parents() {
        let params = VariationParams { crossover_prob: 0.5, ..Default::default() };
        let mut rng = seeded(13);
        for _ in 0..1000 {
            let a = ExitGenome { indicators: (0..7).map(|_| rng.gen_bool(0.5)).collect() };
            let b = ExitGenome { indicators: (0..7).map(|_| rng.gen_bool(0.5)).collect() };
            let (ca, cb) = a.crossover_unrepaired(&b, &params, &mut rng).unwrap();
            for p in 0..7 {
                assert!(ca.indicators[p] == a.indicators[p] || ca.indicators[p] == b.indicators[p]);
                assert!(cb.indicators[p] == a.indicators[p] || cb.indicators[p] == b.indicators[p]);
                // a swap moves both bits
                assert!(
                    (ca.indicators[p], cb.indicators[p]) == (a.indicators[p], b.indicators[p])
                        || (ca.indicators[p], cb.indicators[p]) == (b.indicators[p], a.indicators[p])
                );
            }
        }
    }

    #[test]
    fn mismatched_crossover_is_an_error() {
        let params = VariationParams::default();
        let mut rng = seeded(0);
        let a = ExitGenome { indicators: vec![true; 3] };
        let b = ExitGenome { indicators: vec![true; 4] };
        assert!(matches!(a.crossover(&b, &params, &mut rng), Err(Error::Shape(_))));
        let s = space();
        let x = BackboneGenome::sample(&s, &mut rng);
        let mut y = x.clone();
        y.blocks.pop();
        assert!(x.crossover(&y, &s, &params, &mut rng).is_err());
    }

    #[test]
    fn joint_cardinality_matches_enumeration() {
        let s = SearchSpaceSpec {
            n_block: 2,
            resolution_domain: vec![32, 64],
            depth_domain: vec![2, 3, 4],
            width_domain: vec![16, 32],
            kernel_domain: vec![3],
            expand_domain: vec![1],
            exit_min_position: 5,
            devices: default_devices(),
        };
        let dev = &s.devices[3];
        let counted: u128 = s
            .enumerate_backbones()
            .filter(|b| b.is_valid(&s))
            .map(|b| ((1u128 << (b.total_layers(&s) - 5)) - 1) * dev.cardinality() as u128)
            .sum();
        assert_eq!(s.joint_cardinality(dev), counted);
        assert_eq!(s.enumerate_backbones().count() as u128, s.backbone_cardinality());
    }

    #[test]
    fn enumerated_dvfs_covers_device() {
        let s = space();
        let dev = &s.devices[0];
        let all: Vec<_> = DvfsGenome::enumerate(dev).collect();
        assert_eq!(all.len(), 14 * 9);
        assert!(all.iter().all(|f| f.is_valid_for(dev)));
    }
}
