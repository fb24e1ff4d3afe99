#![allow(dead_code)]

use bilevel_core::cli::RunConfig;
use bilevel_core::genome::{DeviceSpec, SearchSpaceSpec};
use bilevel_core::ioe::IoeConfig;
use bilevel_core::ooe::OoeConfig;

/// One block, depth {6, 7}, two widths, two kernels, one expand ratio and
/// one resolution: 8 backbones, 1 or 3 exit patterns each, 2 DVFS levels,
/// 32 (backbone, exits, DVFS) triples in all.
pub fn toy_space() -> SearchSpaceSpec {
    SearchSpaceSpec {
        n_block: 1,
        resolution_domain: vec![224],
        depth_domain: vec![6, 7],
        width_domain: vec![32, 64],
        kernel_domain: vec![3, 5],
        expand_domain: vec![4],
        exit_min_position: 5,
        devices: vec![toy_device()],
    }
}

pub fn toy_device() -> DeviceSpec {
    DeviceSpec {
        name: "toy_gpu".into(),
        compute_freq_levels: vec![0.6, 1.2],
        emc_freq_levels: vec![],
        default_compute_idx: 1,
        default_emc_idx: None,
    }
}

/// Toy config whose budgets cover the whole space in the first generation.
pub fn toy_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::with_seed(seed);
    c.space = toy_space();
    c.device = "toy_gpu".into();
    c.ooe = OoeConfig {
        generations: 3,
        population: 8,
        prune_fraction: 1.0,
        budget: 24,
        ..OoeConfig::default()
    };
    c.ioe = IoeConfig {
        generations: 3,
        population: 6,
        budget: 18,
        ..IoeConfig::default()
    };
    c
}
