//! Brute-force oracles for the inner and outer engines on spaces small enough
//! to enumerate.

mod common;

use std::collections::BTreeSet;

use bilevel_core::evaluator::{Evaluator, HardwareModelParams, StaticScore};
use bilevel_core::genome::{BackboneGenome, BlockGene, DeviceSpec, DvfsGenome, ExitGenome, SearchSpaceSpec};
use bilevel_core::ioe::{dynamic_fitness, ioe_objectives, run_ioe, IoeCandidate, IoeConfig, ObjectiveMode};
use bilevel_core::moea::{dominates, ObjectiveVector};
use bilevel_core::ooe::{run_ooe, FinalSolution, OoeConfig};
use bilevel_core::rng::seeded;

/// One block of depth 7 (two exit positions) on a 2x2 DVFS device:
/// 3 exit patterns x 4 settings = 12 candidates.
fn tiny() -> (SearchSpaceSpec, DeviceSpec, BackboneGenome) {
    let device = DeviceSpec::evenly_spaced("tiny", (0.5, 1.0, 2), Some((0.8, 1.6, 2)));
    let space = SearchSpaceSpec {
        n_block: 1,
        resolution_domain: vec![224],
        depth_domain: vec![7],
        width_domain: vec![48],
        kernel_domain: vec![3],
        expand_domain: vec![4],
        exit_min_position: 5,
        devices: vec![device.clone()],
    };
    let b = BackboneGenome {
        resolution_idx: 0,
        blocks: vec![BlockGene {
            depth_idx: 0,
            width_idx: 0,
            kernel_idx: 0,
            expand_idx: 0,
        }],
    };
    (space, device, b)
}

fn exhaustive_front(
    evaluator: &Evaluator,
    device: &DeviceSpec,
    b: &BackboneGenome,
    stat: &StaticScore,
    gamma: f64,
) -> BTreeSet<IoeCandidate> {
    let profile = evaluator.exit_profile(b).unwrap();
    let mut all = Vec::new();
    for exits in ExitGenome::enumerate(2) {
        for dvfs in DvfsGenome::enumerate(device) {
            let s = dynamic_fitness(b, &exits, &dvfs, &profile, stat, device, evaluator, gamma).unwrap();
            all.push((IoeCandidate { exits: exits.clone(), dvfs }, ioe_objectives(&s, ObjectiveMode::Vector)));
        }
    }
    assert_eq!(all.len(), 12);
    all.iter()
        .filter(|(_, o)| !all.iter().any(|(_, q)| dominates(q, o).unwrap()))
        .map(|(c, _)| c.clone())
        .collect()
}

fn outcome_truth_objectives(
    evaluator: &Evaluator,
    device: &DeviceSpec,
    b: &BackboneGenome,
    stat: &StaticScore,
    gamma: f64,
    truth: &BTreeSet<IoeCandidate>,
) -> Vec<ObjectiveVector> {
    let profile = evaluator.exit_profile(b).unwrap();
    truth
        .iter()
        .map(|c| {
            let s = dynamic_fitness(b, &c.exits, &c.dvfs, &profile, stat, device, evaluator, gamma).unwrap();
            ioe_objectives(&s, ObjectiveMode::Vector)
        })
        .collect()
}

fn archive_set(outcome: &bilevel_core::ioe::IoeOutcome) -> BTreeSet<IoeCandidate> {
    outcome.members().into_iter().map(|m| m.candidate).collect()
}

#[test]
fn inner_engine_matches_exhaustive_front_on_tiny_space() {
    let (space, device, b) = tiny();
    let evaluator = Evaluator::synthetic(space, HardwareModelParams::default(), 1);
    let stat = evaluator.eval_static(&b, &device).unwrap();
    let truth = exhaustive_front(&evaluator, &device, &b, &stat, 1.0);

    for (generations, population) in [(1, 12), (3, 12), (4, 16)] {
        let config = IoeConfig {
            generations,
            population,
            budget: generations * population,
            ..IoeConfig::default()
        };
        let outcome = run_ioe(&b, &stat, &device, &evaluator, &config, &mut seeded(5)).unwrap();
        assert_eq!(archive_set(&outcome), truth, "{generations}x{population}");
        assert_eq!(outcome.evaluations, generations * population);
    }
}

#[test]
fn small_inner_populations_keep_archive_invariants() {
    let (space, device, b) = tiny();
    let evaluator = Evaluator::synthetic(space, HardwareModelParams::default(), 1);
    let stat = evaluator.eval_static(&b, &device).unwrap();
    for gamma in [0.0, 1.0] {
        let truth = exhaustive_front(&evaluator, &device, &b, &stat, gamma);
        for seed in 0..10 {
            let config = IoeConfig {
                gamma,
                generations: 8,
                population: 3,
                budget: 24,
                ..IoeConfig::default()
            };
            let outcome = run_ioe(&b, &stat, &device, &evaluator, &config, &mut seeded(seed)).unwrap();
            assert!(outcome.archive.is_mutually_nondominated());
            assert!(outcome.summary_history.windows(2).all(|w| w[1] >= w[0]));
            // off-front members must be dominated by some true-front member
            let truth_objs: Vec<ObjectiveVector> = outcome_truth_objectives(&evaluator, &device, &b, &stat, gamma, &truth);
            assert!(!outcome.archive.is_empty());
            for (m, o) in outcome.archive.entries() {
                if !truth.contains(&m.candidate) {
                    assert!(truth_objs.iter().any(|t| dominates(t, o).unwrap()));
                }
            }
        }
    }
}

#[test]
fn inner_engine_is_deterministic_and_counts_evaluations() {
    let space = SearchSpaceSpec::default();
    let device = space.devices[2].clone();
    let evaluator = Evaluator::synthetic(space.clone(), HardwareModelParams::default(), 9);
    let b = BackboneGenome::sample(&space, &mut seeded(3));
    let stat = evaluator.eval_static(&b, &device).unwrap();
    let config = IoeConfig {
        generations: 5,
        population: 20,
        budget: 100,
        ..IoeConfig::default()
    };
    let a = run_ioe(&b, &stat, &device, &evaluator, &config, &mut seeded(2)).unwrap();
    let c = run_ioe(&b, &stat, &device, &evaluator, &config, &mut seeded(2)).unwrap();
    assert_eq!(a, c);
    assert_eq!(evaluator.dynamic_evaluations(), 200);
    assert!(a.archive.is_mutually_nondominated());
    assert!(a.summary_history.windows(2).all(|w| w[1] >= w[0]));
    for m in a.members() {
        assert!(m.candidate.exits.is_valid_for(&b, &space));
        assert!(m.candidate.dvfs.is_valid_for(&device));
    }
    let scalar = IoeConfig {
        objective_mode: ObjectiveMode::Scalar,
        ..config
    };
    let s = run_ioe(&b, &stat, &device, &evaluator, &scalar, &mut seeded(2)).unwrap();
    assert!(s.archive.objectives().iter().all(|o| o.len() == 1));
}

#[test]
fn last_exit_at_default_frequency_is_cheaper_than_the_full_backbone() {
    let space = SearchSpaceSpec::default();
    let params = HardwareModelParams {
        exit_overhead_fraction: 0.0,
        ..HardwareModelParams::default()
    };
    let evaluator = Evaluator::synthetic(space.clone(), params, 4);
    let mut rng = seeded(12);
    for device in &space.devices {
        for _ in 0..50 {
            let b = BackboneGenome::sample(&space, &mut rng);
            let n = b.total_layers(&space) - space.exit_min_position;
            let mut bits = vec![false; n];
            bits[n - 1] = true;
            let stat = evaluator.eval_static(&b, device).unwrap();
            let profile = evaluator.exit_profile(&b).unwrap();
            let s = dynamic_fitness(
                &b,
                &ExitGenome { indicators: bits },
                &device.default_dvfs(),
                &profile,
                &stat,
                device,
                &evaluator,
                1.0,
            )
            .unwrap();
            assert!(s.mean_latency_ratio < 1.0 && s.mean_energy_ratio < 1.0);
        }
    }
}

fn weakly_covers(a: &ObjectiveVector, b: &ObjectiveVector) -> bool {
    a.normalized().iter().zip(b.normalized()).all(|(x, y)| *x >= y)
}

#[test]
fn outer_engine_invariants_per_generation() {
    let space = SearchSpaceSpec::default();
    let device = space.devices[0].clone();
    let evaluator = Evaluator::synthetic(space.clone(), HardwareModelParams::default(), 21);
    let ooe = OoeConfig {
        generations: 4,
        population: 10,
        prune_fraction: 0.3,
        budget: 40,
        ..OoeConfig::default()
    };
    let ioe = IoeConfig {
        generations: 3,
        population: 12,
        budget: 36,
        ..IoeConfig::default()
    };
    let mut fronts: Vec<Vec<FinalSolution>> = Vec::new();
    let outcome = run_ooe(&device, &evaluator, &ooe, &ioe, 21, |snap, sols| {
        assert_eq!(snap.generation, fronts.len());
        assert_eq!(snap.forwarded.len(), 3);
        assert_eq!(snap.archive_size, sols.len());
        fronts.push(sols.to_vec());
        Ok(())
    })
    .unwrap();
    assert_eq!(outcome.snapshots.len(), 4);
    assert_eq!(outcome.static_evaluations, 40);
    assert_eq!(outcome.dynamic_evaluations, 12 * 36);
    for sols in &fronts {
        for s in sols {
            assert!(s.exits.is_valid_for(&s.backbone, &space));
            for t in sols {
                assert!(!dominates(&s.objectives, &t.objectives).unwrap());
            }
        }
    }
    // every earlier front point is weakly covered by the next front
    for w in fronts.windows(2) {
        for p in &w[0] {
            assert!(w[1].iter().any(|q| weakly_covers(&q.objectives, &p.objectives)));
        }
    }
    assert_eq!(outcome.solutions, *fronts.last().unwrap());
}

#[test]
fn outer_engine_on_toy_space_stays_inside_enumerated_front() {
    for seed in 0..4 {
        let mut config = common::toy_config(seed);
        // fewer backbones than the space holds, so selection actually matters
        config.ooe.population = 4;
        config.ooe.prune_fraction = 0.5;
        config.ooe.generations = 5;
        config.ooe.budget = 20;
        let registry = bilevel_core::evaluator::BackendRegistry::with_builtins();
        let evaluator = config.build_evaluator(&registry).unwrap();
        let device = config.device_spec().unwrap();
        let truth = bilevel_core::cli::enumerate_front(&config, &evaluator).unwrap();
        let outcome = run_ooe(&device, &evaluator, &config.ooe, &config.ioe, seed, |_, _| Ok(())).unwrap();
        // every archived backbone's inner front is exact, so any archived
        // backbone that is on the true front contributes exactly its rows
        let truth_backbones: BTreeSet<_> = truth.solutions.iter().map(|s| s.backbone.clone()).collect();
        for s in &outcome.solutions {
            if truth_backbones.contains(&s.backbone) {
                assert!(truth
                    .solutions
                    .iter()
                    .any(|t| t.backbone == s.backbone && t.exits == s.exits && t.dvfs == s.dvfs));
            } else {
                assert!(truth.solutions.iter().any(|t| dominates(&t.objectives, &s.objectives).unwrap()));
            }
        }
    }
}
