//! Inner optimization engine: for a frozen backbone, co-evolves exit
//! placements and DVFS settings under the per-exit dynamic score and returns
//! the elitist Pareto archive of (exits, DVFS) pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{Evaluator, ExitProfile, StaticScore};
use crate::genome::{BackboneGenome, DeviceSpec, DvfsGenome, ExitGenome, VariationParams};
use crate::metrics::{hypervolume, Front};
use crate::moea::{survivor_select, tournament_select, Direction, ObjectiveVector, ParetoArchive, RankedPopulation};
use crate::rng::SearchRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveMode {
    /// (effective correctness, energy ratio, latency ratio).
    #[default]
    Vector,
    /// The mean exit score alone.
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IoeConfig {
    pub gamma: f64,
    pub generations: usize,
    pub population: usize,
    pub objective_mode: ObjectiveMode,
    /// Upper bound on generations x population.
    pub budget: usize,
    pub variation: VariationParams,
}

impl Default for IoeConfig {
    fn default() -> Self {
        IoeConfig {
            gamma: 1.0,
            generations: 35,
            population: 100,
            objective_mode: ObjectiveMode::Vector,
            budget: 3500,
            variation: VariationParams::default(),
        }
    }
}

impl IoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.generations == 0 || self.population == 0 {
            return Err(Error::Config("ioe generations and population must be positive".into()));
        }
        if self.generations * self.population > self.budget {
            return Err(Error::Config(format!(
                "ioe generations x population = {} exceeds budget {}",
                self.generations * self.population,
                self.budget
            )));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config("gamma must be nonnegative".into()));
        }
        self.variation.validate()
    }
}

/// Dynamic evaluation of one (exits, DVFS) pair on a backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicScore {
    /// Mean of the per-exit scores.
    pub scalar_d: f64,
    pub mean_n: f64,
    pub mean_energy_ratio: f64,
    pub mean_latency_ratio: f64,
    pub mean_dissim: f64,
    /// `mean_n * mean_dissim^gamma`.
    pub effective_correctness: f64,
    pub n_exits: usize,
}

/// One minus the best correctness fraction among the sampled exits before
/// `i`; the first sampled exit has nothing before it and scores 1.
pub fn dissim(profile: &ExitProfile, sampled_positions: &[usize], i: usize) -> f64 {
    let best_before = sampled_positions[..i]
        .iter()
        .filter_map(|&p| profile.n_at(p))
        .fold(0.0, f64::max);
    1.0 - best_before
}

pub fn exit_score(n: f64, energy_ratio: f64, latency_ratio: f64, dissim: f64, gamma: f64) -> f64 {
    n * energy_ratio * latency_ratio * dissim.powf(gamma)
}

/// Scores every sampled exit of `exits` at DVFS setting `dvfs`, normalizing
/// prefix energy and latency by the backbone's static cost. Counts one
/// dynamic evaluation.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_fitness(
    backbone: &BackboneGenome,
    exits: &ExitGenome,
    dvfs: &DvfsGenome,
    profile: &ExitProfile,
    static_score: &StaticScore,
    device: &DeviceSpec,
    evaluator: &Evaluator,
    gamma: f64,
) -> Result<DynamicScore> {
    if !exits.is_valid_for(backbone, &evaluator.space) {
        return Err(Error::Shape("exit genome is not conditioned on this backbone".into()));
    }
    evaluator.count_dynamic();
    let positions = exits.positions(&evaluator.space);
    let k = positions.len() as f64;
    let (mut sum_score, mut sum_n, mut sum_e, mut sum_l, mut sum_dissim) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let works = evaluator.exit_workloads(backbone, &positions)?;
    for (i, (&p, work)) in positions.iter().zip(&works).enumerate() {
        let (latency, energy) = evaluator.latency_energy(work, device, dvfs)?;
        let energy_ratio = energy / static_score.energy_mj;
        let latency_ratio = latency / static_score.latency_ms;
        let n = profile
            .n_at(p)
            .ok_or_else(|| Error::Shape(format!("exit position {p} missing from profile")))?;
        let d = dissim(profile, &positions, i);
        sum_score += exit_score(n, energy_ratio, latency_ratio, d, gamma);
        sum_n += n;
        sum_e += energy_ratio;
        sum_l += latency_ratio;
        sum_dissim += d;
    }
    let mean_n = sum_n / k;
    let mean_dissim = sum_dissim / k;
    Ok(DynamicScore {
        scalar_d: sum_score / k,
        mean_n,
        mean_energy_ratio: sum_e / k,
        mean_latency_ratio: sum_l / k,
        mean_dissim,
        effective_correctness: mean_n * mean_dissim.powf(gamma),
        n_exits: positions.len(),
    })
}

pub fn ioe_objectives(score: &DynamicScore, mode: ObjectiveMode) -> ObjectiveVector {
    let built = match mode {
        ObjectiveMode::Vector => ObjectiveVector::new(
            vec![score.effective_correctness, score.mean_energy_ratio, score.mean_latency_ratio],
            vec![Direction::Maximize, Direction::Minimize, Direction::Minimize],
        ),
        ObjectiveMode::Scalar => ObjectiveVector::maximize(vec![score.scalar_d]),
    };
    built.expect("dynamic scores are finite")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IoeCandidate {
    pub exits: ExitGenome,
    pub dvfs: DvfsGenome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoeMember {
    pub candidate: IoeCandidate,
    pub score: DynamicScore,
}

pub type IoeArchive = ParetoArchive<IoeMember>;

/// 2-D summary of an inner front: hypervolume of (effective correctness,
/// energy ratio) against the reference (0, 1). Points costing more energy
/// than the static backbone lie outside the box and contribute nothing.
pub fn archive_summary(members: &[IoeMember]) -> Result<f64> {
    let dirs = vec![Direction::Maximize, Direction::Minimize];
    let points = members
        .iter()
        .map(|m| ObjectiveVector::new(vec![m.score.effective_correctness, m.score.mean_energy_ratio], dirs.clone()))
        .collect::<Result<Vec<_>>>()?;
    let reference = ObjectiveVector::new(vec![0.0, 1.0], dirs)?;
    hypervolume(&Front::clipped(points, reference)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoeOutcome {
    pub archive: IoeArchive,
    pub evaluations: usize,
    /// Archive summary after each generation.
    pub summary_history: Vec<f64>,
}

impl IoeOutcome {
    pub fn members(&self) -> Vec<IoeMember> {
        self.archive.entries().iter().map(|(m, _)| m.clone()).collect()
    }
}

/// Runs the inner NSGA-II loop for one backbone.
///
/// The first population enumerates the whole (exits, DVFS) subspace when it
/// fits, and otherwise draws distinct candidates; every later generation
/// breeds `population` offspring by tournament, crossover and mutation and
/// keeps the best `population` of parents and offspring. Exactly
/// `generations * population` dynamic evaluations are made.
pub fn run_ioe(
    backbone: &BackboneGenome,
    static_score: &StaticScore,
    device: &DeviceSpec,
    evaluator: &Evaluator,
    config: &IoeConfig,
    rng: &mut SearchRng,
) -> Result<IoeOutcome> {
    config.validate()?;
    backbone.validate(&evaluator.space)?;
    let space = &evaluator.space;
    let profile = evaluator.exit_profile(backbone)?;
    let evaluate = |batch: &[IoeCandidate]| -> Result<Vec<(IoeMember, ObjectiveVector)>> {
        batch
            .par_iter()
            .map(|c| {
                let score = dynamic_fitness(backbone, &c.exits, &c.dvfs, &profile, static_score, device, evaluator, config.gamma)?;
                let obj = ioe_objectives(&score, config.objective_mode);
                Ok((IoeMember { candidate: c.clone(), score }, obj))
            })
            .collect()
    };

    let mut archive = IoeArchive::new();
    let mut history = Vec::with_capacity(config.generations);
    let mut evaluations = 0;
    let absorb = |archive: &mut IoeArchive, batch: &[(IoeMember, ObjectiveVector)]| -> Result<()> {
        for (m, o) in batch {
            archive.insert(m.clone(), o.clone())?;
        }
        Ok(())
    };

    let initial = initial_population(backbone, device, evaluator, config.population, rng);
    let mut parents = evaluate(&initial)?;
    evaluations += parents.len();
    absorb(&mut archive, &parents)?;
    history.push(archive_summary(&archive.entries().iter().map(|(m, _)| m.clone()).collect::<Vec<_>>())?);

    for _ in 1..config.generations {
        let ranked = RankedPopulation::new(parents.iter().enumerate().map(|(i, (_, o))| (i, o.clone())).collect())?;
        let mut offspring = Vec::with_capacity(config.population);
        while offspring.len() < config.population {
            let a = &parents[tournament_select(&ranked, config.variation.tournament_size, rng)].0.candidate;
            let b = &parents[tournament_select(&ranked, config.variation.tournament_size, rng)].0.candidate;
            let (xa, xb) = a.exits.crossover(&b.exits, &config.variation, rng)?;
            let (fa, fb) = a.dvfs.crossover(&b.dvfs, &config.variation, rng)?;
            for (x, f) in [(xa, fa), (xb, fb)] {
                if offspring.len() < config.population {
                    offspring.push(IoeCandidate {
                        exits: x.mutate(&config.variation, rng),
                        dvfs: f.mutate(device, &config.variation, rng),
                    });
                }
            }
        }
        debug_assert!(offspring.iter().all(|c| c.exits.is_valid_for(backbone, space)));
        let children = evaluate(&offspring)?;
        evaluations += children.len();
        absorb(&mut archive, &children)?;

        let pool: Vec<(IoeMember, ObjectiveVector)> = parents.into_iter().chain(children).collect();
        let ranked = RankedPopulation::new(pool.iter().enumerate().map(|(i, (_, o))| (i, o.clone())).collect())?;
        let keep = survivor_select(&ranked, config.population)?;
        parents = keep.into_iter().map(|i| pool[i].clone()).collect();
        history.push(archive_summary(&archive.entries().iter().map(|(m, _)| m.clone()).collect::<Vec<_>>())?);
    }

    Ok(IoeOutcome {
        archive,
        evaluations,
        summary_history: history,
    })
}

fn initial_population(
    backbone: &BackboneGenome,
    device: &DeviceSpec,
    evaluator: &Evaluator,
    size: usize,
    rng: &mut SearchRng,
) -> Vec<IoeCandidate> {
    let space = &evaluator.space;
    let n_bits = backbone.total_layers(space) - space.exit_min_position;
    let exit_patterns = if n_bits < 63 { (1u64 << n_bits) - 1 } else { u64::MAX };
    let cardinality = exit_patterns.saturating_mul(device.cardinality() as u64);
    let sample = |rng: &mut SearchRng| IoeCandidate {
        exits: ExitGenome::sample(backbone, space, rng),
        dvfs: DvfsGenome::sample(device, rng),
    };
    let mut population: Vec<IoeCandidate> = Vec::with_capacity(size);
    if cardinality <= size as u64 {
        for exits in ExitGenome::enumerate(n_bits) {
            for dvfs in DvfsGenome::enumerate(device) {
                population.push(IoeCandidate { exits: exits.clone(), dvfs });
            }
        }
    } else {
        let mut seen = std::collections::HashSet::new();
        let mut attempts = 0;
        while population.len() < size && attempts < 10 * size {
            attempts += 1;
            let c = sample(rng);
            if seen.insert(c.clone()) {
                population.push(c);
            }
        }
    }
    while population.len() < size {
        population.push(sample(rng));
    }
    population
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(ns: &[f64]) -> ExitProfile {
        ExitProfile {
            positions: (5..5 + ns.len()).collect(),
            n_values: ns.to_vec(),
            final_accuracy: 0.9,
        }
    }

    #[test]
    fn dissim_cases() {
        let p = profile(&[0.3, 0.6, 0.7, 1.0, 1.0]);
        assert_eq!(dissim(&p, &[5, 6, 7], 0), 1.0);
        assert!((dissim(&p, &[5, 6, 7], 2) - 0.4).abs() < 1e-15);
        assert_eq!(dissim(&p, &[8, 9], 1), 0.0);
    }

    #[test]
    fn exit_score_cases() {
        assert!((exit_score(0.6, 0.3, 0.4, 1.0, 1.0) - 0.072).abs() < 1e-15);
        assert_eq!(exit_score(0.6, 0.3, 0.4, 0.2, 0.0), exit_score(0.6, 0.3, 0.4, 0.9, 0.0));
        assert_eq!(exit_score(0.6, 0.3, 0.4, 0.0, 0.0), 0.6 * 0.3 * 0.4);
        assert_eq!(exit_score(0.0, 0.3, 0.4, 1.0, 1.0), 0.0);
    }

    #[test]
    fn objective_shapes() {
        let s = DynamicScore {
            scalar_d: 0.1,
            mean_n: 0.5,
            mean_energy_ratio: 0.4,
            mean_latency_ratio: 0.6,
            mean_dissim: 1.0,
            effective_correctness: 0.5,
            n_exits: 1,
        };
        assert_eq!(ioe_objectives(&s, ObjectiveMode::Scalar).values(), &[0.1]);
        assert_eq!(ioe_objectives(&s, ObjectiveMode::Vector).len(), 3);
        let cheaper = DynamicScore { mean_energy_ratio: 0.3, ..s.clone() };
        let a = ioe_objectives(&cheaper, ObjectiveMode::Vector);
        let b = ioe_objectives(&s, ObjectiveMode::Vector);
        assert!(crate::moea::dominates(&a, &b).unwrap());
    }

    #[test]
    fn config_budget_is_enforced() {
        let c = IoeConfig { generations: 40, ..Default::default() };
        assert!(c.validate().is_err());
        IoeConfig::default().validate().unwrap();
    }
}
