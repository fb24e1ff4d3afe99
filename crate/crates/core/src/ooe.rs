//! Outer optimization engine: evolves backbones, prunes each generation on
//! static scores, hands the survivors to the inner engine and re-ranks them
//! on static scores plus the quality of their inner fronts.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{Evaluator, StaticScore};
use crate::genome::{BackboneGenome, DeviceSpec, DvfsGenome, ExitGenome, VariationParams};
use crate::ioe::{archive_summary, run_ioe, DynamicScore, IoeArchive, IoeConfig, IoeMember};
use crate::moea::{survivor_select, tournament_select, Direction, ObjectiveVector, ParetoArchive, RankedPopulation};
use crate::rng::{fork, seeded, SearchRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OoeConfig {
    pub generations: usize,
    pub population: usize,
    /// Fraction of each generation forwarded to the inner engine.
    pub prune_fraction: f64,
    /// Upper bound on generations x population.
    pub budget: usize,
    pub variation: VariationParams,
}

impl Default for OoeConfig {
    fn default() -> Self {
        OoeConfig {
            generations: 15,
            population: 30,
            prune_fraction: 0.25,
            budget: 450,
            variation: VariationParams::default(),
        }
    }
}

impl OoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.generations == 0 || self.population == 0 {
            return Err(Error::Config("ooe generations and population must be positive".into()));
        }
        if self.generations * self.population > self.budget {
            return Err(Error::Config(format!(
                "ooe generations x population = {} exceeds budget {}",
                self.generations * self.population,
                self.budget
            )));
        }
        if !(self.prune_fraction > 0.0 && self.prune_fraction <= 1.0) {
            return Err(Error::Config("prune_fraction must lie in (0, 1]".into()));
        }
        self.variation.validate()
    }

    /// Backbones forwarded to the inner engine per generation.
    pub fn forwarded_per_generation(&self) -> usize {
        ((self.prune_fraction * self.population as f64).ceil() as usize).clamp(1, self.population)
    }
}

/// One point of the final bi-level front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSolution {
    pub backbone: BackboneGenome,
    pub exits: ExitGenome,
    pub dvfs: DvfsGenome,
    pub static_score: StaticScore,
    pub dynamic_score: DynamicScore,
    /// (accuracy, latency, energy, inner-front hypervolume).
    pub objectives: ObjectiveVector,
    pub ioe_objectives: ObjectiveVector,
    pub ioe_hv: f64,
}

/// Everything known about a backbone that has been through the inner engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneRecord {
    pub backbone: BackboneGenome,
    pub static_score: StaticScore,
    pub ioe_archive: IoeArchive,
    pub ioe_hv: f64,
}

impl BackboneRecord {
    pub fn objectives(&self) -> ObjectiveVector {
        combined_objectives(&self.static_score, self.ioe_hv)
    }

    fn merge(&mut self, archive: IoeArchive) -> Result<()> {
        for (m, o) in archive.into_entries() {
            self.ioe_archive.insert(m, o)?;
        }
        self.ioe_hv = summary_of(&self.ioe_archive)?;
        Ok(())
    }

    fn solutions(&self) -> Vec<FinalSolution> {
        let objectives = self.objectives();
        self.ioe_archive
            .entries()
            .iter()
            .map(|(m, o)| FinalSolution {
                backbone: self.backbone.clone(),
                exits: m.candidate.exits.clone(),
                dvfs: m.candidate.dvfs.clone(),
                static_score: self.static_score,
                dynamic_score: m.score.clone(),
                objectives: objectives.clone(),
                ioe_objectives: o.clone(),
                ioe_hv: self.ioe_hv,
            })
            .collect()
    }
}

fn summary_of(archive: &IoeArchive) -> Result<f64> {
    let members: Vec<IoeMember> = archive.entries().iter().map(|(m, _)| m.clone()).collect();
    archive_summary(&members)
}

pub fn static_objectives(s: &StaticScore) -> ObjectiveVector {
    ObjectiveVector::new(
        vec![s.accuracy, s.latency_ms, s.energy_mj],
        vec![Direction::Maximize, Direction::Minimize, Direction::Minimize],
    )
    .expect("static scores are finite")
}

pub fn combined_objectives(s: &StaticScore, ioe_hv: f64) -> ObjectiveVector {
    ObjectiveVector::new(
        vec![s.accuracy, s.latency_ms, s.energy_mj, ioe_hv],
        vec![Direction::Maximize, Direction::Minimize, Direction::Minimize, Direction::Maximize],
    )
    .expect("combined scores are finite")
}

/// Statically evaluates `population` and keeps the best
/// `ceil(prune_fraction * n)` by rank, then crowding. Returns the scores of
/// every member and the kept indices in selection order.
pub fn static_rank_and_prune(
    population: &[BackboneGenome],
    device: &DeviceSpec,
    evaluator: &Evaluator,
    prune_fraction: f64,
) -> Result<(Vec<StaticScore>, Vec<usize>)> {
    if population.is_empty() {
        return Err(Error::Config("cannot prune an empty population".into()));
    }
    let scores = population
        .par_iter()
        .map(|b| evaluator.eval_static(b, device))
        .collect::<Result<Vec<_>>>()?;
    let keep = ((prune_fraction * population.len() as f64).ceil() as usize).clamp(1, population.len());
    let ranked = RankedPopulation::new(scores.iter().map(static_objectives).enumerate().collect())?;
    let kept = survivor_select(&ranked, keep)?;
    Ok((scores, kept))
}

/// Ranks backbones on (accuracy, latency, energy, inner-front hypervolume).
/// Slot ids are positions in `candidates`.
pub fn combined_rank(candidates: &[(StaticScore, &IoeArchive)]) -> Result<RankedPopulation> {
    let mut members = Vec::with_capacity(candidates.len());
    for (i, (s, archive)) in candidates.iter().enumerate() {
        if archive.is_empty() {
            return Err(Error::EmptyArchive(i));
        }
        members.push((i, combined_objectives(s, summary_of(archive)?)));
    }
    RankedPopulation::new(members)
}

/// Per-generation summary kept in the archive file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSnapshot {
    pub generation: usize,
    pub static_evaluations: u64,
    pub dynamic_evaluations: u64,
    pub forwarded: Vec<BackboneGenome>,
    pub survivors: Vec<BackboneGenome>,
    pub archive_backbones: Vec<BackboneGenome>,
    pub archive_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OoeOutcome {
    pub solutions: Vec<FinalSolution>,
    pub snapshots: Vec<GenerationSnapshot>,
    pub forwarded_backbones: usize,
    pub static_evaluations: u64,
    pub dynamic_evaluations: u64,
}

/// Runs the nested search. `on_generation` sees each snapshot and the
/// current final front as soon as the generation completes.
pub fn run_ooe(
    device: &DeviceSpec,
    evaluator: &Evaluator,
    config: &OoeConfig,
    ioe_config: &IoeConfig,
    seed: u64,
    mut on_generation: impl FnMut(&GenerationSnapshot, &[FinalSolution]) -> Result<()>,
) -> Result<OoeOutcome> {
    config.validate()?;
    ioe_config.validate()?;
    device.validate()?;
    let mut rng = seeded(seed);
    let mut records: BTreeMap<BackboneGenome, BackboneRecord> = BTreeMap::new();
    let mut survivors: Vec<BackboneGenome> = Vec::new();
    let mut snapshots = Vec::with_capacity(config.generations);
    let mut solutions = Vec::new();
    let mut forwarded_total = 0;
    let static_base = evaluator.static_evaluations();
    let dynamic_base = evaluator.dynamic_evaluations();

    let mut population = initial_backbones(evaluator, config.population, &mut rng);
    for generation in 0..config.generations {
        let (scores, kept) = static_rank_and_prune(&population, device, evaluator, config.prune_fraction)?;
        let forwarded: Vec<(BackboneGenome, StaticScore)> =
            kept.iter().map(|&i| (population[i].clone(), scores[i])).collect();
        forwarded_total += forwarded.len();

        let mut streams: Vec<SearchRng> = forwarded.iter().map(|_| fork(&mut rng)).collect();
        let outcomes = forwarded
            .par_iter()
            .zip(streams.par_iter_mut())
            .map(|((b, s), r)| run_ioe(b, s, device, evaluator, ioe_config, r))
            .collect::<Result<Vec<_>>>()?;
        for ((b, s), outcome) in forwarded.iter().zip(outcomes) {
            let record = records.entry(b.clone()).or_insert_with(|| BackboneRecord {
                backbone: b.clone(),
                static_score: *s,
                ioe_archive: IoeArchive::new(),
                ioe_hv: 0.0,
            });
            record.merge(outcome.archive)?;
        }

        // second selection over this generation's forwarded backbones and
        // the previous survivors
        let mut seen = BTreeSet::new();
        let pool: Vec<&BackboneRecord> = forwarded
            .iter()
            .map(|(b, _)| b)
            .chain(&survivors)
            .filter(|b| seen.insert((*b).clone()))
            .map(|b| &records[b])
            .collect();
        let candidates: Vec<(StaticScore, &IoeArchive)> = pool.iter().map(|r| (r.static_score, &r.ioe_archive)).collect();
        let ranked = combined_rank(&candidates)?;
        let chosen = survivor_select(&ranked, config.population.min(pool.len()))?;
        survivors = chosen.iter().map(|&i| pool[i].backbone.clone()).collect();

        let front = final_front(&records)?;
        solutions = front.iter().flat_map(|b| records[b].solutions()).collect();
        let snapshot = GenerationSnapshot {
            generation,
            static_evaluations: evaluator.static_evaluations() - static_base,
            dynamic_evaluations: evaluator.dynamic_evaluations() - dynamic_base,
            forwarded: forwarded.into_iter().map(|(b, _)| b).collect(),
            survivors: survivors.clone(),
            archive_size: solutions.len(),
            archive_backbones: front,
        };
        on_generation(&snapshot, &solutions)?;
        snapshots.push(snapshot);

        if generation + 1 < config.generations {
            let parents: Vec<(StaticScore, &IoeArchive)> = survivors
                .iter()
                .map(|b| (records[b].static_score, &records[b].ioe_archive))
                .collect();
            let ranked = combined_rank(&parents)?;
            population = breed(&survivors, &ranked, evaluator, &config.variation, config.population, &mut rng)?;
        }
    }

    Ok(OoeOutcome {
        solutions,
        snapshots,
        forwarded_backbones: forwarded_total,
        static_evaluations: evaluator.static_evaluations() - static_base,
        dynamic_evaluations: evaluator.dynamic_evaluations() - dynamic_base,
    })
}

/// Backbones whose combined vectors are not dominated by any other record.
fn final_front(records: &BTreeMap<BackboneGenome, BackboneRecord>) -> Result<Vec<BackboneGenome>> {
    let mut archive = ParetoArchive::new();
    for (b, r) in records {
        archive.insert(b.clone(), r.objectives())?;
    }
    let mut front: Vec<BackboneGenome> = archive.into_entries().into_iter().map(|(b, _)| b).collect();
    front.sort();
    Ok(front)
}

fn breed(
    parents: &[BackboneGenome],
    ranked: &RankedPopulation,
    evaluator: &Evaluator,
    variation: &VariationParams,
    size: usize,
    rng: &mut SearchRng,
) -> Result<Vec<BackboneGenome>> {
    let space = &evaluator.space;
    let mut children = Vec::with_capacity(size);
    while children.len() < size {
        let a = &parents[tournament_select(ranked, variation.tournament_size, rng)];
        let b = &parents[tournament_select(ranked, variation.tournament_size, rng)];
        let (ca, cb) = a.crossover(b, space, variation, rng)?;
        for c in [ca, cb] {
            if children.len() < size {
                children.push(c.mutate(space, variation, rng));
            }
        }
    }
    Ok(children)
}

/// The whole backbone space (padded with random draws) when it fits in one
/// population, otherwise distinct random draws.
fn initial_backbones(evaluator: &Evaluator, size: usize, rng: &mut SearchRng) -> Vec<BackboneGenome> {
    let space = &evaluator.space;
    let mut population: Vec<BackboneGenome> = if space.backbone_cardinality() <= size as u128 {
        space.enumerate_backbones().collect()
    } else {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(size);
        let mut attempts = 0;
        while out.len() < size && attempts < 10 * size {
            attempts += 1;
            let b = BackboneGenome::sample(space, rng);
            if seen.insert(b.clone()) {
                out.push(b);
            }
        }
        out
    };
    while population.len() < size {
        population.push(BackboneGenome::sample(space, rng));
    }
    population
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::HardwareModelParams;
    use crate::genome::SearchSpaceSpec;
    use crate::ioe::IoeCandidate;

    fn score(acc: f64, lat: f64, en: f64) -> StaticScore {
        StaticScore {
            accuracy: acc,
            latency_ms: lat,
            energy_mj: en,
        }
    }

    fn member(c: f64, e: f64) -> (IoeMember, ObjectiveVector) {
        let device = &SearchSpaceSpec::default().devices[0];
        let s = DynamicScore {
            scalar_d: 0.0,
            mean_n: c,
            mean_energy_ratio: e,
            mean_latency_ratio: e,
            mean_dissim: 1.0,
            effective_correctness: c,
            n_exits: 1,
        };
        let o = crate::ioe::ioe_objectives(&s, crate::ioe::ObjectiveMode::Vector);
        let m = IoeMember {
            candidate: IoeCandidate {
                exits: ExitGenome { indicators: vec![true] },
                dvfs: DvfsGenome {
                    device: device.name.clone(),
                    compute_idx: (c * 10.0) as usize,
                    emc_idx: None,
                },
            },
            score: s,
        };
        (m, o)
    }

    fn archive(points: &[(f64, f64)]) -> IoeArchive {
        let mut a = IoeArchive::new();
        for &(c, e) in points {
            let (m, o) = member(c, e);
            a.insert(m, o).unwrap();
        }
        a
    }

    #[test]
    fn combined_rank_prefers_better_inner_front() {
        let s = score(0.7, 10.0, 5.0);
        let good = archive(&[(0.8, 0.2), (0.5, 0.1)]);
        let bad = archive(&[(0.6, 0.4)]);
        let ranked = combined_rank(&[(s, &bad), (s, &good)]).unwrap();
        assert_eq!(ranked.first_front(), vec![1]);
        assert!(summary_of(&good).unwrap() > summary_of(&bad).unwrap());

        let single = combined_rank(&[(s, &bad)]).unwrap();
        assert_eq!(single.first_front(), vec![0]);
        assert!(matches!(combined_rank(&[(s, &IoeArchive::new())]), Err(Error::EmptyArchive(0))));
    }

    #[test]
    fn summary_ignores_member_order() {
        let a = archive(&[(0.8, 0.2), (0.5, 0.1), (0.3, 0.05)]);
        let b = archive(&[(0.3, 0.05), (0.5, 0.1), (0.8, 0.2)]);
        assert_eq!(summary_of(&a).unwrap(), summary_of(&b).unwrap());
    }

    #[test]
    fn prune_keeps_the_right_count() {
        let space = SearchSpaceSpec::default();
        let evaluator = Evaluator::synthetic(space.clone(), HardwareModelParams::default(), 3);
        let device = space.devices[0].clone();
        let mut rng = seeded(4);
        let pop: Vec<BackboneGenome> = (0..30).map(|_| BackboneGenome::sample(&space, &mut rng)).collect();
        let (scores, kept) = static_rank_and_prune(&pop, &device, &evaluator, 0.25).unwrap();
        assert_eq!(scores.len(), 30);
        assert_eq!(kept.len(), 8);
        let (_, all) = static_rank_and_prune(&pop, &device, &evaluator, 1.0).unwrap();
        assert_eq!(all.iter().copied().collect::<BTreeSet<_>>(), (0..30).collect());
        assert_eq!(evaluator.static_evaluations(), 60);

        // anything dominated by at least `keep` others is never kept
        let objs: Vec<ObjectiveVector> = scores.iter().map(static_objectives).collect();
        for i in 0..30 {
            let dominators = objs.iter().filter(|o| crate::moea::dominates(o, &objs[i]).unwrap()).count();
            if dominators >= 8 {
                assert!(!kept.contains(&i));
            }
        }
    }

    #[test]
    fn config_validation() {
        OoeConfig::default().validate().unwrap();
        assert_eq!(OoeConfig::default().forwarded_per_generation(), 8);
        assert!(OoeConfig { prune_fraction: 0.0, ..Default::default() }.validate().is_err());
        assert!(OoeConfig { population: 31, ..Default::default() }.validate().is_err());
    }
}
