//! NSGA-II machinery: Pareto dominance with per-coordinate directions, fast
//! non-dominated sorting, crowding distance, survivor and tournament
//! selection.

use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SearchRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// Sign that turns the coordinate into a maximization.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Maximize => 1.0,
            Direction::Minimize => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    values: Vec<f64>,
    directions: Vec<Direction>,
}

impl ObjectiveVector {
    pub fn new(values: Vec<f64>, directions: Vec<Direction>) -> Result<Self> {
        if values.len() != directions.len() {
            return Err(Error::Shape(format!(
                "{} values with {} directions",
                values.len(),
                directions.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(ObjectiveVector { values, directions })
    }

    pub fn maximize(values: Vec<f64>) -> Result<Self> {
        let directions = vec![Direction::Maximize; values.len()];
        Self::new(values, directions)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Coordinates mapped so that larger is always better.
    pub fn normalized(&self) -> Vec<f64> {
        self.values.iter().zip(&self.directions).map(|(v, d)| v * d.sign()).collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.directions == other.directions
    }

    pub(crate) fn check_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "objective shapes differ: {:?} vs {:?}",
                self.directions, other.directions
            )))
        }
    }
}

/// Dominance on already-normalized (maximize-all) coordinates.
pub(crate) fn dominates_normalized(a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        if x > y {
            strictly = true;
        }
    }
    strictly
}

/// `a` is no worse than `b` everywhere and strictly better somewhere.
pub fn dominates(a: &ObjectiveVector, b: &ObjectiveVector) -> Result<bool> {
    a.check_shape(b)?;
    Ok(dominates_normalized(&a.normalized(), &b.normalized()))
}

pub(crate) fn check_homogeneous(pop: &[ObjectiveVector]) -> Result<()> {
    if let Some(first) = pop.first() {
        for v in &pop[1..] {
            first.check_shape(v)?;
        }
    }
    Ok(())
}

const PARALLEL_SORT_THRESHOLD: usize = 256;

/// Deb's fast non-dominated sort. Fronts list indices in ascending order.
pub fn fast_nondominated_sort(pop: &[ObjectiveVector]) -> Result<Vec<Vec<usize>>> {
    check_homogeneous(pop)?;
    let norm: Vec<Vec<f64>> = pop.iter().map(ObjectiveVector::normalized).collect();
    Ok(sort_normalized(&norm))
}

pub(crate) fn sort_normalized(norm: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = norm.len();
    let dominated_by_me = |i: usize| -> Vec<usize> {
        (0..n).filter(|&j| dominates_normalized(&norm[i], &norm[j])).collect()
    };
    let dominated_sets: Vec<Vec<usize>> = if n >= PARALLEL_SORT_THRESHOLD {
        (0..n).into_par_iter().map(dominated_by_me).collect()
    } else {
        (0..n).map(dominated_by_me).collect()
    };
    let mut domination_count = vec![0usize; n];
    for set in &dominated_sets {
        for &j in set {
            domination_count[j] += 1;
        }
    }

    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| domination_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_sets[i] {
                domination_count[j] -= 1;
                if domination_count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each member of a front.
///
/// Boundary members of each objective get `+inf`; fronts of at most two
/// members are all boundary. An objective with zero range over the front
/// contributes nothing, boundaries included.
pub fn crowding_distance(front: &[ObjectiveVector]) -> Vec<f64> {
    let norm: Vec<Vec<f64>> = front.iter().map(ObjectiveVector::normalized).collect();
    crowding_normalized(&norm)
}

pub(crate) fn crowding_normalized(front: &[Vec<f64>]) -> Vec<f64> {
    let n = front.len();
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let m = front[0].len();
    let mut distance = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    for k in 0..m {
        order.sort_by(|&a, &b| front[a][k].total_cmp(&front[b][k]).then(a.cmp(&b)));
        let lo = front[order[0]][k];
        let hi = front[order[n - 1]][k];
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        distance[order[0]] = f64::INFINITY;
        distance[order[n - 1]] = f64::INFINITY;
        for w in 1..n - 1 {
            let i = order[w];
            if distance[i].is_finite() {
                distance[i] += (front[order[w + 1]][k] - front[order[w - 1]][k]) / range;
            }
        }
    }
    distance
}

/// Members with their non-domination rank and crowding distance.
///
/// Candidate ids are caller-chosen and only used for identification and
/// deterministic tie-breaking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPopulation {
    pub members: Vec<(usize, ObjectiveVector)>,
    pub rank: Vec<usize>,
    pub crowding: Vec<f64>,
}

impl RankedPopulation {
    pub fn new(members: Vec<(usize, ObjectiveVector)>) -> Result<Self> {
        let vectors: Vec<ObjectiveVector> = members.iter().map(|(_, v)| v.clone()).collect();
        let fronts = fast_nondominated_sort(&vectors)?;
        let norm: Vec<Vec<f64>> = vectors.iter().map(ObjectiveVector::normalized).collect();
        let mut rank = vec![0; members.len()];
        let mut crowding = vec![0.0; members.len()];
        for (r, front) in fronts.iter().enumerate() {
            let pts: Vec<Vec<f64>> = front.iter().map(|&i| norm[i].clone()).collect();
            for (&i, d) in front.iter().zip(crowding_normalized(&pts)) {
                rank[i] = r;
                crowding[i] = d;
            }
        }
        Ok(RankedPopulation { members, rank, crowding })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn id(&self, slot: usize) -> usize {
        self.members[slot].0
    }

    /// Ordering by (rank asc, crowding desc, id asc); `Less` is better.
    pub fn compare_slots(&self, a: usize, b: usize) -> Ordering {
        self.rank[a]
            .cmp(&self.rank[b])
            .then_with(|| self.crowding[b].total_cmp(&self.crowding[a]))
            .then_with(|| self.id(a).cmp(&self.id(b)))
    }

    /// Slots of the rank-0 members.
    pub fn first_front(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.rank[i] == 0).collect()
    }
}

/// Picks `k` candidate ids: whole fronts in rank order, the last partial
/// front by descending crowding distance, remaining ties by lowest id.
pub fn survivor_select(ranked: &RankedPopulation, k: usize) -> Result<Vec<usize>> {
    if k > ranked.len() {
        return Err(Error::SelectionSize {
            requested: k,
            available: ranked.len(),
        });
    }
    let mut slots: Vec<usize> = (0..ranked.len()).collect();
    slots.sort_by(|&a, &b| ranked.compare_slots(a, b));
    Ok(slots[..k].iter().map(|&s| ranked.id(s)).collect())
}

/// Binary (or k-ary) tournament, drawing contestants uniformly with
/// replacement. Returns the winner's candidate id.
pub fn tournament_select(ranked: &RankedPopulation, tournament_size: usize, rng: &mut SearchRng) -> usize {
    assert!(!ranked.is_empty(), "tournament over an empty population");
    let mut best = rng.gen_range(0..ranked.len());
    for _ in 1..tournament_size.max(1) {
        let challenger = rng.gen_range(0..ranked.len());
        if ranked.compare_slots(challenger, best) == Ordering::Less {
            best = challenger;
        }
    }
    ranked.id(best)
}

/// Elitist archive of mutually non-dominated entries.
///
/// Insertion rejects dominated points and exact payload duplicates, and
/// evicts every entry the newcomer dominates. Entries keep insertion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoArchive<T> {
    entries: Vec<(T, ObjectiveVector)>,
}

impl<T> Default for ParetoArchive<T> {
    fn default() -> Self {
        ParetoArchive { entries: Vec::new() }
    }
}

impl<T: PartialEq> ParetoArchive<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns whether the item was added.
    pub fn insert(&mut self, item: T, objectives: ObjectiveVector) -> Result<bool> {
        let norm = objectives.normalized();
        for (existing, obj) in &self.entries {
            obj.check_shape(&objectives)?;
            if *existing == item || dominates_normalized(&obj.normalized(), &norm) {
                return Ok(false);
            }
        }
        self.entries.retain(|(_, obj)| !dominates_normalized(&norm, &obj.normalized()));
        self.entries.push((item, objectives));
        Ok(true)
    }

    pub fn entries(&self) -> &[(T, ObjectiveVector)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(T, ObjectiveVector)> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn objectives(&self) -> Vec<ObjectiveVector> {
        self.entries.iter().map(|(_, o)| o.clone()).collect()
    }

    pub fn is_mutually_nondominated(&self) -> bool {
        let norm: Vec<Vec<f64>> = self.entries.iter().map(|(_, o)| o.normalized()).collect();
        norm.iter()
            .all(|a| norm.iter().all(|b| !dominates_normalized(a, b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn max(v: &[f64]) -> ObjectiveVector {
        ObjectiveVector::maximize(v.to_vec()).unwrap()
    }

    #[test]
    fn dominance_cases() {
        assert!(dominates(&max(&[1.0, 1.0]), &max(&[0.0, 0.0])).unwrap());
        assert!(!dominates(&max(&[1.0, 1.0]), &max(&[1.0, 1.0])).unwrap());
        assert!(!dominates(&max(&[1.0, 0.0]), &max(&[0.0, 1.0])).unwrap());
        assert!(!dominates(&max(&[0.0, 1.0]), &max(&[1.0, 0.0])).unwrap());
    }

    #[test]
    fn dominance_respects_direction() {
        let dirs = vec![Direction::Maximize, Direction::Minimize];
        let a = ObjectiveVector::new(vec![1.0, 1.0], dirs.clone()).unwrap();
        let b = ObjectiveVector::new(vec![1.0, 2.0], dirs).unwrap();
        assert!(dominates(&a, &b).unwrap());
        assert!(!dominates(&b, &a).unwrap());
    }

    #[test]
    fn shape_errors() {
        let a = max(&[1.0, 1.0]);
        let b = max(&[1.0]);
        assert!(matches!(dominates(&a, &b), Err(Error::Shape(_))));
        assert!(ObjectiveVector::new(vec![1.0], vec![]).is_err());
        assert!(matches!(ObjectiveVector::maximize(vec![f64::NAN]), Err(Error::NonFinite(0))));
    }

    #[test]
    fn sort_small_cases() {
        let pop = vec![max(&[2.0, 2.0]), max(&[1.0, 1.0]), max(&[2.0, 1.0]), max(&[1.0, 2.0])];
        assert_eq!(fast_nondominated_sort(&pop).unwrap(), vec![vec![0], vec![2, 3], vec![1]]);

        let same = vec![max(&[1.0, 3.0]); 4];
        assert_eq!(fast_nondominated_sort(&same).unwrap(), vec![vec![0, 1, 2, 3]]);

        let chain: Vec<_> = (0..5).map(|i| max(&[5.0 - i as f64, 5.0 - i as f64])).collect();
        assert_eq!(
            fast_nondominated_sort(&chain).unwrap(),
            (0..5).map(|i| vec![i]).collect::<Vec<_>>()
        );
    }

    #[test]
    fn crowding_cases() {
        assert_eq!(crowding_distance(&[max(&[1.0, 2.0]), max(&[2.0, 1.0])]), vec![f64::INFINITY; 2]);
        assert_eq!(crowding_distance(&[max(&[1.0, 2.0])]), vec![f64::INFINITY]);
        let line = [max(&[0.0, 2.0]), max(&[1.0, 1.0]), max(&[2.0, 0.0])];
        let d = crowding_distance(&line);
        assert!(d[0].is_infinite() && d[2].is_infinite());
        assert!((d[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_objective_contributes_zero() {
        let pts = [max(&[0.0, 5.0]), max(&[1.0, 5.0]), max(&[3.0, 5.0])];
        let d = crowding_distance(&pts);
        assert!((d[1] - 1.0).abs() < 1e-12);
    }

    fn ranked(points: &[[f64; 2]]) -> RankedPopulation {
        RankedPopulation::new(points.iter().enumerate().map(|(i, p)| (i, max(p))).collect()).unwrap()
    }

    #[test]
    fn survivor_selection_cases() {
        let r = ranked(&[[2.0, 2.0], [1.0, 1.0], [2.0, 1.0], [1.0, 2.0], [3.0, 0.0]]);
        let mut all = survivor_select(&r, 5).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        let front0: Vec<usize> = r.first_front().iter().map(|&s| r.id(s)).collect();
        let mut picked = survivor_select(&r, front0.len()).unwrap();
        picked.sort();
        assert_eq!(picked, front0);
        assert!(matches!(survivor_select(&r, 6), Err(Error::SelectionSize { .. })));
    }

    #[test]
    fn survivor_split_matches_sort_oracle() {
        let mut rng = seeded(77);
        for _ in 0..200 {
            let n = rng.gen_range(3..30);
            let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(0..5) as f64, rng.gen_range(0..5) as f64]).collect();
            let r = ranked(&pts);
            let k = rng.gen_range(0..=n);
            let mut oracle: Vec<usize> = (0..n).collect();
            oracle.sort_by(|&a, &b| {
                (r.rank[a], -r.crowding[a], a)
                    .partial_cmp(&(r.rank[b], -r.crowding[b], b))
                    .unwrap()
            });
            oracle.truncate(k);
            assert_eq!(survivor_select(&r, k).unwrap(), oracle);
        }
    }

    #[test]
    fn archive_keeps_only_nondominated() {
        let mut a = ParetoArchive::new();
        assert!(a.insert("x", max(&[1.0, 0.0])).unwrap());
        assert!(a.insert("y", max(&[0.0, 1.0])).unwrap());
        assert!(!a.insert("z", max(&[0.0, 0.0])).unwrap());
        assert!(!a.insert("x", max(&[5.0, 5.0])).unwrap());
        assert!(a.insert("w", max(&[2.0, 2.0])).unwrap());
        assert_eq!(a.len(), 1);
        assert!(a.insert("v", max(&[2.0, 2.0])).unwrap());
        assert_eq!(a.len(), 2);
        assert!(a.is_mutually_nondominated());
    }

    #[test]
    fn tournament_basics() {
        let single = ranked(&[[1.0, 1.0]]);
        let mut rng = seeded(1);
        assert_eq!(tournament_select(&single, 3, &mut rng), 0);
        let two = ranked(&[[1.0, 1.0], [0.0, 0.0]]);
        // with size 2 the rank-0 member wins unless drawn twice as the loser
        for _ in 0..100 {
            let w = tournament_select(&two, 8, &mut rng);
            assert!(w == 0 || w == 1);
        }
    }

    #[test]
    fn tournament_win_rates_match_enumeration() {
        // 4 members, 2 fronts
        let r = ranked(&[[3.0, 0.0], [0.0, 3.0], [1.0, 1.0], [2.0, 2.0]]);
        let n = r.len();
        let mut expected = [0.0f64; 4];
        for a in 0..n {
            for b in 0..n {
                let w = if r.compare_slots(b, a) == Ordering::Less { b } else { a };
                expected[r.id(w)] += 1.0 / (n * n) as f64;
            }
        }
        let mut rng = seeded(12);
        let trials = 10_000;
        let mut wins = [0usize; 4];
        for _ in 0..trials {
            wins[tournament_select(&r, 2, &mut rng)] += 1;
        }
        for i in 0..4 {
            let p = expected[i];
            let sigma = (p * (1.0 - p) / trials as f64).sqrt();
            let observed = wins[i] as f64 / trials as f64;
            assert!((observed - p).abs() <= 5.0 * sigma + 1e-12, "member {i}: {observed} vs {p}");
        }
    }
}
