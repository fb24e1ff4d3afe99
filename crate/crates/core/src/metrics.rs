//! Front-quality metrics: hypervolume, ratio of dominance and
//! non-dominated merging.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moea::{check_homogeneous, dominates_normalized, ObjectiveVector};
use crate::rng::seeded;

/// Indices of the non-dominated members of `points`; exact duplicates keep
/// only their first occurrence.
pub fn nondominated_indices(points: &[ObjectiveVector]) -> Result<Vec<usize>> {
    check_homogeneous(points)?;
    let norm: Vec<Vec<f64>> = points.iter().map(ObjectiveVector::normalized).collect();
    Ok((0..norm.len())
        .filter(|&i| {
            !norm.iter().enumerate().any(|(j, other)| {
                dominates_normalized(other, &norm[i]) || (j < i && *other == norm[i])
            })
        })
        .collect())
}

/// Union of two point sets reduced to its non-dominated subset.
pub fn merge_nondominated(a: &[ObjectiveVector], b: &[ObjectiveVector]) -> Result<Vec<ObjectiveVector>> {
    let all: Vec<ObjectiveVector> = a.iter().chain(b).cloned().collect();
    Ok(nondominated_indices(&all)?.into_iter().map(|i| all[i].clone()).collect())
}

/// A mutually non-dominated point set with an explicit reference point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Front {
    points: Vec<ObjectiveVector>,
    reference: ObjectiveVector,
}

fn weakly_dominates(p: &[f64], r: &[f64]) -> bool {
    p.iter().zip(r).all(|(a, b)| a >= b)
}

impl Front {
    /// Filters `points` to their non-dominated subset. Every point must be
    /// at least as good as `reference` in every coordinate.
    pub fn new(points: Vec<ObjectiveVector>, reference: ObjectiveVector) -> Result<Self> {
        let r = reference.normalized();
        for p in &points {
            reference.check_shape(p)?;
            if !weakly_dominates(&p.normalized(), &r) {
                return Err(Error::ReferenceViolation);
            }
        }
        Self::build(points, reference)
    }

    /// Like [`Front::new`] but silently drops points outside the reference
    /// box, which would contribute no volume anyway.
    pub fn clipped(points: Vec<ObjectiveVector>, reference: ObjectiveVector) -> Result<Self> {
        let r = reference.normalized();
        for p in &points {
            reference.check_shape(p)?;
        }
        let inside = points.into_iter().filter(|p| weakly_dominates(&p.normalized(), &r)).collect();
        Self::build(inside, reference)
    }

    fn build(points: Vec<ObjectiveVector>, reference: ObjectiveVector) -> Result<Self> {
        let keep = nondominated_indices(&points)?;
        let points = keep.into_iter().map(|i| points[i].clone()).collect();
        Ok(Front { points, reference })
    }

    pub fn points(&self) -> &[ObjectiveVector] {
        &self.points
    }

    pub fn reference(&self) -> &ObjectiveVector {
        &self.reference
    }

    pub fn dimension(&self) -> usize {
        self.reference.len()
    }

    /// Points shifted so the reference is the origin and larger is better.
    fn shifted(&self) -> Vec<Vec<f64>> {
        let r = self.reference.normalized();
        self.points
            .iter()
            .map(|p| p.normalized().iter().zip(&r).map(|(x, y)| x - y).collect())
            .collect()
    }
}

/// Exact hypervolume for 1 to 3 objectives.
pub fn hypervolume(front: &Front) -> Result<f64> {
    let pts = front.shifted();
    match front.dimension() {
        1 => Ok(pts.iter().map(|p| p[0]).fold(0.0, f64::max)),
        2 => Ok(area_2d(pts.iter().map(|p| (p[0], p[1])).collect())),
        3 => Ok(volume_3d(pts)),
        d => Err(Error::Dimensionality(d)),
    }
}

/// Sweep over the first coordinate, descending.
fn area_2d(mut pts: Vec<(f64, f64)>) -> f64 {
    pts.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let mut area = 0.0;
    let mut y_max = 0.0;
    for (x, y) in pts {
        if y > y_max {
            area += x * (y - y_max);
            y_max = y;
        }
    }
    area
}

/// Slices along the third coordinate, descending, integrating the 2-D area
/// of every point at or above each slice.
fn volume_3d(mut pts: Vec<Vec<f64>>) -> f64 {
    pts.sort_by(|a, b| b[2].total_cmp(&a[2]));
    let mut volume = 0.0;
    let mut active: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for i in 0..pts.len() {
        active.push((pts[i][0], pts[i][1]));
        let next_z = pts.get(i + 1).map_or(0.0, |p| p[2]);
        let depth = pts[i][2] - next_z;
        if depth > 0.0 {
            volume += area_2d(active.clone()) * depth;
        }
    }
    volume
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HvEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Monte Carlo hypervolume in any dimension: uniform samples in the box
/// spanned by the reference and the per-coordinate best point.
pub fn hypervolume_monte_carlo(front: &Front, samples: usize, seed: u64) -> Result<HvEstimate> {
    if samples == 0 {
        return Err(Error::Config("Monte Carlo hypervolume needs at least one sample".into()));
    }
    let pts = front.shifted();
    let d = front.dimension();
    let upper: Vec<f64> = (0..d).map(|k| pts.iter().map(|p| p[k]).fold(0.0, f64::max)).collect();
    let box_volume: f64 = upper.iter().product();
    if pts.is_empty() || box_volume <= 0.0 {
        return Ok(HvEstimate { value: 0.0, std_error: 0.0 });
    }
    let mut rng = seeded(seed);
    let mut sample = vec![0.0; d];
    let mut hits = 0usize;
    for _ in 0..samples {
        for (s, &u) in sample.iter_mut().zip(&upper) {
            *s = rng.gen::<f64>() * u;
        }
        if pts.iter().any(|p| weakly_dominates(p, &sample)) {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    Ok(HvEstimate {
        value: box_volume * p,
        std_error: box_volume * (p * (1.0 - p) / samples as f64).sqrt(),
    })
}

/// Fraction of `a`'s points that dominate at least one point of `b`.
pub fn ratio_of_dominance(a: &Front, b: &Front) -> Result<f64> {
    a.reference.check_shape(&b.reference)?;
    if a.points.is_empty() {
        return Ok(0.0);
    }
    let nb: Vec<Vec<f64>> = b.points.iter().map(ObjectiveVector::normalized).collect();
    let winners = a
        .points
        .iter()
        .filter(|p| {
            let np = p.normalized();
            nb.iter().any(|q| dominates_normalized(&np, q))
        })
        .count();
    Ok(winners as f64 / a.points.len() as f64)
}
