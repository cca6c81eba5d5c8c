//! Finite-mixture conditional data distributions `p(z | c)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FloodError, Result};
use crate::tensor::Mat;

pub type ControlId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub controls: Vec<ControlId>,
    pub frames: Mat,
    pub weight: f64,
}

/// A mixture of `(control track, sequence)` atoms. Weights are normalized per
/// control track, so each track carries its own conditional distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedCorpus {
    atoms: Vec<Atom>,
    num_controls: u32,
    dim: usize,
    frames: usize,
    tracks: Vec<Vec<ControlId>>,
    track_atoms: Vec<Vec<usize>>,
}

const WEIGHT_TOL: f64 = 1e-9;

impl ConditionedCorpus {
    /// Validates shapes, weights and the causal-branching property.
    pub fn new(atoms: Vec<Atom>, num_controls: u32) -> Result<Self> {
        let corpus = Self::new_unchecked(atoms, num_controls)?;
        corpus.check_weights()?;
        corpus.check_causal_branching()?;
        Ok(corpus)
    }

    /// Shape checks only; used by loaders that want to report causal violations
    /// separately.
    pub(crate) fn new_unchecked(atoms: Vec<Atom>, num_controls: u32) -> Result<Self> {
        let first = atoms
            .first()
            .ok_or_else(|| FloodError::invalid("corpus needs at least one atom"))?;
        let (frames, dim) = first.frames.shape();
        if frames == 0 || dim == 0 {
            return Err(FloodError::invalid("atoms need K >= 1 and D >= 1"));
        }
        let mut tracks: Vec<Vec<ControlId>> = Vec::new();
        let mut track_atoms: Vec<Vec<usize>> = Vec::new();
        for (i, a) in atoms.iter().enumerate() {
            if a.frames.shape() != (frames, dim) {
                return Err(FloodError::invalid(format!(
                    "atom {i} has shape {:?}, expected {:?}",
                    a.frames.shape(),
                    (frames, dim)
                )));
            }
            if a.controls.len() != frames {
                return Err(FloodError::invalid(format!(
                    "atom {i} has {} controls for {frames} frames",
                    a.controls.len()
                )));
            }
            if let Some(c) = a.controls.iter().find(|&&c| c >= num_controls) {
                return Err(FloodError::invalid(format!(
                    "atom {i} uses control {c} but the vocabulary has {num_controls}"
                )));
            }
            if !(a.weight.is_finite() && a.weight > 0.0) {
                return Err(FloodError::invalid(format!("atom {i} has weight {}", a.weight)));
            }
            if !a.frames.is_finite() {
                return Err(FloodError::invalid(format!("atom {i} has non-finite frames")));
            }
            match tracks.iter().position(|t| *t == a.controls) {
                Some(ti) => track_atoms[ti].push(i),
                None => {
                    tracks.push(a.controls.clone());
                    track_atoms.push(vec![i]);
                }
            }
        }
        Ok(Self {
            atoms,
            num_controls,
            dim,
            frames,
            tracks,
            track_atoms,
        })
    }

    fn check_weights(&self) -> Result<()> {
        for (t, idx) in self.tracks.iter().zip(&self.track_atoms) {
            let total: f64 = idx.iter().map(|&i| self.atoms[i].weight).sum();
            if (total - 1.0).abs() > WEIGHT_TOL {
                return Err(FloodError::Validation(format!(
                    "weights for track {t:?} sum to {total}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// Checks that the conditional law of every frame prefix depends only on the
    /// matching control prefix: for any two tracks agreeing on `c^{0:l}`, the
    /// weighted multisets of `z^{0:l}` coincide. With one atom per track this is
    /// plain prefix equality.
    pub fn check_causal_branching(&self) -> Result<()> {
        for a in 0..self.tracks.len() {
            for b in a + 1..self.tracks.len() {
                let l = common_prefix(&self.tracks[a], &self.tracks[b]);
                if l == 0 {
                    continue;
                }
                if let Some((ia, ib)) = self.prefix_law_mismatch(a, b, l) {
                    return Err(FloodError::Validation(format!(
                        "atoms {ia} and {ib} violate causal branching: their tracks agree on \
                         frames 0..{l} but the frame prefixes are distributed differently"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Groups a track's atoms by their first `l` frames: (representative atom, mass).
    fn prefix_law(&self, track: usize, l: usize) -> Vec<(usize, f64)> {
        let mut law: Vec<(usize, f64)> = Vec::new();
        for &i in &self.track_atoms[track] {
            let p = self.prefix_of(i, l);
            match law.iter_mut().find(|(j, _)| self.prefix_of(*j, l) == p) {
                Some(entry) => entry.1 += self.atoms[i].weight,
                None => law.push((i, self.atoms[i].weight)),
            }
        }
        law
    }

    /// First pair of atoms (one per track) whose prefix masses disagree.
    fn prefix_law_mismatch(&self, a: usize, b: usize, l: usize) -> Option<(usize, usize)> {
        let la = self.prefix_law(a, l);
        let lb = self.prefix_law(b, l);
        for &(ia, wa) in &la {
            let pa = self.prefix_of(ia, l);
            match lb.iter().find(|(ib, _)| self.prefix_of(*ib, l) == pa) {
                Some(&(_, wb)) if (wa - wb).abs() <= WEIGHT_TOL => {}
                Some(&(ib, _)) => return Some((ia, ib)),
                None => return Some((ia, lb[0].0)),
            }
        }
        for &(ib, _) in &lb {
            let pb = self.prefix_of(ib, l);
            if !la.iter().any(|(ia, _)| self.prefix_of(*ia, l) == pb) {
                return Some((la[0].0, ib));
            }
        }
        None
    }

    fn prefix_of(&self, atom: usize, l: usize) -> &[f64] {
        &self.atoms[atom].frames.as_slice()[..l * self.dim]
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn num_controls(&self) -> u32 {
        self.num_controls
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Distinct control tracks in first-appearance order.
    pub fn tracks(&self) -> &[Vec<ControlId>] {
        &self.tracks
    }

    /// Atom indices for the first track whose prefix matches `controls`.
    pub fn atoms_for(&self, controls: &[ControlId]) -> Result<&[usize]> {
        self.tracks
            .iter()
            .position(|t| controls.len() <= t.len() && t[..controls.len()] == *controls)
            .map(|ti| self.track_atoms[ti].as_slice())
            .ok_or_else(|| FloodError::UnknownCondition(controls.to_vec()))
    }

    /// Draws an atom with probability proportional to its weight; with
    /// per-track normalization this picks tracks uniformly.
    pub fn sample_atom(&self, rng: &mut impl Rng) -> &Atom {
        let total: f64 = self.atoms.iter().map(|a| a.weight).sum();
        let mut u = rng.gen::<f64>() * total;
        for a in &self.atoms {
            if u < a.weight {
                return a;
            }
            u -= a.weight;
        }
        self.atoms.last().expect("corpus is nonempty")
    }

    /// Smallest Euclidean distance between two atoms of the same track.
    pub fn min_within_track_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for idx in &self.track_atoms {
            for (p, &i) in idx.iter().enumerate() {
                for &j in &idx[p + 1..] {
                    best = best.min(distance(&self.atoms[i].frames, &self.atoms[j].frames));
                }
            }
        }
        best
    }
}

pub fn distance(a: &Mat, b: &Mat) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn common_prefix(a: &[ControlId], b: &[ControlId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}
