//! Spike trains and force trajectories on the shared simulation grid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamics::{SpikeFrame, TimeGrid};
use crate::error::{Error, Result};

pub const N_FINGERS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Finger {
    Thumb,
    Index,
    Middle,
    Ring,
    Little,
}

impl Finger {
    pub const ALL: [Finger; N_FINGERS] =
        [Finger::Thumb, Finger::Index, Finger::Middle, Finger::Ring, Finger::Little];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Finger::Thumb => "thumb",
            Finger::Index => "index",
            Finger::Middle => "middle",
            Finger::Ring => "ring",
            Finger::Little => "little",
        }
    }
}

impl fmt::Display for Finger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Finger {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Finger::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown finger '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Flexion,
    Extension,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::Flexion, Direction::Extension];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Flexion => "flexion",
            Direction::Extension => "extension",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flexion" => Ok(Direction::Flexion),
            "extension" => Ok(Direction::Extension),
            _ => Err(Error::Parse(format!("unknown direction '{s}'"))),
        }
    }
}

/// Discharge times of a set of sources, as sorted step indices per source.
/// Source `i` is unit ID `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrainSet {
    grid: TimeGrid,
    trains: Vec<Vec<u32>>,
}

impl SpikeTrainSet {
    pub fn new(grid: TimeGrid, trains: Vec<Vec<u32>>) -> Result<Self> {
        for (unit, train) in trains.iter().enumerate() {
            if train.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Data(format!("unit {unit}: spike steps not strictly increasing")));
            }
            if let Some(&last) = train.last() {
                if last as usize >= grid.n_steps {
                    return Err(Error::Data(format!(
                        "unit {unit}: spike at step {last} beyond horizon {}",
                        grid.n_steps
                    )));
                }
            }
        }
        Ok(Self { grid, trains })
    }

    pub fn silent(grid: TimeGrid, n_units: usize) -> Self {
        Self { grid, trains: vec![Vec::new(); n_units] }
    }

    /// Builds a set from per-step lists of firing units.
    pub fn from_step_lists(grid: TimeGrid, n_units: usize, steps: &[Vec<u32>]) -> Result<Self> {
        if steps.len() != grid.n_steps {
            return Err(Error::Shape(format!("{} step lists for {} steps", steps.len(), grid.n_steps)));
        }
        let mut trains = vec![Vec::new(); n_units];
        for (t, active) in steps.iter().enumerate() {
            for &u in active {
                let train = trains
                    .get_mut(u as usize)
                    .ok_or_else(|| Error::Data(format!("unit {u} at step {t} beyond {n_units} units")))?;
                train.push(t as u32);
            }
        }
        Self::new(grid, trains)
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn n_units(&self) -> usize {
        self.trains.len()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    pub fn train(&self, unit: usize) -> &[u32] {
        &self.trains[unit]
    }

    pub fn trains(&self) -> &[Vec<u32>] {
        &self.trains
    }

    pub fn total_spikes(&self) -> usize {
        self.trains.iter().map(Vec::len).sum()
    }

    /// Units firing at each step, ascending within a step.
    pub fn step_lists(&self) -> Vec<Vec<u32>> {
        let mut steps = vec![Vec::new(); self.grid.n_steps];
        for (u, train) in self.trains.iter().enumerate() {
            for &t in train {
                steps[t as usize].push(u as u32);
            }
        }
        steps
    }

    pub fn frames(&self) -> Vec<SpikeFrame> {
        self.step_lists()
            .iter()
            .enumerate()
            .map(|(t, active)| SpikeFrame::from_active(t, self.n_units(), active))
            .collect()
    }

    /// Steps `[start, end)` re-based to start at zero.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.grid.n_steps {
            return Err(Error::Shape(format!(
                "slice [{start}, {end}) outside horizon {}",
                self.grid.n_steps
            )));
        }
        let trains = self
            .trains
            .iter()
            .map(|tr| {
                tr.iter()
                    .filter(|&&t| (t as usize) >= start && (t as usize) < end)
                    .map(|&t| t - start as u32)
                    .collect()
            })
            .collect();
        Ok(Self { grid: self.grid.with_steps(end - start), trains })
    }

    /// Concatenates sets with the same unit population end to end.
    pub fn concat(parts: &[&SpikeTrainSet]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let n_units = first.n_units();
        let mut trains = vec![Vec::new(); n_units];
        let mut offset = 0u32;
        for p in parts {
            if p.n_units() != n_units || !p.grid.same_step(&first.grid) {
                return Err(Error::Shape("concatenated spike sets differ in units or time step".into()));
            }
            for (dst, src) in trains.iter_mut().zip(&p.trains) {
                dst.extend(src.iter().map(|&t| t + offset));
            }
            offset += p.n_steps() as u32;
        }
        Ok(Self { grid: first.grid.with_steps(offset as usize), trains })
    }

    /// Same spikes with extra silent units appended after `self`'s units
    /// (`leading = false`) or inserted before them (`leading = true`).
    pub fn pad_units(&self, extra: usize, leading: bool) -> Self {
        let mut trains = Vec::with_capacity(self.n_units() + extra);
        if leading {
            trains.extend(std::iter::repeat_n(Vec::new(), extra));
            trains.extend(self.trains.iter().cloned());
        } else {
            trains.extend(self.trains.iter().cloned());
            trains.extend(std::iter::repeat_n(Vec::new(), extra));
        }
        Self { grid: self.grid, trains }
    }

    /// Units of `self` followed by units of `other`, on the same steps.
    pub fn stack_units(&self, other: &SpikeTrainSet) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::Shape("stacked spike sets must share a grid".into()));
        }
        let mut trains = self.trains.clone();
        trains.extend(other.trains.iter().cloned());
        Ok(Self { grid: self.grid, trains })
    }
}

/// Five-finger force in %MVC, one row per grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceTrajectory {
    grid: TimeGrid,
    values: Vec<[f64; N_FINGERS]>,
}

impl ForceTrajectory {
    pub fn new(grid: TimeGrid, values: Vec<[f64; N_FINGERS]>) -> Result<Self> {
        if values.len() != grid.n_steps {
            return Err(Error::Shape(format!("{} rows for {} steps", values.len(), grid.n_steps)));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("force trajectory contains non-finite values".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self { grid, values: vec![[0.0; N_FINGERS]; grid.n_steps] }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rows(&self) -> &[[f64; N_FINGERS]] {
        &self.values
    }

    pub fn column(&self, finger: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[finger]).collect()
    }

    /// Whether every value lies within the valid target range `[0, 100]`.
    pub fn within_target_range(&self) -> bool {
        self.values.iter().flatten().all(|v| (0.0..=100.0).contains(v))
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.values.len() {
            return Err(Error::Shape(format!("slice [{start}, {end}) outside horizon {}", self.values.len())));
        }
        Ok(Self { grid: self.grid.with_steps(end - start), values: self.values[start..end].to_vec() })
    }

    pub fn concat(parts: &[&ForceTrajectory]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let mut values = Vec::new();
        for p in parts {
            if !p.grid.same_step(&first.grid) {
                return Err(Error::Shape("concatenated trajectories differ in time step".into()));
            }
            values.extend_from_slice(&p.values);
        }
        Ok(Self { grid: first.grid.with_steps(values.len()), values })
    }
}
