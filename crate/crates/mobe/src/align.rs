//! Anatomical alignment simulation.
//!
//! Subjects record brain activity on grids of different sizes, so their raw
//! voxel vectors are not comparable position by position. Alignment maps every
//! subject grid onto one shared template such that the same latent feature
//! lands in nearby template slots for every subject, then selects a region of
//! interest and flattens to a 1-D sequence.
//!
//! The mapping here is a monotone stretch with optional seeded jitter — a
//! geometric stand-in for surface registration that keeps the property the
//! downstream model depends on (cross-subject correspondence) without any
//! neuroimaging machinery.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One subject's acquisition grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectGeometry {
    pub subject_id: usize,
    /// (depth, height, width) of the acquisition grid.
    pub grid_dims: (usize, usize, usize),
}

impl SubjectGeometry {
    pub fn new(subject_id: usize, grid_dims: (usize, usize, usize)) -> Self {
        SubjectGeometry {
            subject_id,
            grid_dims,
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.grid_dims.0 * self.grid_dims.1 * self.grid_dims.2
    }
}

/// The shared template: a flat array of slots plus a region-of-interest mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub template_size: usize,
    pub roi_mask: Vec<bool>,
}

impl TemplateSpec {
    pub fn new(template_size: usize, roi_mask: Vec<bool>) -> Result<Self> {
        if template_size == 0 {
            return Err(Error::invalid("template_size must be at least 1"));
        }
        if roi_mask.len() != template_size {
            return Err(Error::invalid(format!(
                "roi_mask length {} does not match template_size {}",
                roi_mask.len(),
                template_size
            )));
        }
        if !roi_mask.iter().any(|m| *m) {
            return Err(Error::invalid("roi_mask selects no slots"));
        }
        Ok(TemplateSpec {
            template_size,
            roi_mask,
        })
    }

    /// Template with every slot inside the ROI.
    pub fn full(template_size: usize) -> Result<Self> {
        TemplateSpec::new(template_size, vec![true; template_size])
    }

    pub fn d_roi(&self) -> usize {
        self.roi_mask.iter().filter(|m| **m).count()
    }
}

/// For each template slot, the source voxel indices that feed it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMap {
    pub subject_id: usize,
    pub template_size: usize,
    pub slots: Vec<Vec<usize>>,
}

impl IndexMap {
    /// Total number of source voxels the map covers.
    pub fn source_count(&self) -> usize {
        self.slots.iter().map(Vec::len).sum()
    }

    /// True when every slot holds at most one source and every source appears
    /// exactly once, i.e. the map is invertible on covered slots.
    pub fn is_bijection(&self) -> bool {
        let total = self.source_count();
        let mut seen = vec![false; total];
        for slot in &self.slots {
            if slot.len() > 1 {
                return false;
            }
            for &s in slot {
                if s >= total || seen[s] {
                    return false;
                }
                seen[s] = true;
            }
        }
        seen.iter().all(|s| *s)
    }
}

/// A subject's activity after template projection, ROI selection and
/// flattening.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedVoxelSequence {
    pub subject_id: usize,
    pub values: Vec<f64>,
}

/// Build the subject-to-template map: source voxel `i` lands at slot
/// `floor(i * template_size / voxel_count)`, then moves one slot up or down
/// with probability `jitter` (split evenly), clamped to the template range.
/// Every source is assigned to exactly one slot.
pub fn build_index_map(
    geometry: &SubjectGeometry,
    template: &TemplateSpec,
    jitter: f64,
    seed: u64,
) -> Result<IndexMap> {
    if !(0.0..=1.0).contains(&jitter) {
        return Err(Error::invalid(format!("jitter {jitter} not in [0,1]")));
    }
    let d0 = template.template_size;
    let n = geometry.voxel_count();
    if n == 0 {
        return Err(Error::invalid("subject geometry has zero voxels"));
    }
    let mut r = rng::stream_indexed(seed, "align-map", geometry.subject_id as u64);
    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); d0];
    for i in 0..n {
        let base = i * d0 / n;
        let mut slot = base as i64;
        if jitter > 0.0 {
            let u: f64 = r.random();
            if u < jitter / 2.0 {
                slot -= 1;
            } else if u < jitter {
                slot += 1;
            }
        }
        let slot = slot.clamp(0, d0 as i64 - 1) as usize;
        slots[slot].push(i);
    }
    Ok(IndexMap {
        subject_id: geometry.subject_id,
        template_size: d0,
        slots,
    })
}

/// Project a raw flattened grid onto the template: each slot takes the mean
/// of its contributing sources, zero when nothing maps there.
pub fn template_project(raw: &[f64], map: &IndexMap) -> Result<Vec<f64>> {
    let expected = map.source_count();
    if raw.len() != expected {
        return Err(Error::invalid(format!(
            "raw length {} does not match the map's source count {}",
            raw.len(),
            expected
        )));
    }
    let mut out = vec![0.0; map.template_size];
    for (slot, sources) in map.slots.iter().enumerate() {
        if sources.is_empty() {
            continue;
        }
        let sum: f64 = sources.iter().map(|&s| raw[s]).sum();
        out[slot] = sum / sources.len() as f64;
    }
    Ok(out)
}

/// Scatter template values back to the source grid: every source receives its
/// slot's value. Inverts [`template_project`] exactly when the map is a
/// bijection.
pub fn inverse_project(template_values: &[f64], map: &IndexMap) -> Result<Vec<f64>> {
    if template_values.len() != map.template_size {
        return Err(Error::invalid(format!(
            "template values length {} does not match template_size {}",
            template_values.len(),
            map.template_size
        )));
    }
    let mut raw = vec![0.0; map.source_count()];
    for (slot, sources) in map.slots.iter().enumerate() {
        for &s in sources {
            raw[s] = template_values[slot];
        }
    }
    Ok(raw)
}

/// Full alignment: template projection, ROI selection, flattening in slot
/// order.
pub fn anatomical_align(
    raw: &[f64],
    map: &IndexMap,
    template: &TemplateSpec,
) -> Result<AlignedVoxelSequence> {
    if map.template_size != template.template_size {
        return Err(Error::invalid(format!(
            "map template_size {} does not match template {}",
            map.template_size, template.template_size
        )));
    }
    let projected = template_project(raw, map)?;
    let values: Vec<f64> = projected
        .iter()
        .zip(&template.roi_mask)
        .filter_map(|(v, keep)| keep.then_some(*v))
        .collect();
    Ok(AlignedVoxelSequence {
        subject_id: map.subject_id,
        values,
    })
}

/// The seeded index subset a subject keeps under voxel-dropout misalignment.
/// Each subject draws independently, which is exactly what destroys the
/// cross-subject correspondence.
pub fn misalignment_keep_indices(
    d_roi: usize,
    keep_length: usize,
    subject_id: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if keep_length == 0 {
        return Err(Error::invalid("keep_length must be at least 1"));
    }
    if keep_length > d_roi {
        return Err(Error::invalid(format!(
            "keep_length {keep_length} exceeds sequence length {d_roi}"
        )));
    }
    let mut r = rng::stream_indexed(seed, "misalign", subject_id as u64);
    // partial Fisher-Yates, then restore original ordering
    let mut pool: Vec<usize> = (0..d_roi).collect();
    for i in 0..keep_length {
        let j = r.random_range(i..d_roi);
        pool.swap(i, j);
    }
    let mut kept = pool[..keep_length].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Random voxel dropout to a fixed length, in original voxel order.
pub fn simulate_misalignment(
    aligned: &AlignedVoxelSequence,
    keep_length: usize,
    seed: u64,
) -> Result<AlignedVoxelSequence> {
    let kept =
        misalignment_keep_indices(aligned.values.len(), keep_length, aligned.subject_id, seed)?;
    Ok(AlignedVoxelSequence {
        subject_id: aligned.subject_id,
        values: kept.iter().map(|&i| aligned.values[i]).collect(),
    })
}
