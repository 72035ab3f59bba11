use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{Element, Tensor};
use crate::phantom::{make_phantom, PhantomSpec};
use crate::projection::{default_step, render_dataset, ProjectionImage, TrajectoryConfig};
use crate::volume::{ClipPlan, Volume};

/// Identity of a sample: which phantom, which view of its trajectory.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleId {
    pub phantom: String,
    pub view: usize,
}

/// One input projection with its `d` ground-truth component projections.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionSample {
    pub phantom: String,
    pub view: usize,
    pub input: ProjectionImage,
    pub targets: Vec<ProjectionImage>,
}

impl DecompositionSample {
    pub fn id(&self) -> SampleId {
        SampleId {
            phantom: self.phantom.clone(),
            view: self.view,
        }
    }

    pub fn components(&self) -> usize {
        self.targets.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.len() < 2 {
            return Err(Error::param("a sample needs at least two components"));
        }
        if self.targets.iter().any(|t| !t.same_size(&self.input)) {
            return Err(Error::shape("target sizes differ from the input size"));
        }
        Ok(())
    }
}

fn check_batch(samples: &[&DecompositionSample]) -> Result<(usize, usize, usize)> {
    let first = samples.first().ok_or_else(|| Error::param("empty batch"))?;
    let (w, h, d) = (first.input.width, first.input.height, first.components());
    for s in samples {
        s.validate()?;
        if s.input.width != w || s.input.height != h || s.components() != d {
            return Err(Error::shape("samples in a batch must share size and component count"));
        }
    }
    Ok((w, h, d))
}

/// Inputs as a `(B, 1, H, W)` tensor.
pub fn stack_inputs<T: Element>(samples: &[&DecompositionSample]) -> Result<Tensor<T>> {
    let (w, h, _) = check_batch(samples)?;
    let data = samples
        .iter()
        .flat_map(|s| s.input.data.iter().map(|&v| T::from_f64(v as f64)))
        .collect();
    Tensor::new(&[samples.len(), 1, h, w], data)
}

/// Targets as a `(B, d, H, W)` tensor.
pub fn stack_targets<T: Element>(samples: &[&DecompositionSample]) -> Result<Tensor<T>> {
    let (w, h, d) = check_batch(samples)?;
    let data = samples
        .iter()
        .flat_map(|s| s.targets.iter().flat_map(|t| t.data.iter().map(|&v| T::from_f64(v as f64))))
        .collect();
    Tensor::new(&[samples.len(), d, h, w], data)
}

/// Groups samples by phantom, preserving first-appearance order.
pub fn group_by_phantom(samples: &[DecompositionSample]) -> Vec<(String, Vec<&DecompositionSample>)> {
    let mut groups: Vec<(String, Vec<&DecompositionSample>)> = Vec::new();
    for s in samples {
        match groups.iter_mut().find(|(p, _)| *p == s.phantom) {
            Some((_, g)) => g.push(s),
            None => groups.push((s.phantom.clone(), vec![s])),
        }
    }
    groups
}

/// Everything needed to synthesize a decomposition dataset: the phantoms,
/// the voxel grid, how each volume is sliced, and the views to render.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub phantoms: Vec<PhantomSpec>,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub components: usize,
    /// Axis the slabs are cut along; 1 slices in the anterior-posterior direction.
    pub clip_axis: usize,
    pub trajectory: TrajectoryConfig,
}

impl DatasetConfig {
    /// `count` thorax phantoms seeded from `seed`, 64³ voxels of 5 mm, three
    /// slabs, 45 views at 64×64.
    pub fn desk(count: usize, seed: u64) -> DatasetConfig {
        DatasetConfig {
            phantoms: (0..count as u64).map(|i| PhantomSpec::thorax(seed + i)).collect(),
            dims: [64, 64, 64],
            spacing: [5.0; 3],
            components: 3,
            clip_axis: 1,
            trajectory: TrajectoryConfig::desk(),
        }
    }

    pub fn phantom_name(&self, i: usize) -> String {
        format!("phantom{}", self.phantoms[i].seed)
    }

    pub fn volume(&self, i: usize) -> Result<Volume> {
        make_phantom(&self.phantoms[i], self.dims, self.spacing)
    }

    pub fn plan(&self, v: &Volume) -> Result<ClipPlan> {
        ClipPlan::uniform(v, self.clip_axis, self.components)
    }

    /// Renders every phantom at every pose of the trajectory.
    pub fn render(&self) -> Result<Vec<DecompositionSample>> {
        if self.phantoms.is_empty() {
            return Err(Error::param("dataset config lists no phantoms"));
        }
        let poses = self.trajectory.poses()?;
        let mut out = Vec::with_capacity(self.phantoms.len() * poses.len());
        for i in 0..self.phantoms.len() {
            let v = self.volume(i)?;
            let step = self.trajectory.step_mm.unwrap_or_else(|| default_step(&v));
            out.extend(render_dataset(&self.phantom_name(i), &v, &self.plan(&v)?, &poses, step)?);
        }
        Ok(out)
    }
}
