//! Synthetic traffic scenarios.
//!
//! Every token of a scenario is Gaussian noise. Accident scenarios add a
//! fixed direction scaled by the signature amplitude to the patches of the
//! chosen agents, views and frames. Which agents, views and frames carry the
//! signature is configurable, which is what makes single-agent blindness and
//! temporal memory testable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fleet::{AgentRole, ViewId, NUM_VIEWS};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioFamily {
    /// Number of frames `T`.
    pub frames: usize,
    /// Recorded agents, in the order of the scenario tensor's agent axis.
    pub agents: Vec<AgentRole>,
    /// Patches per view `P`.
    pub patches: usize,
    /// Patch width `F`.
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub signature_amplitude: f64,
    pub signature_views: Vec<ViewId>,
    pub visible_to: Vec<AgentRole>,
    /// 1-based frame numbers carrying the signature; `None` means all.
    pub active_frames: Option<Vec<usize>>,
    /// Size of the camera images these features stand in for. Recorded only.
    pub nominal_image_size: [usize; 2],
}

impl Default for ScenarioFamily {
    fn default() -> Self {
        ScenarioFamily {
            frames: 5,
            agents: AgentRole::ALL.to_vec(),
            patches: 4,
            feature_dim: 16,
            noise_sigma: 1.0,
            signature_amplitude: 3.0,
            signature_views: ViewId::ALL.to_vec(),
            visible_to: vec![AgentRole::Ego],
            active_frames: None,
            nominal_image_size: [224, 224],
        }
    }
}

impl ScenarioFamily {
    /// Signature seen only by the other vehicle.
    pub fn partial_observability() -> Self {
        ScenarioFamily {
            visible_to: vec![AgentRole::OtherVehicle],
            ..Default::default()
        }
    }

    /// Signature visible to the ego vehicle at frame 1 only.
    pub fn first_frame_only() -> Self {
        ScenarioFamily {
            active_frames: Some(vec![1]),
            ..Default::default()
        }
    }

    pub fn active_frames(&self) -> Vec<usize> {
        self.active_frames
            .clone()
            .unwrap_or_else(|| (1..=self.frames).collect())
    }

    pub fn shape(&self) -> [usize; 5] {
        [self.frames, self.agents.len(), NUM_VIEWS, self.patches, self.feature_dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::Config("scenario needs at least one agent".into()));
        }
        let mut seen = self.agents.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.agents.len() {
            return Err(Error::Config("duplicate agent in scenario".into()));
        }
        if self.frames == 0 || self.patches == 0 || self.feature_dim == 0 {
            return Err(Error::Config("frames, patches and feature_dim must be positive".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0 && self.signature_amplitude.is_finite()) {
            return Err(Error::Config("noise_sigma and signature_amplitude must be finite".into()));
        }
        if let Some(bad) = self.active_frames().into_iter().find(|&f| f == 0 || f > self.frames) {
            return Err(Error::Config(format!("active frame {bad} outside 1..={}", self.frames)));
        }
        Ok(())
    }

    /// True when a positive scenario of this family actually carries a
    /// signature somewhere.
    pub fn injects_signature(&self) -> bool {
        !self.signature_views.is_empty()
            && !self.active_frames().is_empty()
            && self.visible_to.iter().any(|r| self.agents.contains(r))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub family: ScenarioFamily,
    pub label: u8,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        match self.label {
            0 => Ok(()),
            1 if self.family.injects_signature() => Ok(()),
            1 => Err(Error::Config(
                "an accident scenario needs a visible agent, a signature view and an active frame".into(),
            )),
            l => Err(Error::Config(format!("label must be 0 or 1, got {l}"))),
        }
    }
}

const SIGNATURE_STREAM: u64 = 0x5167;

/// Unit-norm signature direction for a dataset seed.
pub fn signature_direction(seed: u64, feature_dim: usize) -> Vec<f64> {
    let mut rng = Rng::derive(seed, SIGNATURE_STREAM);
    loop {
        let v: Vec<f64> = (0..feature_dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `T × N_A × 6 × P × F` features for one scenario. Noise is drawn for every
/// token regardless of label, so a positive and a negative scenario built
/// from the same stream differ only where the signature lands.
pub fn generate_scenario(spec: &ScenarioSpec, direction: &[f64], rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    let fam = &spec.family;
    if direction.len() != fam.feature_dim {
        return Err(Error::invalid(
            "generate_scenario",
            format!("direction has {} entries, feature_dim is {}", direction.len(), fam.feature_dim),
        ));
    }
    let shape = fam.shape();
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|_| rng.normal() * fam.noise_sigma).collect();
    if spec.label == 1 {
        let (na, p, f) = (fam.agents.len(), fam.patches, fam.feature_dim);
        let views: Vec<usize> = fam.signature_views.iter().map(|v| v.index()).collect();
        for frame in fam.active_frames() {
            let t = frame - 1;
            for (a, role) in fam.agents.iter().enumerate() {
                if !fam.visible_to.contains(role) {
                    continue;
                }
                for &v in &views {
                    let base = ((t * na + a) * NUM_VIEWS + v) * p * f;
                    for patch in data[base..base + p * f].chunks_mut(f) {
                        for (x, s) in patch.iter_mut().zip(direction) {
                            *x += fam.signature_amplitude * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&shape, data)
}
