use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::SceneSpec;
use super::vocab::N_COLORS;
use crate::error::{Error, Result};

/// Scene-level augmentations applied before graph realization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augmentation {
    Identity,
    /// Horizontal mirror, x ↦ 1 − x.
    Flip,
    /// Resamples the color of each object with probability `fraction`.
    AttributeJitter {
        fraction: f64,
    },
    /// Gaussian position noise, then removal of objects outside
    /// `[margin, 1 - margin]²`.
    NoiseCrop {
        sigma: f64,
        margin: f64,
    },
}

impl Augmentation {
    pub const MILD_JITTER: Augmentation = Augmentation::AttributeJitter { fraction: 0.2 };
    pub const STRONG_JITTER: Augmentation = Augmentation::AttributeJitter { fraction: 0.8 };
    pub const SMALL_NOISE_CROP: Augmentation = Augmentation::NoiseCrop { sigma: 0.02, margin: 0.0 };
    pub const STRONG_NOISE_CROP: Augmentation = Augmentation::NoiseCrop { sigma: 0.05, margin: 0.1 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            Augmentation::AttributeJitter { fraction } if !(0.0..=1.0).contains(&fraction) => {
                Err(Error::Invalid(format!("jitter fraction {fraction} outside [0,1]")))
            }
            Augmentation::NoiseCrop { sigma, margin } if sigma < 0.0 || !(0.0..0.5).contains(&margin) => {
                Err(Error::Invalid(format!("noise_crop sigma {sigma} / margin {margin} out of range")))
            }
            _ => Ok(()),
        }
    }
}

pub fn augment_scene<R: Rng>(spec: &SceneSpec, aug: Augmentation, rng: &mut R) -> Result<SceneSpec> {
    aug.validate()?;
    let mut objects = spec.objects.clone();
    match aug {
        Augmentation::Identity => return Ok(spec.clone()),
        Augmentation::Flip => objects.iter_mut().for_each(|o| o.pos[0] = 1.0 - o.pos[0]),
        Augmentation::AttributeJitter { fraction } => {
            for o in &mut objects {
                if rng.gen::<f64>() < fraction {
                    o.color = rng.gen_range(0..N_COLORS);
                }
            }
        }
        Augmentation::NoiseCrop { sigma, margin } => {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
            for o in &mut objects {
                o.pos[0] += normal.sample(rng);
                o.pos[1] += normal.sample(rng);
            }
            let window = margin..=1.0 - margin;
            objects.retain(|o| o.pos.iter().all(|c| window.contains(c)));
            if objects.len() < 2 {
                return Err(Error::TooFewObjects(objects.len()));
            }
        }
    }
    SceneSpec::from_objects(spec.id, objects)
}
