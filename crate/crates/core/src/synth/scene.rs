use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{N_CATEGORIES, N_COLORS, N_SIZES};
use crate::error::{Error, Result};

/// Horizontal/vertical separation needed for a directional relation.
pub const RELATION_MARGIN: f64 = 0.05;
/// Centre distance below which two objects are `near`.
pub const NEAR_RADIUS: f64 = 0.2;
const PLACEMENT_RETRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predicate {
    LeftOf,
    RightOf,
    Above,
    Below,
    Near,
}

impl Predicate {
    pub const ALL: [Predicate; 5] = [Predicate::LeftOf, Predicate::RightOf, Predicate::Above, Predicate::Below, Predicate::Near];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Predicate::LeftOf => "left-of",
            Predicate::RightOf => "right-of",
            Predicate::Above => "above",
            Predicate::Below => "below",
            Predicate::Near => "near",
        }
    }

    /// Image of the predicate under a horizontal mirror.
    pub fn mirrored(self) -> Predicate {
        match self {
            Predicate::LeftOf => Predicate::RightOf,
            Predicate::RightOf => Predicate::LeftOf,
            p => p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub id: u32,
    pub category: usize,
    pub color: usize,
    pub size: usize,
    /// Centre in the unit square; y grows downwards as in image coordinates.
    pub pos: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub subject: u32,
    pub predicate: Predicate,
    pub object: u32,
}

/// Latent synthetic world: objects and the relations implied by their positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: u64,
    pub objects: Vec<Object>,
    pub relations: Vec<Relation>,
}

/// Every predicate that holds for the ordered pair (s, o).
pub fn pair_predicates(s: &Object, o: &Object) -> Vec<Predicate> {
    let (dx, dy) = (s.pos[0] - o.pos[0], s.pos[1] - o.pos[1]);
    let mut out = Vec::new();
    if dx < -RELATION_MARGIN {
        out.push(Predicate::LeftOf);
    }
    if dx > RELATION_MARGIN {
        out.push(Predicate::RightOf);
    }
    if dy < -RELATION_MARGIN {
        out.push(Predicate::Above);
    }
    if dy > RELATION_MARGIN {
        out.push(Predicate::Below);
    }
    if dx.hypot(dy) < NEAR_RADIUS {
        out.push(Predicate::Near);
    }
    out
}

/// The single label an edge between (s, o) carries: `near` for close pairs,
/// otherwise the direction along the axis of larger displacement.
pub fn dominant_predicate(s: &Object, o: &Object) -> Predicate {
    let (dx, dy) = (s.pos[0] - o.pos[0], s.pos[1] - o.pos[1]);
    if dx.hypot(dy) < NEAR_RADIUS {
        Predicate::Near
    } else if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            Predicate::LeftOf
        } else {
            Predicate::RightOf
        }
    } else if dy < 0.0 {
        Predicate::Above
    } else {
        Predicate::Below
    }
}

/// Relations of all ordered pairs, sorted by (subject, predicate, object).
pub fn derive_relations(objects: &[Object]) -> Vec<Relation> {
    let mut rels = Vec::new();
    for s in objects {
        for o in objects {
            if s.id == o.id {
                continue;
            }
            for predicate in pair_predicates(s, o) {
                rels.push(Relation { subject: s.id, predicate, object: o.id });
            }
        }
    }
    rels.sort();
    rels
}

impl SceneSpec {
    /// Builds a scene and derives its relations.
    pub fn from_objects(id: u64, objects: Vec<Object>) -> Result<Self> {
        let spec = SceneSpec { id, relations: derive_relations(&objects), objects };
        spec.validate()?;
        Ok(spec)
    }

    pub fn object(&self, id: u32) -> Option<&Object> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn holds(&self, subject: u32, predicate: Predicate, object: u32) -> bool {
        self.relations.binary_search(&Relation { subject, predicate, object }).is_ok()
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.len() < 2 {
            return Err(Error::TooFewObjects(self.objects.len()));
        }
        let mut ids: Vec<u32> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.objects.len() {
            return Err(Error::Invalid(format!("scene {} has duplicate object ids", self.id)));
        }
        for o in &self.objects {
            if o.category >= N_CATEGORIES || o.color >= N_COLORS || o.size >= N_SIZES {
                return Err(Error::Invalid(format!("scene {} object {} has an unknown attribute", self.id, o.id)));
            }
            if !o.pos.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::Invalid(format!("scene {} object {} outside the unit square", self.id, o.id)));
            }
        }
        if derive_relations(&self.objects) != self.relations {
            return Err(Error::Invalid(format!("scene {} relations disagree with positions", self.id)));
        }
        Ok(())
    }
}

/// Samples a scene with between 2 and `max_objects` objects placed uniformly
/// in the unit square at least `min_distance` apart.
pub fn sample_scene<R: Rng>(rng: &mut R, id: u64, max_objects: usize, min_distance: f64) -> Result<SceneSpec> {
    if max_objects < 2 {
        return Err(Error::Invalid(format!("max_objects {max_objects} < 2")));
    }
    let n = rng.gen_range(2..=max_objects);
    let mut objects: Vec<Object> = Vec::with_capacity(n);
    for k in 0..n {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let pos = [rng.gen::<f64>(), rng.gen::<f64>()];
            let clear = objects.iter().all(|o| (o.pos[0] - pos[0]).hypot(o.pos[1] - pos[1]) >= min_distance);
            if clear {
                placed = Some(pos);
                break;
            }
        }
        let pos = placed.ok_or(Error::Placement(PLACEMENT_RETRIES))?;
        objects.push(Object {
            id: k as u32,
            category: rng.gen_range(0..N_CATEGORIES),
            color: rng.gen_range(0..N_COLORS),
            size: rng.gen_range(0..N_SIZES),
            pos,
        });
    }
    SceneSpec::from_objects(id, objects)
}
