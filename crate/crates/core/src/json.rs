//! JSON wire formats. Floats in world-state files are written with exactly
//! six decimal digits so output is byte-stable.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::world::{Color, Orientation, Primitive, WorldError, WorldState, Workspace};

pub const STATE_SCHEMA_VERSION: u32 = 1;

pub(crate) fn raw_f64(v: f64) -> Box<RawValue> {
    let v = if v == 0.0 { 0.0 } else { v };
    RawValue::from_string(format!("{v:.6}")).expect("formatted float is valid JSON")
}

/// `#[serde(with = "fixed6")]` for scalar floats.
pub mod fixed6 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        super::raw_f64(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        f64::deserialize(d)
    }

    /// Same, for `[f64; 3]`.
    pub mod array3 {
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64; 3], s: S) -> Result<S::Ok, S::Error> {
            [super::super::raw_f64(v[0]), super::super::raw_f64(v[1]), super::super::raw_f64(v[2])].serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 3], D::Error> {
            <[f64; 3]>::deserialize(d)
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrimitiveDto {
    id: u32,
    #[serde(with = "fixed6::array3")]
    extents: [f64; 3],
    #[serde(with = "fixed6::array3")]
    color: [f64; 3],
    #[serde(with = "fixed6::array3")]
    position: [f64; 3],
    orientation: Orientation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct StateDto {
    primitives: Vec<PrimitiveDto>,
    workspace: Workspace,
}

impl From<&WorldState> for StateDto {
    fn from(s: &WorldState) -> Self {
        StateDto {
            primitives: s
                .primitives()
                .iter()
                .map(|p| PrimitiveDto {
                    id: p.id,
                    extents: p.extents(),
                    color: p.color.rgb(),
                    position: p.position,
                    orientation: p.orientation,
                })
                .collect(),
            workspace: (**s.workspace()).clone(),
        }
    }
}

impl StateDto {
    fn into_state(self) -> Result<WorldState, WorldError> {
        let ws = Arc::new(self.workspace);
        let mut prims = Vec::with_capacity(self.primitives.len());
        for p in self.primitives {
            let color = Color::from_rgb(p.color)
                .ok_or_else(|| WorldError::InvalidState(format!("color {:?} is not in the palette", p.color)))?;
            let length = p.extents.iter().cloned().fold(0.0, f64::max).round() as u8;
            let prim = Primitive::new(p.id, length, color, p.position, p.orientation);
            if prim.extents() != p.extents {
                return Err(WorldError::InvalidState(format!(
                    "extents {:?} do not match orientation {:?} of primitive {}",
                    p.extents, p.orientation, p.id
                )));
            }
            prims.push(prim);
        }
        WorldState::new(prims, ws)
    }
}

impl Serialize for WorldState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        StateDto::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for WorldState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        StateDto::deserialize(d)?.into_state().map_err(serde::de::Error::custom)
    }
}

impl WorldState {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("state serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<WorldState, WorldError> {
        let dto: StateDto = serde_json::from_str(s).map_err(|e| WorldError::InvalidState(e.to_string()))?;
        dto.into_state()
    }
}
