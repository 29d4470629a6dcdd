//! Assembling block shape categories from varying sets of primitives.
//!
//! The pipeline disassembles a known shape instance to generate assembly
//! supervision, learns a state-value function that discovers new instances
//! of the category, plans greedily with it, and produces rendered
//! observation/heatmap datasets for training visual pick-and-place policies.

pub mod config;
pub mod experiment;
pub mod heatmap;
pub mod io;
pub mod json;
pub mod protocol;
pub mod render;
pub mod search;
pub mod shapes;
pub mod unmake;
pub mod value;
pub mod world;

pub use shapes::{ArchSpec, Category, CategoryInstance, TowerSpec, Variant};
pub use world::{AssemblyAction, CanonicalKey, Cell, Color, Orientation, Primitive, WorldError, WorldState, Workspace};
