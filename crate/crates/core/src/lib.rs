//! Progressive interactive image-based modeling.
//!
//! A scene is a half-edge [`mesh::Mesh`] built from predefined voxels and refined
//! with reversible topology operators. Users attach pixel correspondences and
//! spatial relations ([`constraint::ConstraintStore`]); the engine recovers
//! cameras ([`calib`]), vertex positions ([`solver`]) and per-face textures
//! ([`texture`]). Every user action is an [`session::Op`] recorded in a journal,
//! so a session can be undone step by step and replayed bit-exactly.
//!
//! The [`service`] module exposes sessions over HTTP for interactive front ends.

pub mod calib;
pub mod constraint;
pub mod demo;
pub mod linalg;
pub mod mesh;
pub mod service;
pub mod session;
pub mod solver;
pub mod synth;
pub mod texture;

pub use calib::Camera;
pub use constraint::ConstraintStore;
pub use mesh::{EdgeId, FaceId, Mesh, PrimitiveKind, PrimitiveSpec, VertexId};
pub use session::{Op, Session};

use serde::{Deserialize, Serialize};

/// Identifier of a registered image (and of the camera that took it).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub u32);

impl std::fmt::Display for ImageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "img{}", self.0)
    }
}
