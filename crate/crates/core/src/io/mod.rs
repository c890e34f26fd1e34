//! File formats: tensor container, flow targets, OBJ meshes and images.

pub mod flow;
pub mod image;
pub mod obj;
pub mod tensorfile;

pub use flow::FlowMap;
pub use image::Image;
