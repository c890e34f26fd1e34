//! Sphere-traced, physically-based rendering of intrinsic fields.

pub mod brdf;
pub mod camera;
pub mod env;
pub mod marching;
pub mod render;
pub mod trace;

pub use brdf::{specular_color, SpecularAlbedo};
pub use camera::{CameraPose, Orbit};
pub use env::EnvironmentMap;
pub use marching::marching_cubes;
pub use render::{
    plan_frame, record_shading, render_image, render_on_tape, shade, shade_plan, Background, FramePlan,
    RenderOptions, RenderOutput,
};
pub use trace::{sphere_trace, visibility, Ray, SurfaceHit, TraceOptions};

#[cfg(test)]
mod tests;
