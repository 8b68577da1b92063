pub mod eigen;
pub mod error;
pub mod geometry;
pub mod gradients;
pub mod io;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod neighbors;
pub mod optimizer;
pub mod pipeline;
pub mod projection;
pub mod sdf;
pub mod shapes;
pub mod upsampling;
pub mod vec3;

pub use error::{Error, Result};
pub use vec3::Vec3;
