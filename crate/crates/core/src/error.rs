use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: all sites are coplanar")]
    DegenerateInput,
    #[error("sites {0} and {1} coincide")]
    DuplicateSites(usize, usize),
    #[error("tetrahedron is too flat for a circumcenter (|p.(q x r)| = {0:e})")]
    NearDegenerate(f64),
    #[error("tetrahedron Gram matrix is singular (smallest eigenvalue {0:e})")]
    SingularGram(f64),
    #[error("no tetrahedron straddles the zero level{}", .iteration.map(|i| format!(" (iteration {i})")).unwrap_or_default())]
    EmptyReconstruction { iteration: Option<usize> },
    #[error("no site has an incident crossing tetrahedron")]
    NoActiveSites,
    #[error("point cloud bounding box has zero extent")]
    DegeneratePointCloud,
    #[error("every finite-difference probe changed the frozen combinatorics; retry with a smaller step")]
    AllProbesFlipped,
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{0}: file contains no points")]
    EmptyFile(PathBuf),
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
