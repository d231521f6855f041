use thiserror::Error;

use crate::alignment::AlignmentError;
use crate::descriptors::DescriptorError;
use crate::geometry::GeometryError;
use crate::io::IoError;
use crate::knn::KnnError;
use crate::matching::MatchingError;
use crate::network::NetworkError;
use crate::pipeline::PipelineError;
use crate::synth::SynthError;

/// Crate-wide error. The display form is prefixed with the module that failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("knn: {0}")]
    Knn(#[from] KnnError),
    #[error("descriptors: {0}")]
    Descriptors(#[from] DescriptorError),
    #[error("network: {0}")]
    Network(#[from] NetworkError),
    #[error("matching: {0}")]
    Matching(#[from] MatchingError),
    #[error("alignment: {0}")]
    Alignment(#[from] AlignmentError),
    #[error("pipeline: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("io: {0}")]
    Io(#[from] IoError),
    #[error("synth: {0}")]
    Synth(#[from] SynthError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
