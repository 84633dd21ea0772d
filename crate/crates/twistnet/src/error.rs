//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]; the variant names mirror the
//! failure classes used throughout the library ("shape", "geometry", ...).

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by tensor ops, builders, data generation, and I/O.
#[derive(Error, Debug)]
pub enum Error {
    /// Operand shapes are incompatible (beyond the supported broadcasts).
    #[error("shape: {0}")]
    Shape(String),

    /// Convolution/pooling geometry is invalid (kernel larger than padded input, ...).
    #[error("geometry: {0}")]
    Geometry(String),

    /// Group count does not divide the channel count.
    #[error("groups: {groups} does not divide {channels} channels")]
    Groups { groups: usize, channels: usize },

    /// A pair-product index is out of range.
    #[error("index: pair index {index} out of range for {channels} channels")]
    Index { index: usize, channels: usize },

    /// A class label lies outside `[0, classes)`.
    #[error("label: {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    /// `backward` was called on a non-scalar tensor.
    #[error("non-scalar backward: root has {elements} elements")]
    NonScalarBackward { elements: usize },

    /// Twist direction is not one of the supported multiples of pi/4.
    #[error("direction: {0} rad is not a supported twist direction")]
    Direction(f64),

    /// Correlation magnitude >= 1 has no finite mutual information.
    #[error("degenerate correlation: |rho| = {0} >= 1")]
    DegenerateCorrelation(f64),

    /// A network spec is internally inconsistent.
    #[error("spec: {0}")]
    Spec(String),

    /// Residual branches disagree in shape.
    #[error("residual: {0}")]
    Residual(String),

    /// A parameter is missing its gradient during an optimizer step.
    #[error("no-grad: parameter '{0}' has no gradient")]
    NoGrad(String),

    /// Training produced a non-finite loss.
    #[error("divergence: non-finite loss at step {step}")]
    Divergence { step: usize },

    /// Label spaces of model and dataset disagree.
    #[error("classes: {0}")]
    Classes(String),

    /// Grating frequency outside (0, 0.5] cycles/pixel.
    #[error("frequency: {0} cycles/pixel outside (0, 0.5]")]
    Frequency(f64),

    /// Malformed image or checkpoint encoding.
    #[error("format: {0}")]
    Format(String),

    /// Dataset directory layout problems (empty class dirs, no classes, ...).
    #[error("dataset: {0}")]
    Dataset(String),

    /// Analysis input does not match the network.
    #[error("input: {0}")]
    Input(String),

    /// Configuration file problems (unknown keys, bad values).
    #[error("config: {0}")]
    Config(String),

    /// Underlying I/O failure.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
