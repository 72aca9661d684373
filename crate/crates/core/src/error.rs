use thiserror::Error;

/// Errors produced by the splatting engine.
#[derive(Error, Debug)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("degenerate faces (area <= 1e-12 m^2): {0:?}")]
    DegenerateFaces(Vec<usize>),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("joint count mismatch: rig has {rig}, pose has {pose}")]
    JointCountMismatch { rig: usize, pose: usize },

    #[error("degenerate blend: blended linear part is singular")]
    DegenerateBlend,

    #[error("NaN depth in splat {0}")]
    NanDepth(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("image smaller than SSIM window: {w}x{h} < 11x11")]
    ImageTooSmall { w: usize, h: usize },

    #[error("penetration requires watertight mesh")]
    NotWatertight,

    #[error("non-finite loss at iteration {iteration} (frame {frame}): {term}")]
    NonFiniteLoss {
        iteration: usize,
        frame: String,
        term: String,
    },

    #[error("missing file: {0}")]
    MissingFile(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("all pose samples rejected")]
    AllSamplesRejected,

    #[error("no pose files found in {0}")]
    EmptyPoseDir(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {msg}")]
    Json { path: String, msg: String },

    #[error("image error on {path}: {msg}")]
    Image { path: String, msg: String },

    #[error("{0}")]
    Pipeline(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Error::Json {
            path: path.into(),
            msg: err.to_string(),
        }
    }
}
