use std::fmt;

use scenesynth::datio::DatioError;
use scenesynth::heatmap::HeatmapIoError;
use scenesynth::pipeline::PipelineError;
use scenesynth::textrender::RenderError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;
pub const EXIT_INTERRUPTED: i32 = 130;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Io(String),
    Validation(String),
    Interrupted,
}

impl Failure {
    pub fn config(m: impl Into<String>) -> Self {
        Failure::Config(m.into())
    }

    pub fn io(m: impl Into<String>) -> Self {
        Failure::Io(m.into())
    }

    pub fn validation(m: impl Into<String>) -> Self {
        Failure::Validation(m.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Io(_) => EXIT_IO,
            Failure::Validation(_) => EXIT_VALIDATION,
            Failure::Interrupted => EXIT_INTERRUPTED,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
            Failure::Validation(m) => write!(f, "validation error: {m}"),
            Failure::Interrupted => write!(f, "interrupted"),
        }
    }
}

impl From<DatioError> for Failure {
    fn from(e: DatioError) -> Self {
        match e {
            DatioError::Io { .. } | DatioError::Missing { .. } | DatioError::Image { .. } | DatioError::Encode { .. } => {
                Failure::Io(e.to_string())
            }
            DatioError::Parse { .. } | DatioError::Json { .. } | DatioError::DuplicateId(_) | DatioError::Schema { .. } => {
                Failure::Validation(e.to_string())
            }
        }
    }
}

impl From<RenderError> for Failure {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::Io { .. } | RenderError::Texture { .. } | RenderError::FontParse(_) => Failure::Io(e.to_string()),
            RenderError::Config(_) | RenderError::InvalidSpec(_) | RenderError::UnknownFont(_) => Failure::Config(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<HeatmapIoError> for Failure {
    fn from(e: HeatmapIoError) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Config(e.to_string()),
            PipelineError::Render(r) => r.into(),
            PipelineError::HeatmapIo(h) => h.into(),
            _ => Failure::Validation(e.to_string()),
        }
    }
}
