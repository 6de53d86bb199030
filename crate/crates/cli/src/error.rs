use czsl::dataset::DatasetError;
use czsl::diffcore::TensorError;
use czsl::encoder::EncoderError;
use czsl::evaluator::EvalError;
use czsl::metalearn::MetaError;
use czsl::sampler::SamplerError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("sampler error: {0}")]
    Sampler(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Sampler(_) => 4,
            CliError::Numeric(_) => 5,
            CliError::Io(_) => 6,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Sampler(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Checkpoint(_) => CliError::Io(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Tensor(t) => t.into(),
            EncoderError::Unpretrained => CliError::Config(e.to_string()),
            EncoderError::InvalidDistribution(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<MetaError> for CliError {
    fn from(e: MetaError) -> Self {
        match e {
            MetaError::InvalidConfig(m) => CliError::Config(m),
            MetaError::NonFinite(_) => CliError::Numeric(e.to_string()),
            MetaError::Sampler(s) => s.into(),
            MetaError::Encoder(x) => x.into(),
            MetaError::Dataset(d) => d.into(),
            MetaError::Tensor(t) => t.into(),
            MetaError::Eval(v) => v.into(),
            MetaError::Augment(a) => CliError::Numeric(a.to_string()),
        }
    }
}
