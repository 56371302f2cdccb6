use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("duplicate record id {id:?}")]
    DuplicateId { id: String },
    #[error("empty record id")]
    EmptyId,
    #[error("record {id:?} has {got} attribute values, schema has {expected}")]
    SchemaMismatch { id: String, expected: usize, got: usize },
    #[error("unknown record id {0:?}")]
    UnknownRecord(String),
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("duplicate pair ({0:?}, {1:?})")]
    DuplicatePair(String, String),
    #[error("vector for {id:?} has {got} components, expected {expected}")]
    DimensionMismatch { id: String, expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite component in vector for {id:?}")]
    NonFinite { id: String },
    #[error("zero vector for {id:?} cannot be normalized")]
    ZeroVector { id: String },
    #[error("no embedding for record {0:?}")]
    MissingEmbedding(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("single-class training set")]
    SingleClass,
    #[error("no positive labels")]
    NoPositives,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
}
