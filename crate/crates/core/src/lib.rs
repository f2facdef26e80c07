pub mod annotate;
pub mod clock;
pub mod cluster;
pub mod config;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod eval;
pub mod keywords;
pub mod llm;
pub mod model;
pub mod pipeline;
pub mod source;
pub mod text;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/queries.md")]
    pub struct Queries;
    #[doc = include_str!("../../../book/src/annotation.md")]
    pub struct Annotation;
    #[doc = include_str!("../../../book/src/clustering.md")]
    pub struct Clustering;
    #[doc = include_str!("../../../book/src/splits.md")]
    pub struct Splits;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/pipeline.md")]
    pub struct Pipeline;
}
