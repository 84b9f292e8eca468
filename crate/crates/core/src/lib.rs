//! Synthetic question-answer dataset pipeline: chunking, LLM generation,
//! embeddings, clustering, t-SNE projection, quality metrics and review.

pub mod clustering;
pub mod embedding;
pub mod evaluation;
pub mod http;
pub mod ingest;
pub mod jsonl;
pub mod llm;
pub mod projection;
pub mod review;
pub mod text;

pub use clustering::{kmeans, kmeans_auto, ClusterError, ClusterModel};
pub use embedding::{embed_texts, EmbedBackendConfig, EmbedBackendKind, EmbedError, Embedder, Vector};
pub use evaluation::{
    build_report, cosine_similarity, diversity_projection, relevance_report, shannon_entropy,
    BenchmarkSet, EvalError, EvaluationReport,
};
pub use ingest::{chunk_document, load_document, Chunk, ChunkingConfig, Document, DocumentFormat, IngestError};
pub use llm::{
    Gateway, GenBackendConfig, GenBackendKind, GenError, PairStatus, QnaPair, QuestionType, Summary,
};
pub use projection::{tsne, ProjectionError, TsneConfig, TsneOutput};
pub use review::{DecisionRequest, ReviewDecision, ReviewError, Verdict};
