//! Multi-agent text-to-SQL pipeline: schema catalog, model gateway, error
//! taxonomy, agents, SQL execution, the correction loop, and evaluation.

pub mod agents;
pub mod eval;
pub mod exec;
pub mod gateway;
pub mod pipeline;
pub mod schema;
pub mod taxonomy;

pub use agents::{Agents, TemplateSet};
pub use exec::{execute, sanitize, ExecutionOutcome, SqlQuery};
pub use gateway::{AgentRole, Backend, ChatRequest, Gateway, ModelRoute};
pub use pipeline::{Pipeline, PipelineConfig, PipelineInput, PipelineResult};
pub use schema::{DatabaseSchema, LinkedSchema};
pub use taxonomy::{default_taxonomy, Taxonomy};
