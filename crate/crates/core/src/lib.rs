//! Controlled feedback-loop simulation and phase-wise risk diagnostics for
//! recommender systems whose components behave like generative models.
//!
//! The pipeline is: [`ingest`] a log, [`timeline`] split it at a cutoff and
//! schedule the post-cutoff periods, run the recommend → inject → retrain
//! cycle in [`loop_engine`] using a [`recommenders`] backbone and optional
//! [`riskgen`] role generators, then compute bias, hallucination and
//! polarization metrics in [`diagnostics`]. [`cli`] ties it together.

pub mod cli;
pub mod diagnostics;
pub mod ingest;
pub mod loop_engine;
pub mod recommenders;
pub mod riskgen;
pub mod seeding;
pub mod synthetic;
pub mod timeline;
pub mod trace_io;

pub use ingest::{AttributeTable, Dataset, Interaction, SubjectKind};
pub use loop_engine::{LoopTrace, PipelineConfig};
pub use recommenders::{EmbeddingMatrix, RankedList, RecommenderConfig, TrainedModel};
pub use timeline::{PeriodSchedule, SplitConfig, TemporalSplit};
