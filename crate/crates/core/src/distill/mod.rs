//! Score distillation of a 4D field against a state-map-conditioned score
//! provider, with an optional temporal video regularizer.

pub mod oracle;
pub mod protocol;
pub mod provider;
pub mod run;
pub mod sampling;
pub mod sds;
pub mod temporal;

pub use crate::schedule::{NoiseSchedule, ScheduleKind, WeightKind};
pub use protocol::{
    conformance_run, open_streams, serve, spawn_echo, ConformanceReport, ExternalProvider, ProviderAddress, ServeStats, Streams,
};
pub use provider::{
    checked_predict, make_analytic_provider, AnalyticProvider, AnalyticTarget, Capabilities, EchoProvider,
    ProviderDenoiser, ScoreProvider, ScoreRequest,
};
pub use run::{
    checkpoint_hash, make_schedule, run_distillation, DistillConfig, DistillObserver, IterationMetrics,
    IterationStatus, NdjsonObserver, NoObserver, ScheduleConfig,
};
pub use sampling::{sample_view_time, ViewSampling, ViewTime};
pub use sds::{sds_seed, sds_step, SdsSeed};
pub use temporal::{frame_times, temporal_reg, ConstantOffset, IdentityRefiner, TemporalSmoothing, VideoRefiner};

#[cfg(test)]
mod tests;
