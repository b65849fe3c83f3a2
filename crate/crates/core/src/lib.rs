//! Event-driven callback execution over a simulated reconfigurable-hardware
//! substrate.
//!
//! The crate provides an in-process publish/subscribe and service bus, the
//! standard snapshot-based executor, and a hybrid executor that dispatches
//! callbacks to software workers or to hardware workers backed by
//! reconfigurable slots loaded on demand through a single configuration
//! port. Scenarios describe benchmark topologies in a config file and run
//! on either a deterministic discrete-event backend or a threaded backend
//! with scaled real-time sleeps.

pub mod bus;
pub mod clock;
pub mod executor;
pub mod registry;
pub mod scenario;
pub mod slots;
pub mod time;
pub mod workload;

pub use bus::{Message, MessageBus, ReadySet, TopicName};
pub use clock::{Clock, Timer};
pub use executor::{
    ExecutionRecord, ExecutorConfig, HybridExecutor, StandardExecutor, StopCondition, WorkerKind,
};
pub use registry::{CallbackId, CallbackKind, CallbackLists, OffsetVector, ResourceMask};
pub use slots::{Bitstream, ReconfigModel, SlotDescriptor, SlotId, SlotManager};
pub use time::{Duration, Instant};
pub use workload::WorkModel;
