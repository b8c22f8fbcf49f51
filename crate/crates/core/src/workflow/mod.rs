//! Event-driven modeling pipeline. A request carrying a key-value target
//! description passes through four services connected by a message bus:
//! selection, building data, weather data and learning (train + forecast).
//! Delivery is at-least-once with bounded redelivery; every handler is
//! idempotent on `(request_id, kind)`.

mod bus;
mod engine;
pub mod http;
mod store;

pub use bus::{read_log, write_log, Bus, Envelope, LogEvent, LogRecord, MemoryBus, MessageKind, Service};
pub use engine::{
    replay, states_from_log, FaultPlan, Forecast, RequestRecord, RequestState, Workflow, WorkflowConfig,
    FORECAST_HORIZON,
};
pub use store::{Link, StoreCatalog};
