//! Live annotation sessions over HTTP: a human drives the same click loop,
//! backends and trace format the simulator uses.

pub mod api;
pub mod manager;

pub use api::{router, serve};
pub use manager::{
    ClickTarget, CreateSession, FinalResult, ServiceConfig, ServiceError, SessionManager,
};
