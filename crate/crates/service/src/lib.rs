//! Persistent annotation sessions and the HTTP interface over them.
//!
//! [`session::Session`] owns one session directory and is shared by the
//! command-line tool and the server in [`api`].

pub mod api;
pub mod session;

pub use api::{router, serve, AppState};
pub use session::{RetrainRequest, Session, SessionError, SortKey, SCHEMA_VERSION};
