//! HTTP JSON API over the pixelmod engine, plus the shared configuration
//! used by the `pixelmod` command-line tool.

pub mod api;
pub mod config;
pub mod error;
pub mod state;

pub use api::{router, serve, SCHEMA_VERSION};
pub use config::{Config, ConfigOverrides};
pub use error::{ApiError, ErrorCode};
pub use state::Shared;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
