//! Client for the lockbox service.
//!
//! All document cryptography happens here: the plaintext is sealed under a
//! fresh data key, the key is wrapped with the public key the server hands
//! out for the upload session, and only the resulting envelope is sent.

pub mod cli;
pub mod client;
pub mod session;
pub mod transport;

pub use client::{exit, Client, ClientError};
pub use transport::{HttpTransport, InProcess, Recording, Transport};
