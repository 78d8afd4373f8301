//! Three-party secure GCN training over secret-shared graphs.
//!
//! Parties P1 and P2 hold 2-of-2 additive shares of every secret value in
//! the ring of integers modulo 2^64; P3 acts as the offline dealer of Beaver
//! triples and as the helper party of the one-round array access protocol.
//! Every protocol is written once and executed by all three parties (SPMD),
//! branching on the party id where roles differ.

pub mod error;
pub mod graphstore;
pub mod net;
pub mod oracle;
pub mod prims;
pub mod ring;
pub mod sgcn;
pub mod shares;

pub use error::{Error, Result};
pub use net::{Ctx, PartyId};
pub use ring::{FixedCodec, RingElem};
