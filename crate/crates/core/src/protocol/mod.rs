//! Wire format and per-session state machine shared by the edge and the server.

mod session;
pub mod wire;

pub use session::{Action, Event, Session, SessionState};
pub use wire::{code, decode, decode_header, encode, Header, ImagePayload, Message, WireError};
