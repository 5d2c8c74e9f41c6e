//! Desktop-grid node daemon and client toolkit.
//!
//! A single daemon (`gridfs serve`) hosts every service a grid node offers:
//!
//! * [`ftsm`]: bulk file transfer over N parallel TCP streams with resume and
//!   an end-to-end MD5 check.
//! * [`dfsm`]: a stateless remote file system (read, write, flush, lock,
//!   unlock, seek, close, set-length, stat) with advisory byte-range locks.
//! * [`taskexec`]: remote execution of task sets (built-in functions and
//!   external processes) with dependency staging.
//! * [`cryptengine`]: block-sliced distributed encryption across worker nodes.
//!
//! Every connection speaks the framed protocol in [`wire`] and is
//! authenticated and optionally sealed by [`secchan`]. Access is gated by the
//! XML permission documents in [`perms`].

pub mod cryptengine;
pub mod dfsm;
pub mod ftsm;
pub mod harness;
pub mod node;
pub mod perms;
pub mod retry;
pub mod secchan;
pub mod taskexec;
pub mod wire;

pub use wire::{Frame, FrameType, FieldMap, Mode, SecurityMode, SessionParams, Status};
