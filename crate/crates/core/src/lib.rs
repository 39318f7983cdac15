//! T411: a gateway that turns a microblog account into a programmable
//! auto-responder.
//!
//! Messages addressed to the base account have the form `Key Optional_Text`.
//! The key selects a registered `<key, webhook>` service; the gateway calls
//! the webhook with a GET carrying the original text and the author, and posts
//! the response back as a reply on the channel the message came in on.
//! Messages without a registered key fall through to a pattern/effect chatbot.

pub mod botkit;
pub mod chatbot;
pub mod dispatch;
pub mod domain;
pub mod pipeline;
pub mod registry;
pub mod simulator;
pub mod transport;

pub use dispatch::{compose_reply, percent_encode, OutboundReply};
pub use domain::{Channel, Handle, InboundMessage, Key, ParsedCommand, ServiceRegistration};
pub use pipeline::{Gateway, Mode};
pub use registry::RegistryStore;
pub use simulator::SimWorld;
