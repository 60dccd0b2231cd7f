//! Crosstalk-aware interconnect timing estimation.
//!
//! Layout ingestion and coupling extraction ([`layout`]), a coupled-RC
//! transient reference ([`oracle`]), timing-window filtering ([`window`]),
//! feature extraction ([`features`]), tree-ensemble models ([`model`]),
//! stage/path delay assembly ([`sta`]) and a synthetic design generator
//! ([`bench`]).

pub mod error;
pub mod layout;
pub mod oracle;
pub mod bench;
pub mod window;
pub mod features;
pub mod model;
pub mod sta;
