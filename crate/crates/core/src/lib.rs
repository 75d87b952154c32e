//! Symbolic analysis of cryptographic protocols in the Dolev-Yao model.
//!
//! Protocols are written in a small Alice&Bob style language (see
//! [`cli::parse_spec`]). The library decides realizability, searches bounded
//! state spaces for secrecy attacks, checks the well-composedness discipline
//! and rewrites protocols into well-composed form.

pub mod cli;
pub mod deduction;
pub mod harden;
pub mod protocol;
pub mod search;
pub mod semantics;
pub mod term;

/// Protocol specifications bundled with the crate.
pub mod corpus {
    /// The TMN key-distribution protocol.
    pub const TMN: &str = include_str!("../protocols/tmn.proto");
    /// TMN with a signature added inside every encryption but no
    /// private-key wrapping.
    pub const TMN_SIG: &str = include_str!("../protocols/tmn_sig.proto");
    /// The well-composed version of TMN.
    pub const TMN_WC: &str = include_str!("../protocols/tmn_wc.proto");

    pub const ALL: [&str; 3] = [TMN, TMN_SIG, TMN_WC];
}
