//! Bundled network fixtures used by tests, benches, and CLI examples.
//!
//! All four cases fit the simple branch model the parser enforces: series
//! impedance only, no taps, no shunts, positive thermal limits.

use crate::grid::{parse_matpower, LoadVector, Network};

/// IEEE 14-bus network (11 active / 11 reactive loads, 5 generators),
/// preprocessed to the simple branch model with wide thermal limits.
pub const CASE14: &str = include_str!("../cases/case14.m");
/// 30-bus network keeping its original thermal limits, so some flows bind.
pub const CASE30: &str = include_str!("../cases/case30.m");
/// Two buses: one slack generator feeding one load over a lossless line.
pub const CASE2: &str = include_str!("../cases/case2.m");
/// Symmetric lossless star: slack generator center, two identical load legs.
pub const CASE3_STAR: &str = include_str!("../cases/case3_star.m");

pub fn case14() -> (Network, LoadVector) {
    parsed(CASE14)
}

pub fn case30() -> (Network, LoadVector) {
    parsed(CASE30)
}

pub fn case2() -> (Network, LoadVector) {
    parsed(CASE2)
}

pub fn case3_star() -> (Network, LoadVector) {
    parsed(CASE3_STAR)
}

/// Look up a bundled case's text by name, e.g. `"case14"`.
pub fn by_name(name: &str) -> Option<&'static str> {
    match name {
        "case2" => Some(CASE2),
        "case3_star" => Some(CASE3_STAR),
        "case14" => Some(CASE14),
        "case30" => Some(CASE30),
        _ => None,
    }
}

fn parsed(text: &'static str) -> (Network, LoadVector) {
    parse_matpower(text).expect("bundled case parses")
}
