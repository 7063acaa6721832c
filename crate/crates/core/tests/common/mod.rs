#![allow(dead_code)]

pub mod dlpm_ref;
pub mod flat_cache;
