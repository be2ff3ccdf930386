#![allow(dead_code)]

pub mod oracle;
pub mod props;
pub mod regimes;
