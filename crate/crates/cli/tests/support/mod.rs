#![allow(dead_code)]

pub mod oracle;
pub mod pipeline;
pub mod world;
