#![allow(dead_code)]

pub mod model;
pub mod molgen;
pub mod records;
