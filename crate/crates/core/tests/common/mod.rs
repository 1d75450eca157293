#![allow(dead_code)]

pub mod grad_suite;
pub mod models;
pub mod oracles;
