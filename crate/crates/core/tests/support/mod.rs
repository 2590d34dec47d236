#![allow(dead_code)]

pub mod finite_diff;
