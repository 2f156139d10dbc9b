#![allow(dead_code)]

pub mod codes;
pub mod gradcases;
