#![allow(dead_code)]

pub mod fd;
pub mod heads;
pub mod text;
