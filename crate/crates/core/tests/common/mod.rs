//! Independent reference computations shared by the integration tests and
//! the acceptance suite.
#![allow(dead_code)]

pub mod oracles;
pub mod gradients;
pub mod mc;
pub mod optimality;
pub mod sigprops;
pub mod hand;
