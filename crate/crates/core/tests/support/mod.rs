//! Independent reference implementations used only by the tests.

#![allow(dead_code)]

pub mod da;
pub mod gradcheck;
pub mod linear;
pub mod ode;
