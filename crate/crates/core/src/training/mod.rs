//! Objective, gradients, optimizer and the window-level training loop.

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod trainer;
