//! Workflow model, resource model, scheduler and cluster simulator for a
//! science gateway. Pure logic with no IO; builds without `std`.
#![no_std]
extern crate alloc;

pub mod driver;
pub mod resource;
pub mod scheduler;
pub mod sim;
pub mod workflow;
