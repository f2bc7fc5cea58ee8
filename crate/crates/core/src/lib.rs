pub mod config;
pub mod error;
pub mod geom;
pub mod world;
pub mod predicates;
pub mod planner;
pub mod tasks;
pub mod solvers;
pub mod render;
pub mod recorder;
pub mod harness;
