pub mod config;
pub mod control;
pub mod dynamics;
pub mod geom;
pub mod harness;
pub mod protocol;
pub mod sensing;
pub mod server;
pub mod track;
pub mod reward;
pub mod traffic;
