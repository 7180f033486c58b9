pub mod actions;
pub mod error;
pub mod forward;
pub mod grid;
pub mod lddmm;
pub mod simkit;
pub mod template;
pub mod baseline;
pub mod io;
pub mod cli;
