pub mod batch;
pub mod catalog;
pub mod fixture;
pub mod report;
pub mod sim_io;
pub mod simulate;
