pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experts;
pub mod gating;
pub mod io;
pub mod labels;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod report;
pub mod run;
pub mod seed;
pub mod task;
pub mod training;
