//! Continuous-time spatiotemporal calibration of multi-radar, multi-IMU
//! sensor suites.

pub mod estimator;
pub mod evaluation;
pub mod init;
pub mod io;
pub mod lie;
pub mod models;
pub mod pipeline;
pub mod real;
pub mod report;
pub mod sim;
pub mod solver;
pub mod spline;
