//! Command-line tool and network service for the spiking PID simulator.

pub mod cli;
pub mod driver;
pub mod hub;
pub mod service;
