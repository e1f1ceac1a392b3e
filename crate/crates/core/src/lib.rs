pub mod assignment;
pub mod cost;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod mining;
pub mod consistency;
pub mod simulator;
pub mod config;
pub mod teacher_student;
pub mod ingest;
pub mod report;
pub mod check;
pub mod cli;
