pub mod config;
pub mod demofile;
pub mod gradcheck;
pub mod gradcore;
pub mod metrics;
pub mod pattention;
pub mod policy;
pub mod report;
pub mod seeds;
pub mod tasksuite;
pub mod tokenpool;
pub mod trainer;
