//! Helpers shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

pub mod criteria;
pub mod gradcheck;
pub mod oracle;
pub mod toy;
