pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod head;
pub mod interactions;
pub mod model;
pub mod modelfile;
pub mod optim;
pub mod par;
pub mod params;
pub mod proto;
pub mod svg;
pub mod training;

pub use error::{Error, Result};
