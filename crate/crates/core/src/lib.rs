pub mod actions;
pub mod error;
pub mod eval;
pub mod inpaint;
pub mod pnm;
pub mod policy;
pub mod segment;
pub mod session;
pub mod sim;
pub mod sync;
pub mod types;

pub use error::{Error, Result};
