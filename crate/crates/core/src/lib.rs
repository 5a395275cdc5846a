pub mod analysis;
pub mod annotations;
pub mod augment;
pub mod geometry;
mod imgops;
pub mod gridcodec;
pub mod eval;
pub mod loss;
pub mod model;
pub mod synthgen;
