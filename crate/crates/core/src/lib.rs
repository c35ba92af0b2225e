pub mod builder;
pub mod cli;
pub mod corpus;
pub mod eval;
pub mod mlm;
pub mod nn;
pub mod world;
