pub mod group;
pub mod harness;
pub mod hibe;
pub mod hve;
pub mod node;
pub mod par;
pub mod policy;
pub mod repo;
pub mod scheme;
pub mod wire;
