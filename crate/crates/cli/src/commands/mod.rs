pub mod bench;
pub mod build;
pub mod search;
pub mod translate;
