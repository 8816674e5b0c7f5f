pub mod knowledge;
pub mod numcore;
