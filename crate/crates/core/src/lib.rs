pub mod bench;
pub mod client;
pub mod data;
pub mod filters;
pub mod model;
pub mod protocol;
pub mod server;
pub mod sfm;
pub mod sim;
