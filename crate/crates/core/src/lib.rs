pub mod canonical;
pub mod cli;
pub mod game;
pub mod linalg;
pub mod model;
pub mod operators;
pub mod riccati;
pub mod sim;
pub mod synthesis;
