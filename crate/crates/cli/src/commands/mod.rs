pub mod evaluate;
pub mod stage;
