pub mod distill;
pub mod expr;
pub mod interp;
pub mod optimizers;
pub mod report;
pub mod symreg;
pub mod tasks;
pub mod teacher;
pub mod trajectory;
pub mod tuner;
pub mod util;
pub mod workflow;
