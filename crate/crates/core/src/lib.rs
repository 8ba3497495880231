pub mod control_law;
pub mod expr;
pub mod gain_design;
pub mod matrices;
pub mod normal_form;
pub mod observer;
pub mod plants;
pub mod region;
pub mod simulator;
