pub mod canvas;
pub mod data;
pub mod metrics;
pub mod model;
pub mod netlist;
pub mod tensor;
pub mod training;
pub mod vgae;
