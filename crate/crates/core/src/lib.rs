pub mod crf;
pub mod document;
pub mod error;
pub mod eval;
pub mod gcn;
pub mod gradcheck;
pub mod graph;
pub mod labels;
pub mod lstm;
pub mod model;
pub mod optim;
pub mod train;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod vocab;
