pub mod compare;
pub mod gradcheck;
pub mod synth;
pub mod track;
