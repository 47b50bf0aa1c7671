pub mod augment;
pub mod cochlea;
pub mod lexicon;
pub mod network;
pub mod probes;
pub mod report;
pub mod seed;
pub mod store;
pub mod synth;
pub mod trainer;
pub mod wav;
