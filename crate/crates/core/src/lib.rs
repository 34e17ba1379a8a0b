pub mod cfm;
pub mod checkpoint;
pub mod decoders;
pub mod encoders;
pub mod flowode;
pub mod nn;
pub mod numerics;
pub mod synthtask;
pub mod superres;
pub mod harness;
