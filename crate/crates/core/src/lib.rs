pub mod container;
pub mod experiment;
pub mod network;
pub mod rng;
pub mod salient;
pub mod similarity;
pub mod synthdata;
pub mod table;
pub mod tensor;
pub mod transfer;
