pub mod bench;
pub mod fsa;
pub mod logspace;
pub mod loss;
pub mod model;
pub mod fsa_search;
pub mod search;
