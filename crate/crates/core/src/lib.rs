pub mod augment;
pub mod baselines;
pub mod compgraph;
pub mod dataset;
pub mod diffcore;
pub mod encoder;
pub mod evaluator;
pub mod metalearn;
pub mod sampler;
pub mod seeds;
