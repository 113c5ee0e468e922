pub mod dataio;
pub mod datamodel;
pub mod encoder;
pub mod decoders;
pub mod losses;
pub mod metrics;
pub mod mtl_optim;
pub mod pipeline;
