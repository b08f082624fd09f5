pub mod adam;
pub mod attack;
pub mod checkpoint;
pub mod corpus;
pub mod experiment;
pub mod federated;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;
