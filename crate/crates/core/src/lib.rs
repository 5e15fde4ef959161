pub mod checkpoint;
pub mod eligibility;
pub mod embedding;
pub mod fixture;
pub mod metrics;
pub mod ontology;
pub mod pipeline;
pub mod schema;
pub mod smiles;
pub mod smoe;
pub mod synthetic;
pub mod text;
pub mod textualize;
pub mod training;
pub mod validate;
