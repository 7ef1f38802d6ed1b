pub mod annotate;
pub mod corpus;
pub mod embed_store;
pub mod feature_reg;
pub mod probe_free;
pub mod probe_mlp;
pub mod stats;
