pub mod autodiff;
pub mod corpus;
pub mod margin;
pub mod model;
pub mod trainer;
pub mod analysis;
