// `!(x > 0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod autodiff;
pub mod criteria;
pub mod deformation;
pub mod evaluation;
pub mod geodesic;
pub mod hash;
pub mod hierarchy;
pub mod kernels;
pub mod mesh;
pub mod optim;
pub mod scalar;
pub mod synthetic;

pub use scalar::Real;

/// Double-precision instantiations of the generic types.
pub type Mesh = mesh::TriMesh<f64>;
pub type Hierarchy = hierarchy::PatchHierarchy<f64>;
pub type Level = hierarchy::PatchLevel<f64>;
pub type Features = association::FeatureField<f64>;
pub type Deformation = deformation::DeformationParams<f64>;
pub type Weights = deformation::BlendWeights<f64>;
pub type Distances = geodesic::DistanceMatrix<f64>;
pub type Matching = optim::MatchResult<f64>;
pub type Tape = autodiff::Tape<f64>;
