//! Low-carbon flexible-load management on radial distribution feeders.
//!
//! The operator side solves a DistFlow second-order-cone dispatch and prices
//! each bus ([`dispatch`]); carbon emission flow traces generator emissions
//! to consuming buses ([`carbon`]). Load agents live in a day-long episodic
//! environment ([`env`]) and learn hybrid continuous/on-off policies with
//! consensus multi-agent constrained policy optimization ([`trainer`]),
//! compared against the learners in [`baselines`]. [`harness`] drives
//! experiments from TOML configs.
//!
//! Numeric kernels are generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which the experiment harness uses.

pub mod baselines;
pub mod carbon;
pub mod dispatch;
pub mod env;
pub mod grid;
pub mod harness;
pub mod linalg;
pub mod neural;
pub mod scalar;
pub mod trainer;

pub use scalar::Scalar;

pub type Matrix = linalg::DenseMatrix<f64>;
pub type Params = neural::ParamVector<f64>;
pub type Policy = neural::HybridPolicy<f64>;
pub type Critic = neural::ValueNet<f64>;
pub type CarbonFlow = carbon::CarbonFlowState<f64>;
pub type Learner = trainer::Learner<f64>;
pub type Controller = trainer::Controller<f64>;
pub type Rollouts = trainer::RolloutBuffer<f64>;

pub type Policy32 = neural::HybridPolicy<f32>;
pub type Learner32 = trainer::Learner<f32>;
