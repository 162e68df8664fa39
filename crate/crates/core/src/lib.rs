//! Laboratory for performative human-ML collaboration on the 0-1 knapsack task.
//!
//! The crate generates hard knapsack instances, trains and calibrates
//! recommenders, simulates human decision-makers, iterates the
//! deploy → label → retrain loop and characterizes its equilibria through
//! collaborative characteristic functions (CCFs) and learning paths (CLPs).
//! It also hosts the session/event-log logic of the live study backend and the
//! cluster-robust analysis used to estimate CCFs from study logs.

pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod human;
pub mod knapsack;
pub mod recommend;
pub mod rng;
pub mod stats;
pub mod study;
pub mod verify;

pub use error::{Error, Result};
pub use knapsack::{
    generate_instance, random_fill, solve_bruteforce, solve_exact, utility, GeneratorParams,
    KnapsackInstance, Solution, SolvedInstance, UtilityKind,
};
pub use recommend::{Recommend, Recommender, RecommenderKind};
pub use dynamics::{Ccf, LearnerMap, LearningPath};
pub use human::HumanModel;
