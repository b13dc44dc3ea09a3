//! A desk-scale laboratory for reinforcement learning under latent dynamics:
//! exact tabular MDP machinery, decodable emission processes, an
//! observable-to-latent reduction with hindsight and self-predictive
//! representation learners, random-embedding value classes with an optimistic
//! elimination learner, hardness benchmark families, and a structural
//! identity oracle backing it all.

pub mod algs;
pub mod dist;
pub mod envs;
pub mod error;
pub mod harness;
pub mod latent;
pub mod mdp;
pub mod oracle;
pub mod reduction;
pub mod replearn;

pub use error::LabError;
