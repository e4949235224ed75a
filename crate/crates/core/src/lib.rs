//! Mixed-integer optimal control via a hybrid actor-critic and an
//! integer-free nonlinear MPC.
//!
//! The toolkit trains a soft actor-critic on the full hybrid action space of
//! a deterministic MDP, then deploys it as a receding-horizon controller:
//! the actor rollout fixes the discrete input sequence and warm-starts the
//! continuous variables, and the critic serves as terminal cost of a reduced
//! single-shooting NLP. A brute-force enumeration benchmark solves the same
//! mixed-integer problem globally for reference. The bundled environment is
//! an F1 race-strategy instance (energy allocation + pit stops).

pub mod control;
pub mod error;
pub mod f1;
pub mod math;
pub mod mdp;
pub mod net;
pub mod nlp;
pub mod oracle;
pub mod par;
pub mod sac;
pub mod toy;

pub use error::{Error, Result};
