pub mod consumer;
pub mod error;
pub mod experiments;
pub mod market;
pub mod oracle;
pub mod potentials;
pub mod tatonnement;

mod numeric;

pub use error::{Error, Result};
pub use market::{Allocation, Buyer, Family, Market, PriceVector, TieBreak, UtilityFunction};
