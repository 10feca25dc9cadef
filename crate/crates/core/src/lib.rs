pub mod clock;
pub mod events;
pub mod fleet;
pub mod fsutil;
pub mod governor;
pub mod ledger;
pub mod tuner;
pub mod notifier;
pub mod dashboard;
pub mod kernel;
pub mod simharness;
