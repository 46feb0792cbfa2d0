pub mod debias;
pub mod edit;
pub mod eval;
pub mod fixture;
pub mod inspect;
