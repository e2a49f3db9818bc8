pub mod actors;
pub mod codec;
pub mod config;
pub mod crypto;
pub mod ike;
pub mod ipsec;
pub mod net;
pub mod scenario;
pub mod token;
