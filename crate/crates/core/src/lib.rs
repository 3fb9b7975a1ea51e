pub mod analysis;
pub mod cyclevae;
pub mod f0conv;
pub mod nn;
pub mod pairing;
pub mod signal;
pub mod toy;
pub mod vocoder;
pub mod wsola;
