pub mod camera;
pub mod cli;
pub mod evalreg;
pub mod imaging;
pub mod losses;
pub mod optim;
pub mod spherefit;
pub mod synth;
pub mod warp;
